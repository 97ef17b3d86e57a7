//! Rule-based extraction of a verdict from a chain-of-thought response.
//!
//! Scope selection comes first:
//!
//! * **S1** – if the response contains a conclusion marker (`conclusion:`,
//!   `final answer:`, `verdict:`, `judgment:`), the scope is everything after
//!   the *last* marker. Earlier markers are read up to the end of their line
//!   and only matter when they contradict the last one.
//! * **S2** – without a marker the scope is the last two sentences.
//!
//! Inside a scope the rules apply in precedence order:
//!
//! | id | rule                | patterns                                                      | verdict   |
//! |----|---------------------|---------------------------------------------------------------|-----------|
//! | R1 | uncertainty         | cannot determine, cannot tell, unclear, not sure, uncertain, insufficient (+ `can't`/`unable to` forms) | Uncertain |
//! | R2 | negated anomaly     | no anomaly, no anomalies, not abnormal, not anomalous, no issue(s), or any R3 keyword with a negator (no, not, never, without, nothing, none, *n't*) among the three preceding words of its clause | Normal |
//! | R2 | normal affirmation  | `normal` preceded by is/are/appears/looks/seems/be             | Normal    |
//! | R3 | positive anomaly    | anomaly detected, anomalous, abnormal, anomaly, anomalies, not normal | Anomalous |
//! | R4 | conflict            | see below                                                     | Uncertain |
//!
//! A negated anomaly outranks every bare R3 keyword in the scope. A bare
//! normal affirmation does not: if it co-occurs with a bare R3 keyword the
//! scope is a conflict (R4). Contradictory verdicts under two different
//! markers are also a conflict. When nothing fires the verdict is Uncertain
//! with rule R0.
//!
//! Matching is ASCII case-insensitive and respects word boundaries, so
//! `normal` never matches inside `abnormal`.

use std::fmt;
use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Normal,
    Anomalous,
    Uncertain,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Normal => "normal",
            Verdict::Anomalous => "anomalous",
            Verdict::Uncertain => "uncertain",
        }
    }

    /// Binary label: 0 for normal, 1 for anomaly, `None` when uncertain.
    pub fn label(self) -> Option<u8> {
        match self {
            Verdict::Normal => Some(0),
            Verdict::Anomalous => Some(1),
            Verdict::Uncertain => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleId {
    #[serde(rename = "R0")]
    NoMatch,
    #[serde(rename = "R1")]
    Uncertainty,
    #[serde(rename = "R2")]
    NegatedAnomaly,
    #[serde(rename = "R3")]
    PositiveAnomaly,
    #[serde(rename = "R4")]
    Conflict,
}

impl RuleId {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleId::NoMatch => "R0",
            RuleId::Uncertainty => "R1",
            RuleId::NegatedAnomaly => "R2",
            RuleId::PositiveAnomaly => "R3",
            RuleId::Conflict => "R4",
        }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Judgment {
    pub verdict: Verdict,
    /// Reasoning text preceding the conclusion scope.
    pub rationale: String,
    pub matched_rule: RuleId,
    /// Byte range of the conclusion (marker included, when there is one).
    pub conclusion_span: Range<usize>,
}

static MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(?:conclusion|final answer|verdict|judgment|judgement)\s*:").unwrap());
static UNCERTAIN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"\b(?:cannot determine|cannot tell|can ?not determine|can ?not tell|can[’']t determine|can[’']t tell|unable to determine|unable to tell|unclear|not sure|uncertain|insufficient)\b",
    )
    .unwrap()
});
static NEGATED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(?:no anomaly|no anomalies|not abnormal|not anomalous|no issues?)\b").unwrap());
static AFFIRM_NORMAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(?:is|are|appears|appear|looks|look|seems|seem|be)\s+normal\b").unwrap());
static POSITIVE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b(?:anomaly detected|anomalies detected|anomalous|abnormal|anomaly|anomalies|not normal)\b").unwrap()
});

const NEGATORS: [&str; 8] = ["no", "not", "never", "without", "nothing", "none", "neither", "nor"];
const CLAUSE_BREAKS: [&str; 6] = ["but", "although", "though", "however", "while", "yet"];

/// Evaluates one scope. `lower` is the ASCII-lowercased response.
fn judge_scope(lower: &str, scope: Range<usize>) -> (Verdict, RuleId) {
    let text = &lower[scope.clone()];
    if UNCERTAIN.is_match(text) {
        return (Verdict::Uncertain, RuleId::Uncertainty);
    }

    let negations: Vec<Range<usize>> = NEGATED.find_iter(text).map(|m| m.range()).collect();
    let mut strong_normal = !negations.is_empty();
    let mut bare_positive = false;
    for m in POSITIVE.find_iter(text) {
        let covered = negations.iter().any(|n| n.start < m.end() && m.start() < n.end);
        if covered || negated_in_clause(&text[..m.start()]) {
            strong_normal = true;
        } else {
            bare_positive = true;
        }
    }
    let affirmed = AFFIRM_NORMAL.is_match(text);

    match (strong_normal, affirmed, bare_positive) {
        (true, _, _) => (Verdict::Normal, RuleId::NegatedAnomaly),
        (false, true, true) => (Verdict::Uncertain, RuleId::Conflict),
        (false, true, false) => (Verdict::Normal, RuleId::NegatedAnomaly),
        (false, false, true) => (Verdict::Anomalous, RuleId::PositiveAnomaly),
        (false, false, false) => (Verdict::Uncertain, RuleId::NoMatch),
    }
}

/// True when one of the last three words of the clause ending at `before` is
/// a negator.
fn negated_in_clause(before: &str) -> bool {
    let clause_start = before.rfind([',', ';', ':', '.', '!', '?', '\n']).map_or(0, |i| i + 1);
    let words: Vec<&str> = before[clause_start..]
        .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '’'))
        .filter(|w| !w.is_empty())
        .collect();
    for word in words.iter().rev().take(3) {
        if CLAUSE_BREAKS.contains(word) {
            return false;
        }
        if NEGATORS.contains(word) || word.ends_with("n't") || word.ends_with("n’t") {
            return true;
        }
    }
    false
}

/// Byte ranges of sentences, trimmed, in order.
fn sentence_ranges(text: &str) -> Vec<Range<usize>> {
    let mut ranges = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let end = i + c.len_utf8();
        let boundary = match c {
            '\n' => true,
            '.' | '!' | '?' => chars.peek().is_none_or(|(_, next)| next.is_whitespace()),
            _ => false,
        };
        if boundary {
            push_trimmed(text, start..end, &mut ranges);
            start = end;
        }
    }
    push_trimmed(text, start..text.len(), &mut ranges);
    ranges
}

fn push_trimmed(text: &str, range: Range<usize>, out: &mut Vec<Range<usize>>) {
    let slice = &text[range.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    if lead + trail < slice.len() {
        out.push(range.start + lead..range.end - trail);
    }
}

fn line_end(text: &str, from: usize, limit: usize) -> usize {
    text[from..limit].find('\n').map_or(limit, |i| from + i)
}

fn trim_range(text: &str, range: Range<usize>) -> Range<usize> {
    let slice = &text[range.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    if lead == slice.len() {
        return range.start..range.start;
    }
    range.start + lead..range.end - trail
}

/// Maps a model response to a verdict. Total: every input yields a judgment.
pub fn parse_judgment(response_text: &str) -> Judgment {
    let lower = response_text.to_ascii_lowercase();
    let markers: Vec<Range<usize>> = MARKER.find_iter(&lower).map(|m| m.range()).collect();

    if let Some(last) = markers.last() {
        let scope = last.end..lower.len();
        let (mut verdict, mut rule) = judge_scope(&lower, scope.clone());

        let earlier = markers
            .windows(2)
            .map(|w| w[0].end..line_end(&lower, w[0].end, w[1].start));
        let mut decisive: Vec<Verdict> = earlier
            .map(|r| judge_scope(&lower, r).0)
            .filter(|v| *v != Verdict::Uncertain)
            .collect();
        decisive.push(verdict);
        if decisive.contains(&Verdict::Normal) && decisive.contains(&Verdict::Anomalous) {
            verdict = Verdict::Uncertain;
            rule = RuleId::Conflict;
        }

        let span = trim_range(response_text, last.start..scope.end);
        return Judgment {
            verdict,
            rationale: response_text[..last.start].trim().to_string(),
            matched_rule: rule,
            conclusion_span: span,
        };
    }

    let sentences = sentence_ranges(&lower);
    let scope = match sentences.len() {
        0 => 0..0,
        n => sentences[n.saturating_sub(2)].start..sentences[n - 1].end,
    };
    let (verdict, rule) = judge_scope(&lower, scope.clone());
    Judgment {
        verdict,
        rationale: response_text[..scope.start].trim().to_string(),
        matched_rule: rule,
        conclusion_span: scope,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusItem {
    pub text: String,
    pub expected: Verdict,
    pub judgment: Judgment,
    pub agrees: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgreementReport {
    pub items: Vec<CorpusItem>,
    pub agreed: usize,
    pub total: usize,
}

impl AgreementReport {
    /// Fraction of items whose verdict matched; 0 for an empty corpus.
    pub fn agreement(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.agreed as f64 / self.total as f64
        }
    }

    pub fn disagreements(&self) -> impl Iterator<Item = &CorpusItem> {
        self.items.iter().filter(|i| !i.agrees)
    }
}

/// Parses every response and compares it with its expected verdict.
pub fn parse_corpus<S: AsRef<str> + Sync>(responses: &[(S, Verdict)]) -> AgreementReport {
    let items: Vec<CorpusItem> = crate::exec::map_ordered(responses, 0, |(text, expected)| {
        let judgment = parse_judgment(text.as_ref());
        CorpusItem {
            text: text.as_ref().to_string(),
            expected: *expected,
            agrees: judgment.verdict == *expected,
            judgment,
        }
    });
    let agreed = items.iter().filter(|i| i.agrees).count();
    AgreementReport {
        total: items.len(),
        agreed,
        items,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn verdict(text: &str) -> Verdict {
        parse_judgment(text).verdict
    }

    #[test]
    fn canonical_conclusions() {
        let j = parse_judgment("Step 1: look. Step 3: the bottle is visible. Conclusion: no anomaly detected.");
        assert_eq!(j.verdict, Verdict::Normal);
        assert_eq!(j.matched_rule, RuleId::NegatedAnomaly);
        assert_eq!(j.rationale, "Step 1: look. Step 3: the bottle is visible.");
        let text = "The tube is missing from the rack. Conclusion: anomaly detected.";
        let j = parse_judgment(text);
        assert_eq!(j.verdict, Verdict::Anomalous);
        assert_eq!(j.matched_rule, RuleId::PositiveAnomaly);
        assert_eq!(&text[j.conclusion_span.clone()], "Conclusion: anomaly detected.");
        assert_eq!(verdict("Reasoning.\nConclusion: uncertain."), Verdict::Uncertain);
    }

    #[test]
    fn marker_free_uncertainty() {
        let j = parse_judgment("The image is blurry; I cannot determine the state of the container.");
        assert_eq!(j.verdict, Verdict::Uncertain);
        assert_eq!(j.matched_rule, RuleId::Uncertainty);
    }

    #[test]
    fn negation_outranks_bare_keyword() {
        let j = parse_judgment("There is no anomaly, although the lighting is abnormal.");
        assert_eq!(j.verdict, Verdict::Normal);
        assert_eq!(j.matched_rule, RuleId::NegatedAnomaly);
    }

    #[test]
    fn contradictory_markers_conflict() {
        let j = parse_judgment("Conclusion: anomaly detected. Conclusion: no anomaly detected.");
        assert_eq!(j.verdict, Verdict::Uncertain);
        assert_eq!(j.matched_rule, RuleId::Conflict);
    }

    #[test]
    fn agreeing_markers_do_not_conflict() {
        assert_eq!(
            verdict("Verdict: abnormal\nThe bottle is gone.\nFinal answer: anomaly detected."),
            Verdict::Anomalous
        );
        assert_eq!(verdict("Verdict: unclear\nConclusion: no anomaly."), Verdict::Normal);
    }

    #[test]
    fn affirmation_against_bare_keyword_is_a_conflict() {
        let j = parse_judgment("The lighting looks normal. The bottle position is abnormal.");
        assert_eq!(j.verdict, Verdict::Uncertain);
        assert_eq!(j.matched_rule, RuleId::Conflict);
        assert_eq!(verdict("Conclusion: the scene appears normal."), Verdict::Normal);
    }

    #[test]
    fn word_boundaries() {
        assert_eq!(verdict("Conclusion: the state is abnormal."), Verdict::Anomalous);
        assert_eq!(verdict("Conclusion: nothing abnormal."), Verdict::Normal);
        assert_eq!(verdict("Conclusion: it isn't anomalous."), Verdict::Normal);
        assert_eq!(verdict("Conclusion: the container is not normal."), Verdict::Anomalous);
    }

    #[test]
    fn negator_does_not_cross_clause() {
        assert_eq!(verdict("Conclusion: not the bottle, an anomaly."), Verdict::Anomalous);
        assert_eq!(verdict("Conclusion: no doubt, but anomaly present"), Verdict::Anomalous);
    }

    #[test]
    fn only_last_two_sentences_without_marker() {
        let text = "An anomaly would be a missing bottle. I looked closely. The bottle is there. It is normal.";
        assert_eq!(verdict(text), Verdict::Normal);
        let j = parse_judgment(text);
        assert_eq!(&text[j.conclusion_span], "The bottle is there. It is normal.");
    }

    #[test]
    fn case_insensitive() {
        assert_eq!(verdict("CONCLUSION: NO ANOMALY DETECTED."), Verdict::Normal);
        assert_eq!(verdict("conclusion: Anomaly Detected"), Verdict::Anomalous);
    }

    #[test]
    fn degenerate_inputs() {
        for text in ["", "   ", "\n\n", "Conclusion:", "...", "conclusion: ", "ääää", "!?"] {
            let j = parse_judgment(text);
            assert_eq!(j.verdict, Verdict::Uncertain, "{text:?}");
        }
    }

    #[test]
    fn corpus_agreement() {
        let corpus = [
            (
                "Step 3: the bottle is visible. Conclusion: no anomaly detected.",
                Verdict::Normal,
            ),
            (
                "The tube is missing from the rack. Conclusion: anomaly detected.",
                Verdict::Anomalous,
            ),
            (
                "The image is blurry; I cannot determine the state of the container.",
                Verdict::Uncertain,
            ),
        ];
        let report = parse_corpus(&corpus);
        assert_eq!((report.agreed, report.total), (3, 3));
        assert_eq!(report.agreement(), 1.0);

        let uncertain = [
            "The view is blocked, so it is unclear whether the vial is there.",
            "I am not sure what the rack contains.",
            "There is insufficient light to judge.",
            "I cannot tell if the lid is closed.",
            "The result is uncertain because of glare.",
        ];
        let corpus: Vec<(&str, Verdict)> = uncertain.iter().map(|t| (*t, Verdict::Uncertain)).collect();
        assert_eq!(parse_corpus(&corpus).agreed, 5);

        let conflict = [(
            "Conclusion: anomaly detected. Conclusion: no anomaly detected.",
            Verdict::Uncertain,
        )];
        assert_eq!(parse_corpus(&conflict).agreed, 1);
        let empty: [(&str, Verdict); 0] = [];
        assert_eq!(parse_corpus(&empty).agreement(), 0.0);
    }

    proptest! {
        #[test]
        fn total_and_deterministic(text in "\\PC{0,200}") {
            let a = parse_judgment(&text);
            let b = parse_judgment(&text);
            prop_assert!(a.conclusion_span.end <= text.len());
            prop_assert!(text.is_char_boundary(a.conclusion_span.start));
            prop_assert!(text.is_char_boundary(a.conclusion_span.end));
            prop_assert_eq!(a, b);
        }
    }
}
