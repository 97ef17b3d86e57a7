//! Hierarchical prompt assembly.
//!
//! Four cumulative levels decide which sections reach the model:
//!
//! | level | sections                                                    |
//! |-------|-------------------------------------------------------------|
//! | 1     | experiment context                                          |
//! | 2     | + stage description                                         |
//! | 3     | + detection content                                         |
//! | 4     | + anomaly label description                                 |
//!
//! Every level ends with the same reasoning instruction, so two levels differ
//! only by the sections they add.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::workflow::{AnomalyLabelDescription, DetectionTarget, MetaStep, Workflow, WorkflowError};

pub const REASONING_INSTRUCTION: &str = "Analyze the image step by step against the information above. \
End with one line: 'Conclusion: anomaly detected.' or 'Conclusion: no anomaly detected.' \
If you cannot decide, end with 'Conclusion: uncertain.'";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt level must be between 1 and 4, got {0}")]
    InvalidLevel(i64),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error("level {level} requires the {section} section but point `{point}` has no content for it")]
    MissingContent {
        level: PromptLevel,
        section: SectionKind,
        point: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct PromptLevel(u8);

impl PromptLevel {
    pub const ALL: [PromptLevel; 4] = [PromptLevel(1), PromptLevel(2), PromptLevel(3), PromptLevel(4)];

    pub fn new(value: u8) -> Result<Self, PromptError> {
        if (1..=4).contains(&value) {
            Ok(Self(value))
        } else {
            Err(PromptError::InvalidLevel(value.into()))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for PromptLevel {
    type Error = PromptError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<PromptLevel> for u8 {
    fn from(level: PromptLevel) -> u8 {
        level.0
    }
}

impl fmt::Display for PromptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for PromptLevel {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let value: i64 = s.trim().parse().map_err(|_| PromptError::InvalidLevel(-1))?;
        u8::try_from(value)
            .map_err(|_| PromptError::InvalidLevel(value))
            .and_then(Self::new)
    }
}

/// Section kinds in rendering order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SectionKind {
    ExperimentContext,
    StageDescription,
    DetectionContent,
    AnomalyLabelDescription,
}

impl SectionKind {
    pub const ORDERED: [SectionKind; 4] = [
        SectionKind::ExperimentContext,
        SectionKind::StageDescription,
        SectionKind::DetectionContent,
        SectionKind::AnomalyLabelDescription,
    ];

    pub fn heading(self) -> &'static str {
        match self {
            SectionKind::ExperimentContext => "Experiment Context",
            SectionKind::StageDescription => "Stage Description",
            SectionKind::DetectionContent => "Detection Content",
            SectionKind::AnomalyLabelDescription => "Anomaly Label Description",
        }
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.heading())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptSection {
    pub kind: SectionKind,
    pub heading: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptBundle {
    pub level: PromptLevel,
    pub sections: Vec<PromptSection>,
    pub instruction: String,
    pub rendered: String,
    /// Hex SHA-256 of `rendered`.
    pub content_hash: String,
}

impl PromptBundle {
    fn new(level: PromptLevel, sections: Vec<PromptSection>, instruction: &str) -> Self {
        let rendered = render(&sections, instruction);
        let content_hash = hex::encode(Sha256::digest(rendered.as_bytes()));
        Self {
            level,
            sections,
            instruction: instruction.to_string(),
            rendered,
            content_hash,
        }
    }

    pub fn section(&self, kind: SectionKind) -> Option<&PromptSection> {
        self.sections.iter().find(|s| s.kind == kind)
    }
}

fn render(sections: &[PromptSection], instruction: &str) -> String {
    let mut out = String::new();
    for section in sections {
        out.push_str(&section.heading);
        out.push_str(":\n");
        out.push_str(&section.body);
        out.push_str("\n\n");
    }
    out.push_str(instruction);
    out.push('\n');
    out
}

/// Section kinds included at `level`.
pub fn phi_select(level: PromptLevel) -> BTreeSet<SectionKind> {
    SectionKind::ORDERED[..level.get() as usize].iter().copied().collect()
}

/// One paragraph naming the operator, object, start and destination, and the
/// actions in order. Empty fields are left out.
pub fn render_stage_description(step: &MetaStep) -> String {
    let mut clauses = Vec::new();
    if !step.name.trim().is_empty() {
        clauses.push(format!("Current stage: {}.", step.name.trim()));
    }
    let fields = [
        ("Operator", &step.operator),
        ("Target object", &step.target_object),
        ("Start position", &step.source_location),
        ("Destination position", &step.destination_location),
    ];
    for (label, value) in fields {
        if !value.trim().is_empty() {
            clauses.push(format!("{label}: {}.", value.trim()));
        }
    }
    let actions: Vec<String> = step
        .actions
        .iter()
        .filter(|a| !a.trim().is_empty())
        .enumerate()
        .map(|(i, a)| format!("({}) {}", i + 1, a.trim()))
        .collect();
    if !actions.is_empty() {
        clauses.push(format!("Actions: {}.", actions.join("; ")));
    }
    clauses.join(" ")
}

pub fn render_detection_content(target: &DetectionTarget) -> String {
    format!("{}.", target.statement())
}

/// Abnormal clause first; the normal clause only when present.
pub fn render_anomaly_label(label: &AnomalyLabelDescription) -> String {
    let mut body = String::new();
    if !label.abnormal_condition.trim().is_empty() {
        body.push_str("Abnormal when: ");
        body.push_str(label.abnormal_condition.trim());
    }
    if !label.normal_condition.trim().is_empty() {
        if !body.is_empty() {
            body.push('\n');
        }
        body.push_str("Normal when: ");
        body.push_str(label.normal_condition.trim());
    }
    body
}

/// Builds the prompt for one monitoring point at one level.
pub fn assemble_prompt(w: &Workflow, point_id: &str, level: PromptLevel) -> Result<PromptBundle, PromptError> {
    let (step, point) = w.resolve_point(point_id)?;
    let mut sections = Vec::new();
    for kind in phi_select(level) {
        let body = match kind {
            SectionKind::ExperimentContext => w.context.text.trim().to_string(),
            SectionKind::StageDescription => render_stage_description(step),
            SectionKind::DetectionContent => {
                let t = &point.detection_target;
                if t.object.trim().is_empty() || t.expected_state.trim().is_empty() {
                    String::new()
                } else {
                    render_detection_content(t)
                }
            }
            SectionKind::AnomalyLabelDescription => {
                if point.anomaly_label.abnormal_condition.trim().is_empty() {
                    String::new()
                } else {
                    render_anomaly_label(&point.anomaly_label)
                }
            }
        };
        if body.is_empty() {
            return Err(PromptError::MissingContent {
                level,
                section: kind,
                point: point.id.clone(),
            });
        }
        sections.push(PromptSection {
            kind,
            heading: kind.heading().to_string(),
            body,
        });
    }
    Ok(PromptBundle::new(level, sections, REASONING_INSTRUCTION))
}
