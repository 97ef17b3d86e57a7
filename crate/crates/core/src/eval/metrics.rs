use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EvalRecord, GroundTruth, Outcome};
use crate::prompt::PromptLevel;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no records")]
    Empty,
    #[error("records span several prompt levels ({0:?}); compute one level at a time")]
    MixedLevels(Vec<u8>),
}

/// Denominator used for FPR and MDR.
///
/// `PopulationRelative` divides every metric by the total number of records,
/// so the four rates sum to 100. `ClassConditional` divides FPR by the number
/// of ground-truth normal samples and MDR by the number of abnormal ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    PopulationRelative,
    ClassConditional,
}

impl MetricMode {
    pub fn label(self) -> &'static str {
        match self {
            MetricMode::PopulationRelative => "population-relative",
            MetricMode::ClassConditional => "class-conditional",
        }
    }
}

impl fmt::Display for MetricMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub correct: usize,
    pub false_positive: usize,
    pub missed_detection: usize,
    pub uncertain: usize,
}

impl OutcomeCounts {
    pub fn add(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::Correct => self.correct += 1,
            Outcome::FalsePositive => self.false_positive += 1,
            Outcome::MissedDetection => self.missed_detection += 1,
            Outcome::Uncertain => self.uncertain += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.correct + self.false_positive + self.missed_detection + self.uncertain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: PromptLevel,
    pub mode: MetricMode,
    pub total: usize,
    pub counts: OutcomeCounts,
    pub normal_total: usize,
    pub abnormal_total: usize,
    pub acc: f64,
    pub fpr: f64,
    pub mdr: f64,
    pub ur: f64,
    /// Set when a class-conditional denominator was zero and the rate was
    /// reported as 0.
    pub zero_denominator: bool,
}

fn percent(count: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        count as f64 * 100.0 / denominator as f64
    }
}

/// ACC, FPR, MDR and UR for records of a single prompt level.
pub fn compute_metrics(records: &[EvalRecord], mode: MetricMode) -> Result<MetricsReport, MetricsError> {
    let first = records.first().ok_or(MetricsError::Empty)?;
    let mut levels: Vec<u8> = records.iter().map(|r| r.level.get()).collect();
    levels.sort_unstable();
    levels.dedup();
    if levels.len() > 1 {
        return Err(MetricsError::MixedLevels(levels));
    }

    let mut counts = OutcomeCounts::default();
    let (mut normal_total, mut abnormal_total) = (0, 0);
    for r in records {
        counts.add(r.outcome);
        match r.label {
            GroundTruth::Normal => normal_total += 1,
            GroundTruth::Abnormal => abnormal_total += 1,
        }
    }
    let total = records.len();
    let (fpr_den, mdr_den) = match mode {
        MetricMode::PopulationRelative => (total, total),
        MetricMode::ClassConditional => (normal_total, abnormal_total),
    };
    let zero_denominator = fpr_den == 0 || mdr_den == 0;
    if zero_denominator {
        log::warn!(
            "level {}: empty ground-truth class, {mode} rate reported as 0",
            first.level
        );
    }

    Ok(MetricsReport {
        level: first.level,
        mode,
        total,
        counts,
        normal_total,
        abnormal_total,
        acc: percent(counts.correct, total),
        fpr: percent(counts.false_positive, fpr_den),
        mdr: percent(counts.missed_detection, mdr_den),
        ur: percent(counts.uncertain, total),
        zero_denominator,
    })
}

/// One report per level present in `records`, sorted by level.
pub fn compute_by_level(records: &[EvalRecord], mode: MetricMode) -> Result<Vec<MetricsReport>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut grouped: BTreeMap<PromptLevel, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.level).or_default().push(r.clone());
    }
    grouped.values().map(|group| compute_metrics(group, mode)).collect()
}
