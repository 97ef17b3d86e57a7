//! Benchmark evaluation: manifests, per-level judgment runs, outcome
//! classification and metric reports.
//!
//! Manifests are JSON lines, one sample per line:
//!
//! ```text
//! {"sample_id": "n001", "image": "img/n001.jpg", "point_id": "p01", "label": "normal", "device": "mobile arm", "viewpoint": "front"}
//! ```
//!
//! Relative image paths resolve against the manifest's directory. Results are
//! written as JSON lines of [`EvalRecord`].

mod metrics;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, Observation, VlmClient};
use crate::exec::map_ordered;
use crate::parser::{parse_judgment, Verdict};
use crate::prompt::{assemble_prompt, PromptBundle, PromptError, PromptLevel};
use crate::workflow::{validate_workflow, Workflow};

pub use self::metrics::{compute_by_level, compute_metrics, MetricMode, MetricsError, MetricsReport, OutcomeCounts};
pub use self::report::{parse_table_rows, write_report, ReportFormat};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: duplicate sample id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: unknown label `{token}` (expected `normal` or `abnormal`)")]
    UnknownLabel { line: usize, token: String },
}

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("no records")]
    Empty,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("workflow is invalid: {0}")]
    InvalidWorkflow(String),
    #[error("sample `{sample}` references unknown monitoring point `{point}`")]
    UnknownPoint { sample: String, point: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("sample `{sample}`: {source}")]
    Image {
        sample: String,
        #[source]
        source: ClientError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundTruth {
    Normal,
    Abnormal,
}

impl GroundTruth {
    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "normal" => Some(Self::Normal),
            "abnormal" => Some(Self::Abnormal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub sample_id: String,
    pub image_ref: PathBuf,
    pub point_id: String,
    pub ground_truth: GroundTruth,
    pub device: Option<String>,
    pub viewpoint: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    sample_id: String,
    image: PathBuf,
    point_id: String,
    label: String,
    #[serde(default)]
    device: Option<String>,
    #[serde(default)]
    viewpoint: Option<String>,
}

/// Parses a JSON-lines manifest. Blank lines are skipped; relative image
/// paths are joined onto `base_dir` when given.
pub fn load_manifest(source: &str, base_dir: Option<&Path>) -> Result<Vec<Sample>, ManifestError> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in source.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(raw).map_err(|e| ManifestError::Syntax {
            line,
            message: e.to_string(),
        })?;
        let ground_truth = GroundTruth::parse(&entry.label).ok_or_else(|| ManifestError::UnknownLabel {
            line,
            token: entry.label.clone(),
        })?;
        if !seen.insert(entry.sample_id.clone()) {
            return Err(ManifestError::DuplicateId {
                line,
                id: entry.sample_id,
            });
        }
        let image_ref = match base_dir {
            Some(base) if entry.image.is_relative() => base.join(&entry.image),
            _ => entry.image,
        };
        samples.push(Sample {
            sample_id: entry.sample_id,
            image_ref,
            point_id: entry.point_id,
            ground_truth,
            device: entry.device,
            viewpoint: entry.viewpoint,
        });
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    FalsePositive,
    MissedDetection,
    Uncertain,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Correct => "correct",
            Outcome::FalsePositive => "false_positive",
            Outcome::MissedDetection => "missed_detection",
            Outcome::Uncertain => "uncertain",
        })
    }
}

pub fn classify_outcome(ground_truth: GroundTruth, verdict: Verdict) -> Outcome {
    match (ground_truth, verdict) {
        (_, Verdict::Uncertain) => Outcome::Uncertain,
        (GroundTruth::Normal, Verdict::Anomalous) => Outcome::FalsePositive,
        (GroundTruth::Abnormal, Verdict::Normal) => Outcome::MissedDetection,
        _ => Outcome::Correct,
    }
}

/// One judged (sample, level) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub sample_id: String,
    pub level: PromptLevel,
    pub label: GroundTruth,
    pub verdict: Verdict,
    pub outcome: Outcome,
    pub request_hash: String,
    pub latency_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    /// Builds a record, deriving the outcome from label and verdict.
    pub fn new(
        sample_id: String,
        level: PromptLevel,
        label: GroundTruth,
        verdict: Verdict,
        request_hash: String,
        latency_s: f64,
        error: Option<String>,
    ) -> Self {
        Self {
            sample_id,
            level,
            outcome: classify_outcome(label, verdict),
            label,
            verdict,
            request_hash,
            latency_s,
            error,
        }
    }
}

pub fn write_results(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_results(source: &str) -> Result<Vec<EvalRecord>, ResultsError> {
    let mut records = Vec::new();
    for (i, raw) in source.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let record: EvalRecord = serde_json::from_str(raw).map_err(|e| ResultsError::Syntax {
            line: i + 1,
            message: e.to_string(),
        })?;
        if record.outcome != classify_outcome(record.label, record.verdict) {
            return Err(ResultsError::Syntax {
                line: i + 1,
                message: format!("outcome `{}` contradicts label and verdict", record.outcome),
            });
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(ResultsError::Empty);
    }
    Ok(records)
}

/// Judges every sample at every requested level.
///
/// Provider failures become `Uncertain` records carrying an `error` note;
/// only configuration problems (invalid workflow, unknown points, missing
/// prompt content, unreadable images) abort the run. The result is sorted by
/// `(level, sample_id)` whatever the completion order.
pub fn run_eval(
    w: &Workflow,
    samples: &[Sample],
    levels: &[PromptLevel],
    client: &VlmClient,
    parallelism: usize,
) -> Result<Vec<EvalRecord>, EvalError> {
    let violations = validate_workflow(w);
    if !violations.is_empty() {
        let listing: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(EvalError::InvalidWorkflow(listing.join("; ")));
    }
    for s in samples {
        if w.point(&s.point_id).is_none() {
            return Err(EvalError::UnknownPoint {
                sample: s.sample_id.clone(),
                point: s.point_id.clone(),
            });
        }
    }
    let levels: BTreeSet<PromptLevel> = levels.iter().copied().collect();

    let mut prompts: BTreeMap<(&str, PromptLevel), PromptBundle> = BTreeMap::new();
    for s in samples {
        for &level in &levels {
            if !prompts.contains_key(&(s.point_id.as_str(), level)) {
                prompts.insert((&s.point_id, level), assemble_prompt(w, &s.point_id, level)?);
            }
        }
    }

    let unique_images: Vec<&Path> = samples
        .iter()
        .map(|s| s.image_ref.as_path())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let decoded = map_ordered(&unique_images, parallelism, |path| Observation::from_path(path, ""));
    let mut images = BTreeMap::new();
    for (path, result) in unique_images.iter().zip(decoded) {
        match result {
            Ok(obs) => {
                images.insert(*path, obs);
            }
            Err(source) => {
                let sample = samples
                    .iter()
                    .find(|s| s.image_ref == *path)
                    .expect("image came from a sample");
                return Err(EvalError::Image {
                    sample: sample.sample_id.clone(),
                    source,
                });
            }
        }
    }

    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let jobs: Vec<(PromptLevel, &Sample)> = levels
        .iter()
        .flat_map(|&level| ordered.iter().map(move |s| (level, *s)))
        .collect();

    let mut records = map_ordered(&jobs, parallelism, |(level, sample)| {
        let bundle = &prompts[&(sample.point_id.as_str(), *level)];
        let mut obs = images[sample.image_ref.as_path()].for_point(&sample.point_id);
        obs.device.clone_from(&sample.device);
        obs.viewpoint.clone_from(&sample.viewpoint);
        let (verdict, request_hash, latency_s, error) = match client.judge(bundle, &obs) {
            Ok(resp) => (
                parse_judgment(&resp.text).verdict,
                resp.request_hash,
                resp.latency_s,
                None,
            ),
            Err(e) => {
                log::warn!("sample {} level {level}: {e}", sample.sample_id);
                (
                    Verdict::Uncertain,
                    client.request_hash(bundle, &obs),
                    0.0,
                    Some(e.to_string()),
                )
            }
        };
        EvalRecord::new(
            sample.sample_id.clone(),
            *level,
            sample.ground_truth,
            verdict,
            request_hash,
            latency_s,
            error,
        )
    });
    records.sort_by(|a, b| (a.level, &a.sample_id).cmp(&(b.level, &b.sample_id)));
    Ok(records)
}
