//! Declarative experiment workflows.
//!
//! A [`Workflow`] couples a free-text experiment context with an ordered list
//! of meta-steps and the monitoring points bound to them. Points reference
//! steps by id so that reordering or editing steps never touches the points.
//!
//! Workflows are stored as a single JSON document:
//!
//! ```json
//! {
//!   "context": "...",
//!   "steps": [{"id": "s1", "name": "...", "operator": "...", "target_object": "...",
//!              "source_location": "...", "destination_location": "...", "actions": ["..."]}],
//!   "points": [{"id": "p1", "step_id": "s1", "phase": "pre",
//!               "detection": {"object": "...", "expected_state": "..."},
//!               "anomaly_label": {"normal": "...", "abnormal": "..."},
//!               "camera_hint": "..."}]
//! }
//! ```
//!
//! Unknown keys anywhere in the document are rejected.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("point `{point}` references unknown step `{step}`")]
    Reference { point: String, step: String },
    #[error("constraint error: {0}")]
    Constraint(String),
    #[error("monitoring point `{0}` not found")]
    PointNotFound(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExperimentContext {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaStep {
    pub id: String,
    pub name: String,
    pub operator: String,
    pub target_object: String,
    pub source_location: String,
    pub destination_location: String,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionTarget {
    pub object: String,
    pub expected_state: String,
}

impl DetectionTarget {
    /// `Check whether {object} is {expected_state}`, without trailing punctuation.
    pub fn statement(&self) -> String {
        format!("Check whether {} is {}", self.object, self.expected_state)
    }
}

/// Semantic description of what makes the observed state abnormal. The normal
/// side is optional and may be empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyLabelDescription {
    #[serde(rename = "normal", default)]
    pub normal_condition: String,
    #[serde(rename = "abnormal")]
    pub abnormal_condition: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "pre")]
    PreStep,
    #[default]
    #[serde(rename = "post")]
    PostStep,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PreStep => "pre",
            Phase::PostStep => "post",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitoringPoint {
    pub id: String,
    pub step_id: String,
    #[serde(default)]
    pub phase: Phase,
    #[serde(rename = "detection")]
    pub detection_target: DetectionTarget,
    pub anomaly_label: AnomalyLabelDescription,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workflow {
    pub context: ExperimentContext,
    pub steps: Vec<MetaStep>,
    pub points: Vec<MonitoringPoint>,
}

/// The invariant a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    EmptyContext,
    NoSteps,
    EmptyId,
    DuplicateId,
    EmptyActions,
    DanglingStepRef,
    EmptyDetectionField,
    EmptyAbnormalCondition,
}

impl Rule {
    pub fn describe(self) -> &'static str {
        match self {
            Rule::EmptyContext => "experiment context must not be empty",
            Rule::NoSteps => "workflow must contain at least one step",
            Rule::EmptyId => "id must not be empty",
            Rule::DuplicateId => "id must be unique across steps and points",
            Rule::EmptyActions => "step must list at least one action",
            Rule::DanglingStepRef => "point references a step that does not exist",
            Rule::EmptyDetectionField => "detection object and expected state must not be empty",
            Rule::EmptyAbnormalCondition => "abnormal condition must not be empty",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Offending step or point id; empty for workflow-level rules.
    pub subject: String,
    pub rule: Rule,
    pub detail: Option<String>,
}

impl Violation {
    fn new(subject: impl Into<String>, rule: Rule) -> Self {
        Self {
            subject: subject.into(),
            rule,
            detail: None,
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.subject.is_empty() {
            write!(f, "workflow: {}", self.rule.describe())?;
        } else {
            write!(f, "`{}`: {}", self.subject, self.rule.describe())?;
        }
        if let Some(detail) = &self.detail {
            write!(f, " ({detail})")?;
        }
        Ok(())
    }
}

/// Parses a workflow document without checking its invariants.
///
/// Malformed JSON is a [`WorkflowError::Syntax`]; well-formed JSON that does
/// not fit the schema (unknown or missing keys, wrong types) is a
/// [`WorkflowError::Constraint`].
pub fn parse_workflow(source: &str) -> Result<Workflow, WorkflowError> {
    let value: serde_json::Value = serde_json::from_str(source).map_err(|e| WorkflowError::Syntax(e.to_string()))?;
    serde_json::from_value(value).map_err(|e| WorkflowError::Constraint(e.to_string()))
}

/// Parses and validates a workflow document.
pub fn load_workflow(source: &str) -> Result<Workflow, WorkflowError> {
    let workflow = parse_workflow(source)?;
    let violations = validate_workflow(&workflow);
    if let Some(v) = violations.iter().find(|v| v.rule == Rule::DanglingStepRef) {
        let point = &workflow.points.iter().find(|p| p.id == v.subject);
        return Err(WorkflowError::Reference {
            point: v.subject.clone(),
            step: point.map(|p| p.step_id.clone()).unwrap_or_default(),
        });
    }
    if !violations.is_empty() {
        let listing: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(WorkflowError::Constraint(listing.join("; ")));
    }
    Ok(workflow)
}

/// Checks every workflow invariant, returning one entry per broken rule
/// instance in document order.
pub fn validate_workflow(w: &Workflow) -> Vec<Violation> {
    let mut violations = Vec::new();

    if w.context.text.trim().is_empty() {
        violations.push(Violation::new("", Rule::EmptyContext));
    }
    if w.steps.is_empty() {
        violations.push(Violation::new("", Rule::NoSteps));
    }

    let mut seen = HashSet::new();
    let mut check_id = |id: &str, kind: &str, violations: &mut Vec<Violation>| {
        if id.trim().is_empty() {
            violations.push(Violation::new(id, Rule::EmptyId).with_detail(kind.to_string()));
        } else if !seen.insert(id.to_string()) {
            violations.push(Violation::new(id, Rule::DuplicateId).with_detail(kind.to_string()));
        }
    };

    for step in &w.steps {
        check_id(&step.id, "step", &mut violations);
        if step.actions.is_empty() {
            violations.push(Violation::new(&step.id, Rule::EmptyActions));
        }
    }

    let step_ids: HashSet<&str> = w.steps.iter().map(|s| s.id.as_str()).collect();
    for point in &w.points {
        check_id(&point.id, "point", &mut violations);
        if !step_ids.contains(point.step_id.as_str()) {
            violations.push(
                Violation::new(&point.id, Rule::DanglingStepRef).with_detail(format!("step `{}`", point.step_id)),
            );
        }
        let target = &point.detection_target;
        if target.object.trim().is_empty() || target.expected_state.trim().is_empty() {
            violations.push(Violation::new(&point.id, Rule::EmptyDetectionField));
        }
        if point.anomaly_label.abnormal_condition.trim().is_empty() {
            violations.push(Violation::new(&point.id, Rule::EmptyAbnormalCondition));
        }
    }

    violations
}

/// A (step, phase) position in the workflow at which points are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CheckpointSlot {
    pub step_index: usize,
    pub phase: Phase,
}

impl Workflow {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("workflow serialization is infallible")
    }

    pub fn step(&self, id: &str) -> Option<&MetaStep> {
        self.steps.iter().find(|s| s.id == id)
    }

    pub fn point(&self, id: &str) -> Option<&MonitoringPoint> {
        self.points.iter().find(|p| p.id == id)
    }

    /// Returns the point and the step that owns it.
    pub fn resolve_point(&self, point_id: &str) -> Result<(&MetaStep, &MonitoringPoint), WorkflowError> {
        let point = self
            .point(point_id)
            .ok_or_else(|| WorkflowError::PointNotFound(point_id.to_string()))?;
        let step = self.step(&point.step_id).ok_or_else(|| WorkflowError::Reference {
            point: point.id.clone(),
            step: point.step_id.clone(),
        })?;
        Ok((step, point))
    }

    pub fn slot_of(&self, point: &MonitoringPoint) -> Option<CheckpointSlot> {
        let step_index = self.steps.iter().position(|s| s.id == point.step_id)?;
        Some(CheckpointSlot {
            step_index,
            phase: point.phase,
        })
    }

    /// Points in execution order: by step order, pre-step before post-step,
    /// then declaration order for points sharing a slot.
    pub fn checkpoints(&self) -> Vec<(CheckpointSlot, &MonitoringPoint)> {
        let mut ordered: Vec<(CheckpointSlot, usize, &MonitoringPoint)> = self
            .points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| self.slot_of(p).map(|slot| (slot, i, p)))
            .collect();
        ordered.sort_by_key(|(slot, i, _)| (*slot, *i));
        ordered.into_iter().map(|(slot, _, p)| (slot, p)).collect()
    }

    /// Groups point ids by checkpoint slot.
    pub fn slots(&self) -> HashMap<CheckpointSlot, Vec<&str>> {
        let mut slots: HashMap<CheckpointSlot, Vec<&str>> = HashMap::new();
        for (slot, p) in self.checkpoints() {
            slots.entry(slot).or_default().push(&p.id);
        }
        slots
    }
}
