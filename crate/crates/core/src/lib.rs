//! Process anomaly detection for laboratory workflows with vision-language
//! models.
//!
//! The pipeline for one monitoring point is:
//!
//! 1. [`workflow`] describes the experiment, its ordered meta-steps and the
//!    monitoring points bound to them.
//! 2. [`prompt`] assembles a level-filtered prompt for a point.
//! 3. [`client`] sends the prompt together with a 640x480 image to a model.
//! 4. [`parser`] turns the model's step-by-step answer into a verdict.
//! 5. [`eval`] scores verdicts against ground truth across prompt levels.

pub mod client;
pub mod eval;
pub mod exec;
pub mod parser;
pub mod prompt;
pub mod workflow;

pub use client::{MockProvider, MockScript, Observation, ProviderConfig, RawResponse, VlmClient};
pub use eval::{compute_metrics, run_eval, EvalRecord, MetricMode, MetricsReport, Sample};
pub use parser::{parse_judgment, Judgment, Verdict};
pub use prompt::{assemble_prompt, PromptBundle, PromptLevel};
pub use workflow::{load_workflow, validate_workflow, Workflow};
