//! Scripted provider for offline runs.
//!
//! A script is a JSON document:
//!
//! ```json
//! {
//!   "rules": [
//!     {"point_id": "p02", "level": 4, "respond": "Conclusion: anomaly detected."},
//!     {"prompt_contains": "Detection Content", "respond": "Conclusion: no anomaly detected."},
//!     {"image": "broken.png", "error": "transient", "times": 2},
//!     {"image": "broken.png", "respond": "Conclusion: uncertain.", "latency_ms": 5}
//!   ],
//!   "default": "Conclusion: uncertain."
//! }
//! ```
//!
//! Rules are tried in order and the first whose every given key matches
//! wins. `times` retires a rule after that many matches. Without a `default`,
//! unmatched requests fail with [`ClientError::Unmatched`].

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ClientError, Provider, ProviderReply, VisionRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockFailure {
    Transient,
    Timeout,
    Network,
    Auth,
    Provider,
}

impl MockFailure {
    fn to_error(self) -> ClientError {
        match self {
            MockFailure::Transient => ClientError::Provider {
                status: Some(503),
                message: "mock: service unavailable".into(),
            },
            MockFailure::Timeout => ClientError::Timeout,
            MockFailure::Network => ClientError::Network("mock: connection reset".into()),
            MockFailure::Auth => ClientError::Auth("mock: invalid credential".into()),
            MockFailure::Provider => ClientError::Provider {
                status: Some(400),
                message: "mock: bad request".into(),
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u8>,
    /// Substring of the rendered prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    /// File name of the observation image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respond: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<MockFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<usize>,
    /// Simulated service time; reported as the response latency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

impl MockRule {
    pub fn respond(text: impl Into<String>) -> Self {
        Self {
            respond: Some(text.into()),
            ..Default::default()
        }
    }

    pub fn fail(failure: MockFailure) -> Self {
        Self {
            error: Some(failure),
            ..Default::default()
        }
    }

    pub fn for_point(mut self, point_id: impl Into<String>) -> Self {
        self.point_id = Some(point_id.into());
        self
    }

    pub fn at_level(mut self, level: u8) -> Self {
        self.level = Some(level);
        self
    }

    pub fn when_prompt_contains(mut self, needle: impl Into<String>) -> Self {
        self.prompt_contains = Some(needle.into());
        self
    }

    pub fn for_image(mut self, name: impl Into<String>) -> Self {
        self.image = Some(name.into());
        self
    }

    pub fn times(mut self, n: usize) -> Self {
        self.times = Some(n);
        self
    }

    pub fn with_latency_ms(mut self, ms: u64) -> Self {
        self.latency_ms = Some(ms);
        self
    }

    fn matches(&self, req: &VisionRequest<'_>) -> bool {
        self.point_id.as_deref().is_none_or(|p| p == req.point_id)
            && self.level.is_none_or(|l| l == req.level.get())
            && self.prompt_contains.as_deref().is_none_or(|s| req.prompt.contains(s))
            && self.image.as_deref().is_none_or(|i| req.image_name == Some(i))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
}

impl MockScript {
    pub fn with_default(text: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default: Some(text.into()),
        }
    }

    pub fn rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn from_json(source: &str) -> Result<Self, ClientError> {
        let script: Self =
            serde_json::from_str(source).map_err(|e| ClientError::Config(format!("mock script: {e}")))?;
        for (i, rule) in script.rules.iter().enumerate() {
            if rule.respond.is_some() == rule.error.is_some() {
                return Err(ClientError::Config(format!(
                    "mock script rule {i} needs exactly one of `respond` or `error`"
                )));
            }
        }
        Ok(script)
    }

    pub fn from_path(path: &Path) -> Result<Self, ClientError> {
        let source = std::fs::read_to_string(path).map_err(|source| ClientError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&source)
    }
}

/// Deterministic provider answering from a [`MockScript`]; never touches the
/// network. Counts every call it receives.
#[derive(Debug)]
pub struct MockProvider {
    script: MockScript,
    hits: Vec<AtomicUsize>,
    calls: AtomicUsize,
}

impl MockProvider {
    pub const MODEL_ID: &'static str = "mock";

    pub fn new(script: MockScript) -> Self {
        let hits = script.rules.iter().map(|_| AtomicUsize::new(0)).collect();
        Self {
            script,
            hits,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn take_rule(&self, req: &VisionRequest<'_>) -> Option<&MockRule> {
        for (rule, hits) in self.script.rules.iter().zip(&self.hits) {
            if !rule.matches(req) {
                continue;
            }
            match rule.times {
                None => return Some(rule),
                Some(limit) => {
                    let claimed = hits
                        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < limit).then_some(n + 1))
                        .is_ok();
                    if claimed {
                        return Some(rule);
                    }
                }
            }
        }
        None
    }
}

impl Provider for MockProvider {
    fn complete(&self, req: &VisionRequest<'_>) -> Result<ProviderReply, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let reply = |text: &str, latency_ms: u64| ProviderReply {
            text: text.to_string(),
            model_id: Self::MODEL_ID.to_string(),
            latency_s: Some(latency_ms as f64 / 1000.0),
        };
        match self.take_rule(req) {
            Some(rule) => {
                let latency_ms = rule.latency_ms.unwrap_or(0);
                if latency_ms > 0 {
                    std::thread::sleep(Duration::from_millis(latency_ms));
                }
                match (&rule.respond, rule.error) {
                    (_, Some(failure)) => Err(failure.to_error()),
                    (Some(text), None) => Ok(reply(text, latency_ms)),
                    (None, None) => Err(ClientError::Config("mock rule has no outcome".into())),
                }
            }
            None => match &self.script.default {
                Some(text) => Ok(reply(text, 0)),
                None => Err(ClientError::Unmatched {
                    point_id: req.point_id.to_string(),
                    level: req.level.get(),
                }),
            },
        }
    }
}
