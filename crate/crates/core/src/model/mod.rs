//! Model clients: completion, judging and token-masked decoding.

mod cot;
mod fake;
mod http;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::automata::Automaton;
use crate::lang::DataType;

pub use cot::{Cot, CotError};
pub use fake::{CopySpec, FakeModel, FakeScript, JudgeRule, ResponseSpec, Rule, TokenizerKind};
pub use http::{HttpConfig, HttpModel};

/// Shape the caller expects the output in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contract {
    Text,
    Typed(DataType),
    Bool,
    /// Boolean preceded by a `PREMISES` / `STEPS` block.
    BoolCot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    /// Key of the operator issuing the request.
    pub operator: String,
    pub prompt: String,
    pub contract: Contract,
    /// Rendered placeholder values, by attribute name.
    pub inputs: BTreeMap<String, String>,
    pub attempt: u32,
    pub seed: u64,
}

impl ModelRequest {
    pub fn new(operator: &str, prompt: impl Into<String>) -> Self {
        ModelRequest {
            operator: operator.to_string(),
            prompt: prompt.into(),
            contract: Contract::Text,
            inputs: BTreeMap::new(),
            attempt: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelResponse {
    pub text: String,
    pub cot: Option<Cot>,
    pub confidence: Option<f64>,
    /// Tokens in emission order; their concatenation is `text`.
    pub tokens: Vec<String>,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    /// Is `output` supported by `input`?
    FactCheck,
    /// Does `output` do what `task` asks of `input`?
    Relevance,
    /// Do the reasoning steps in `output` follow?
    SoundnessSteps,
    /// Does `output` match the description in `task`?
    SemanticMatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeRequest {
    pub mode: JudgeMode,
    pub task: String,
    pub input: String,
    pub output: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Judgement {
    pub holds: bool,
    /// Confidence in `holds`, when the client can produce one.
    pub confidence: Option<f64>,
    pub rationale: String,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("no rule matches prompt `{0}`")]
    NoRule(String),
    #[error("no judge rule matches the request")]
    NoJudgeRule,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {0}: {1}")]
    Status(u16, String),
    #[error("unsupported capability: {0}")]
    Unsupported(String),
    #[error("malformed model response: {0}")]
    Malformed(String),
}

impl ModelError {
    /// Whether retrying the same request may succeed.
    pub fn is_transport(&self) -> bool {
        matches!(self, ModelError::Transport(_))
            || matches!(self, ModelError::Status(code, _) if *code >= 500 || *code == 429)
    }
}

pub trait Model: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, ModelError>;

    /// Decodes with every emitted token restricted to keep the output inside
    /// `mask`.
    fn complete_constrained(
        &self,
        request: &ModelRequest,
        mask: &dyn Automaton,
    ) -> Result<ModelResponse, ModelError> {
        let _ = (request, mask);
        Err(ModelError::Unsupported(format!(
            "{} cannot mask tokens during decoding",
            self.name()
        )))
    }

    fn judge(&self, request: &JudgeRequest) -> Result<Judgement, ModelError>;

    /// Whether judgements carry a confidence.
    fn confidence_capable(&self) -> bool {
        false
    }

    /// Whether `complete_constrained` is available.
    fn token_level(&self) -> bool {
        false
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parses `text` under `contract`, filling `cot` for reasoning contracts.
pub fn parse_contract(text: &str, contract: Contract) -> Result<(Option<Cot>, Option<bool>), String> {
    match contract {
        Contract::BoolCot => {
            let cot = Cot::parse(text).map_err(|e| e.to_string())?;
            let answer = cot.answer;
            Ok((Some(cot), Some(answer)))
        }
        Contract::Bool => match crate::value::parse_bool(text) {
            Some(b) => Ok((None, Some(b))),
            None => match Cot::parse(text) {
                Ok(cot) => {
                    let answer = cot.answer;
                    Ok((Some(cot), Some(answer)))
                }
                Err(_) => Err(format!("`{}` is not true or false", text.trim())),
            },
        },
        Contract::Text | Contract::Typed(_) => Ok((None, None)),
    }
}
