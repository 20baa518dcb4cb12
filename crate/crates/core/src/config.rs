//! Engine and planner settings.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::automata::ViolationPolicy;
use crate::lang::FailureMode;

/// Constraint implementations that may run inside the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeKind {
    DomainRegex,
    GroundingExtractive,
}

/// Cost and reliability assumed for candidates the profile does not describe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostDefaults {
    pub deterministic: f64,
    pub mask: f64,
    pub model: f64,
    pub model_precision: f64,
    pub model_recall: f64,
    pub stream: f64,
    pub semantic_operator: f64,
    pub deterministic_operator: f64,
}

impl Default for CostDefaults {
    fn default() -> Self {
        CostDefaults {
            deterministic: 0.01,
            mask: 0.2,
            model: 1.0,
            model_precision: 0.9,
            model_recall: 0.9,
            stream: 2.0,
            semantic_operator: 1.0,
            deterministic_operator: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub default_retry: u32,
    pub default_failure_mode: FailureMode,
    /// Attach a relevance check to every generated attribute.
    pub default_relevance: bool,
    pub decode_allowlist: Vec<DecodeKind>,
    /// Check cost assumed when no statistics are known.
    pub default_cost: f64,
    /// Pass probability assumed when no statistics are known.
    pub default_selectivity: f64,
    pub input_cardinality: f64,
    /// Value of `CURRENT_DATE`; today (UTC) when unset.
    pub current_date: Option<NaiveDate>,
    /// Compare extractive outputs with whitespace runs collapsed.
    pub normalize_whitespace: bool,
    pub stream_policy: ViolationPolicy,
    /// Treat grounding on unannotated operators as abstractive.
    pub infer_annotations: bool,
    pub exemplar_capacity: usize,
    pub few_shot: usize,
    /// Tuples processed concurrently between exemplar cache merges.
    pub batch_size: usize,
    pub workers: Option<usize>,
    pub costs: CostDefaults,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            default_retry: 1,
            default_failure_mode: FailureMode::Continue,
            default_relevance: false,
            decode_allowlist: vec![DecodeKind::DomainRegex, DecodeKind::GroundingExtractive],
            default_cost: 1.0,
            default_selectivity: 0.9,
            input_cardinality: 100.0,
            current_date: None,
            normalize_whitespace: false,
            stream_policy: ViolationPolicy::Backtrack,
            infer_annotations: false,
            exemplar_capacity: 256,
            few_shot: 2,
            batch_size: 8,
            workers: None,
            costs: CostDefaults::default(),
        }
    }
}

impl EngineConfig {
    pub fn current_date(&self) -> NaiveDate {
        self.current_date
            .unwrap_or_else(|| chrono::Utc::now().date_naive())
    }

    pub fn retry_of(&self, c: &crate::lang::ConstraintDecl) -> u32 {
        c.retry.unwrap_or(self.default_retry)
    }

    pub fn mode_of(&self, c: &crate::lang::ConstraintDecl) -> FailureMode {
        c.on_fail.unwrap_or(self.default_failure_mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<EngineConfig>(r#"{"default_retry": 2}"#).is_ok());
        assert!(serde_json::from_str::<EngineConfig>(r#"{"retries": 2}"#).is_err());
    }

    #[test]
    fn allowlist_wire_names() {
        let c = EngineConfig::default();
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["decode_allowlist"], serde_json::json!(["domain-regex", "grounding-extractive"]));
        assert_eq!(v["default_failure_mode"], "CONTINUE");
    }
}
