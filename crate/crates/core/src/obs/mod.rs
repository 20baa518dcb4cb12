//! Run, operator-invocation, constraint-invocation and lineage records,
//! their storage under a run directory, and metrics computed from them.
//!
//! A run directory holds `run.json`, `op_invocations.jsonl`,
//! `constraint_invocations.jsonl`, `lineage.jsonl` and `results.jsonl`.
//! Human labels are kept in a separate `labels.jsonl` overlay so the
//! invocation file stays append-only.

mod metrics;
mod store;
mod writer;

pub use metrics::{
    operator_reliability, precision_recall, run_metrics, selectivity, ConstraintMetrics,
    MetricsError, OperatorMetrics, PrecisionRecall, RunMetrics,
};
pub use store::{LabelError, LabelTask, LineageNode, RunStore, StoreError};
pub use writer::RunWriter;

use serde::{Deserialize, Serialize};

use crate::check::Verdict;
use crate::lang::ClassKind;
use crate::physical::ImplMode;

/// Longest text kept in a snapshot, in bytes.
pub const SNAPSHOT_LIMIT: usize = 4096;

/// Possibly truncated text with the hash of the full value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub text: String,
    pub sha256: String,
    pub truncated: bool,
}

impl Snapshot {
    pub fn of(text: &str) -> Self {
        let mut end = text.len().min(SNAPSHOT_LIMIT);
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        Snapshot {
            text: text[..end].to_string(),
            sha256: crate::util::sha256_hex(text),
            truncated: end < text.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplTag {
    pub deterministic: bool,
    pub mode: ImplMode,
    pub mechanism: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintInvocationRecord {
    /// `<run_id>:ci<seq>`.
    pub invocation_id: String,
    pub seq: u64,
    pub run_id: String,
    pub constraint_id: String,
    pub class: ClassKind,
    /// Human-readable statement of the constraint.
    pub description: String,
    pub operator: String,
    /// Input tuple of the checked operator.
    pub tuple_id: String,
    pub attempt: u32,
    /// The checked value.
    pub input: Snapshot,
    /// Text the value was derived from, when the check reads it.
    pub source: Option<Snapshot>,
    pub predicted_label: Verdict,
    pub confidence: Option<f64>,
    /// Whether the constraint truly holds, once labeled.
    pub true_label: Option<bool>,
    pub implementation: ImplTag,
    pub feedback: Option<String>,
    pub cost: f64,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorInvocationRecord {
    /// `<run_id>:op<seq>`.
    pub invocation_id: String,
    pub seq: u64,
    pub run_id: String,
    pub operator: String,
    pub tuple_id: String,
    pub attempt: u32,
    pub prompt: Snapshot,
    pub output: Snapshot,
    pub masked: bool,
    pub cost: f64,
    pub error: Option<String>,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub child: String,
    pub parent: String,
    pub operator: String,
    /// Flags the child carried when it was created.
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Aborted,
    Failed,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        self != RunStatus::Running
    }
}

/// Tuple movement through one operator.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub operator: String,
    #[serde(rename = "in")]
    pub tuples_in: u64,
    #[serde(rename = "out")]
    pub tuples_out: u64,
    /// Removed by a filter predicate.
    pub filtered: u64,
    /// Dropped under IGNORE, including dependent aggregate outputs.
    pub ignored: u64,
    /// Discarded when the run aborted.
    pub aborted: u64,
    /// Tuples a stage created from its inputs.
    pub emitted: u64,
}

impl StageCounts {
    pub fn conserved(&self) -> bool {
        self.tuples_in == self.tuples_out + self.filtered + self.ignored + self.aborted
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub cost: f64,
    pub tuples_in: u64,
    pub tuples_out: u64,
    pub flagged: u64,
    pub operator_invocations: u64,
    pub constraint_invocations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub query: String,
    pub logical_plan: String,
    pub physical_plan: String,
    pub status: RunStatus,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub totals: RunTotals,
    pub stages: Vec<StageCounts>,
    pub error: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_truncates_on_char_boundary() {
        let long = "é".repeat(3000);
        let s = Snapshot::of(&long);
        assert!(s.truncated);
        assert_eq!(s.text.len(), SNAPSHOT_LIMIT);
        assert_eq!(s.sha256, crate::util::sha256_hex(&long));
        let short = Snapshot::of("abc");
        assert!(!short.truncated && short.text == "abc");
    }

    #[test]
    fn stage_counts_wire_names() {
        let c = StageCounts {
            operator: "f".into(),
            tuples_in: 3,
            tuples_out: 1,
            filtered: 2,
            ..Default::default()
        };
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["in"], 3);
        assert_eq!(v["out"], 1);
        assert!(c.conserved());
    }
}
