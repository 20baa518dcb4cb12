//! Metrics computed from stored records only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ConstraintInvocationRecord, ImplTag, OperatorInvocationRecord, RunRecord, RunStatus};
use crate::check::Verdict;
use crate::lang::ClassKind;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no data for constraint {0}")]
    NoData(String),
}

/// Fraction of first attempts that passed.
pub fn selectivity(records: &[ConstraintInvocationRecord], constraint: &str) -> Result<f64, MetricsError> {
    let first: Vec<_> = records
        .iter()
        .filter(|r| r.constraint_id == constraint && r.attempt == 0)
        .collect();
    if first.is_empty() {
        return Err(MetricsError::NoData(constraint.to_string()));
    }
    let pass = first.iter().filter(|r| r.predicted_label == Verdict::Pass).count();
    Ok(pass as f64 / first.len() as f64)
}

/// Detector quality with violation as the positive class. Undefined
/// ratios are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub n_labeled: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

pub fn precision_recall(
    records: &[ConstraintInvocationRecord],
    constraint: &str,
) -> Result<PrecisionRecall, MetricsError> {
    let (mut tp, mut fp, mut fnn, mut tn) = (0, 0, 0, 0);
    for r in records.iter().filter(|r| r.constraint_id == constraint) {
        let Some(holds) = r.true_label else { continue };
        match (r.predicted_label == Verdict::Violation, !holds) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => tn += 1,
        }
    }
    let n = tp + fp + fnn + tn;
    if n == 0 {
        return Err(MetricsError::NoData(constraint.to_string()));
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(PrecisionRecall {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fnn),
        n_labeled: n,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fnn,
        true_negatives: tn,
    })
}

/// Fraction of an operator's tuples whose final attempt passed every check.
pub fn operator_reliability(records: &[ConstraintInvocationRecord], operator: &str) -> Option<f64> {
    let mut last: BTreeMap<&str, (u32, bool)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.operator == operator) {
        let ok = r.predicted_label == Verdict::Pass;
        let e = last.entry(&r.tuple_id).or_insert((r.attempt, true));
        if r.attempt > e.0 {
            *e = (r.attempt, ok);
        } else if r.attempt == e.0 {
            e.1 &= ok;
        }
    }
    if last.is_empty() {
        return None;
    }
    Some(last.values().filter(|(_, ok)| *ok).count() as f64 / last.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorMetrics {
    pub operator: String,
    pub invocations: u64,
    pub cost: f64,
    pub reliability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintMetrics {
    pub constraint_id: String,
    pub class: ClassKind,
    pub description: String,
    pub operator: String,
    pub implementation: ImplTag,
    pub invocations: u64,
    pub violations: u64,
    pub cost: f64,
    pub selectivity: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub n_labeled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub status: RunStatus,
    pub cost: f64,
    pub tuples_in: u64,
    pub tuples_out: u64,
    pub flagged: u64,
    pub operators: Vec<OperatorMetrics>,
    pub constraints: Vec<ConstraintMetrics>,
}

pub fn run_metrics(
    run: &RunRecord,
    ops: &[OperatorInvocationRecord],
    constraints: &[ConstraintInvocationRecord],
) -> RunMetrics {
    let mut operators: Vec<OperatorMetrics> = Vec::new();
    for o in ops {
        match operators.iter_mut().find(|m| m.operator == o.operator) {
            Some(m) => {
                m.invocations += 1;
                m.cost += o.cost;
            }
            None => operators.push(OperatorMetrics {
                operator: o.operator.clone(),
                invocations: 1,
                cost: o.cost,
                reliability: None,
            }),
        }
    }
    let mut per: Vec<ConstraintMetrics> = Vec::new();
    for r in constraints {
        let violated = (r.predicted_label == Verdict::Violation) as u64;
        match per.iter_mut().find(|m| m.constraint_id == r.constraint_id) {
            Some(m) => {
                m.invocations += 1;
                m.violations += violated;
                m.cost += r.cost;
            }
            None => per.push(ConstraintMetrics {
                constraint_id: r.constraint_id.clone(),
                class: r.class,
                description: r.description.clone(),
                operator: r.operator.clone(),
                implementation: r.implementation.clone(),
                invocations: 1,
                violations: violated,
                cost: r.cost,
                selectivity: None,
                precision: None,
                recall: None,
                n_labeled: 0,
            }),
        }
        if !operators.iter().any(|m| m.operator == r.operator) {
            operators.push(OperatorMetrics {
                operator: r.operator.clone(),
                invocations: 0,
                cost: 0.0,
                reliability: None,
            });
        }
    }
    for m in &mut per {
        m.selectivity = selectivity(constraints, &m.constraint_id).ok();
        if let Ok(pr) = precision_recall(constraints, &m.constraint_id) {
            m.precision = pr.precision;
            m.recall = pr.recall;
            m.n_labeled = pr.n_labeled;
        }
    }
    for o in &mut operators {
        o.reliability = operator_reliability(constraints, &o.operator);
    }
    RunMetrics {
        run_id: run.run_id.clone(),
        status: run.status,
        cost: run.totals.cost,
        tuples_in: run.totals.tuples_in,
        tuples_out: run.totals.tuples_out,
        flagged: run.totals.flagged,
        operators,
        constraints: per,
    }
}
