//! Query execution.
//!
//! [`execute`] runs a physical plan over in-memory tables, enforcing every
//! constraint per tuple and writing the run's records as it goes.

mod cache;
mod exec;
mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde_json::{Map, Value as Json};

pub use cache::{Exemplar, ExemplarCache};
pub use io::{find_table, load_table, IoError, Table};

use crate::config::EngineConfig;
use crate::eval::EvalEnv;
use crate::lang::{format::format_logical, StageKind};
use crate::model::Model;
use crate::obs::{
    ConstraintInvocationRecord, LineageRecord, OperatorInvocationRecord, RunRecord, RunStatus,
    RunTotals, RunWriter,
};
use crate::physical::{format_physical, PhysicalPlan};
use crate::util::{now_utc, sha256_hex};
use crate::value::Value;

#[derive(Debug, Clone, PartialEq)]
pub struct Tuple {
    pub id: String,
    pub values: BTreeMap<String, Value>,
    /// Ids of CONTINUE constraints this tuple violated.
    pub flags: BTreeSet<String>,
    pub parents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Relation {
    pub columns: Vec<String>,
    pub tuples: Vec<Tuple>,
}

impl Relation {
    /// Result rows as JSON objects: bookkeeping fields first, then columns.
    pub fn rows(&self) -> Vec<Json> {
        self.tuples
            .iter()
            .map(|t| {
                let mut m = Map::new();
                m.insert("_tuple_id".into(), t.id.clone().into());
                m.insert("_flags".into(), t.flags.iter().cloned().collect::<Vec<_>>().into());
                m.insert("_parents".into(), t.parents.clone().into());
                for c in &self.columns {
                    m.insert(c.clone(), t.values.get(c).map_or(Json::Null, Value::to_json));
                }
                Json::Object(m)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("table `{0}` was not provided")]
    MissingTable(String),
    #[error("model call in {operator} failed: {message}")]
    Model { operator: String, message: String },
    #[error("check in {operator} failed: {message}")]
    Check { operator: String, message: String },
    #[error("cannot record run: {0}")]
    Record(String),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: u64,
    /// Directory for run records; `None` keeps them in memory.
    pub run_root: Option<PathBuf>,
    /// Query text stored with the run.
    pub query_text: String,
    /// Stochastic checks passing below this confidence count as violations.
    pub min_confidence: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExecOutcome {
    pub run_id: String,
    pub status: RunStatus,
    pub relation: Relation,
    pub record: RunRecord,
    pub operator_records: Vec<OperatorInvocationRecord>,
    pub constraint_records: Vec<ConstraintInvocationRecord>,
    pub lineage: Vec<LineageRecord>,
}

fn fingerprint(tables: &BTreeMap<String, Table>) -> String {
    let mut parts = Vec::new();
    for (name, t) in tables {
        parts.push(name.clone());
        for row in &t.rows {
            let r: Vec<String> = row.iter().map(|(k, v)| format!("{k}={}", v.to_json())).collect();
            parts.push(r.join(","));
        }
    }
    sha256_hex(&parts.join("\n"))
}

/// Content-derived id; repeated runs of the same input get a `-n` suffix.
pub fn run_id(query: &str, tables: &BTreeMap<String, Table>, seed: u64, config: &EngineConfig, root: Option<&std::path::Path>) -> String {
    let cfg = serde_json::to_string(config).unwrap_or_default();
    let digest = sha256_hex(&format!("{query}\n{}\n{seed}\n{cfg}", fingerprint(tables)));
    let base = digest[..12].to_string();
    let Some(root) = root else { return base };
    if !root.join(&base).exists() {
        return base;
    }
    (2..)
        .map(|n| format!("{base}-{n}"))
        .find(|id| !root.join(id).exists())
        .expect("unbounded suffixes")
}

fn record_err(e: std::io::Error) -> EngineError {
    EngineError::Record(e.to_string())
}

/// Runs `plan` over `tables`. Constraint failures and model errors end the
/// run with a non-completed status; only setup problems return `Err`.
pub fn execute(
    plan: &PhysicalPlan,
    tables: &BTreeMap<String, Table>,
    model: &dyn Model,
    config: &EngineConfig,
    opts: &RunOptions,
) -> Result<ExecOutcome, EngineError> {
    for s in &plan.logical.stages {
        if let StageKind::Scan { table } = &s.kind {
            if !tables.contains_key(table) {
                return Err(EngineError::MissingTable(table.clone()));
            }
        }
    }
    let id = run_id(&opts.query_text, tables, opts.seed, config, opts.run_root.as_deref());
    let writer = match &opts.run_root {
        Some(root) => RunWriter::create(root, &id).map_err(record_err)?,
        None => RunWriter::memory(&id),
    };
    let mut record = RunRecord {
        run_id: id.clone(),
        query: opts.query_text.clone(),
        logical_plan: format_logical(&plan.logical),
        physical_plan: format_physical(plan),
        status: RunStatus::Running,
        seed: opts.seed,
        started_at: now_utc(),
        finished_at: None,
        totals: RunTotals::default(),
        stages: Vec::new(),
        error: None,
    };
    writer.write_run(&record).map_err(record_err)?;

    let ctx = exec::Ctx {
        config,
        model,
        seed: opts.seed,
        min_confidence: opts.min_confidence,
        env: EvalEnv {
            current_date: config.current_date(),
        },
        choices: &plan.choices,
    };
    let mut state = exec::Exec {
        ctx,
        writer: &writer,
        cache: ExemplarCache::new(config.exemplar_capacity),
        next_id: 0,
        live: Vec::new(),
        tombstones: Vec::new(),
        cost: 0.0,
    };
    let state_ref = &mut state;
    let mut run = move || exec::run_stages(state_ref, &plan.logical, tables);
    let result = match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| EngineError::Record(e.to_string()))?
            .install(run),
        None => run(),
    };
    let (stages, stopped, error) = result?;
    let live = std::mem::take(&mut state.live);
    let cost = state.cost;

    let (status, relation) = match (&error, stopped) {
        (Some(e), _) => {
            record.error = Some(e.to_string());
            (RunStatus::Failed, exec::final_relation(&plan.logical, tables, Vec::new()))
        }
        (None, Some(_)) => (RunStatus::Aborted, exec::final_relation(&plan.logical, tables, Vec::new())),
        (None, None) => (RunStatus::Completed, exec::final_relation(&plan.logical, tables, live)),
    };
    writer.write_results(&relation.rows()).map_err(record_err)?;
    writer.flush().map_err(record_err)?;

    let operator_records = writer.operator_records();
    let constraint_records = writer.constraint_records();
    record.status = status;
    record.finished_at = Some(now_utc());
    record.totals = RunTotals {
        cost,
        tuples_in: stages.first().map_or(0, |s| s.tuples_in),
        tuples_out: relation.tuples.len() as u64,
        flagged: relation.tuples.iter().filter(|t| !t.flags.is_empty()).count() as u64,
        operator_invocations: operator_records.len() as u64,
        constraint_invocations: constraint_records.len() as u64,
    };
    record.stages = stages;
    writer.write_run(&record).map_err(record_err)?;
    Ok(ExecOutcome {
        run_id: id,
        status,
        relation,
        record,
        operator_records,
        constraint_records,
        lineage: writer.lineage_records(),
    })
}
