use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use sicql::engine::{execute, find_table, load_table, ExecOutcome, RunOptions, Table};
use sicql::lang::format::format_logical;
use sicql::lang::{parse_query, LogicalPlan, Origin, StageKind};
use sicql::logical::optimize;
use sicql::model::Model;
use sicql::obs::RunStatus;
use sicql::physical::{format_physical, select_plan, Capabilities, PhysicalPlan, Profile};
use sicql::store::{Conflict, ConstraintStore};

use crate::config::Config;

/// Parses and plans a query under the configured profile.
pub fn plan(query: &str, config: &Config, profile: &Profile, model: &dyn Model) -> anyhow::Result<PhysicalPlan> {
    let parsed = parse_query(query).map_err(|e| anyhow::anyhow!("parse error at {e}"))?;
    let engine = &config.engine;
    let stats = |c: &_| profile.stats(engine, c);
    let logical = optimize(&parsed, engine, &stats)?;
    let profile = profile.clone().with_defaults_for(&logical, engine);
    let caps = Capabilities::of(Some(model), engine);
    Ok(select_plan(&logical, &profile, &caps, engine)?)
}

pub fn load_tables(plan: &LogicalPlan, data: &Path) -> anyhow::Result<BTreeMap<String, Table>> {
    let mut tables = BTreeMap::new();
    for s in &plan.stages {
        if let StageKind::Scan { table } = &s.kind {
            let path = find_table(data, table)?;
            tables.insert(table.clone(), load_table(&path)?);
        }
    }
    Ok(tables)
}

pub fn run(query_path: &Path, data: &Path, config: &Config) -> anyhow::Result<ExecOutcome> {
    let query = std::fs::read_to_string(query_path).with_context(|| format!("reading {}", query_path.display()))?;
    let model = config.model.build()?;
    let profile = config.profile()?;
    let plan = plan(&query, config, &profile, model.as_ref())?;
    let tables = load_tables(&plan.logical, data)?;
    let opts = RunOptions {
        seed: config.seed,
        run_root: Some(config.run_dir.clone()),
        query_text: query,
        min_confidence: profile.thresholds.min_confidence,
    };
    Ok(execute(&plan, &tables, model.as_ref(), &config.engine, &opts)?)
}

/// 0 completed, 2 aborted, 1 otherwise.
pub fn exit_code(status: RunStatus) -> i32 {
    match status {
        RunStatus::Completed => 0,
        RunStatus::Aborted => 2,
        RunStatus::Running | RunStatus::Failed => 1,
    }
}

fn open_store(config: &Config) -> anyhow::Result<ConstraintStore> {
    Ok(ConstraintStore::open(&config.store)?)
}

fn warning(c: &Conflict) -> String {
    let kind = serde_json::to_value(c.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    format!("-- warning: {kind} between {} and {}: {}", c.pair.0, c.pair.1, c.explanation)
}

pub fn explain(query_path: &Path, level: &str, config: &Config) -> anyhow::Result<String> {
    let query = std::fs::read_to_string(query_path).with_context(|| format!("reading {}", query_path.display()))?;
    let model = config.model.build()?;
    let profile = config.profile()?;
    let plan = plan(&query, config, &profile, model.as_ref())?;
    let mut out = match level {
        "logical" => format_logical(&plan.logical),
        "physical" => format_physical(&plan),
        other => bail!("unknown level `{other}`; expected logical or physical"),
    };
    let declared: Vec<_> = plan
        .logical
        .constraints()
        .filter(|c| c.origin == Origin::Declared)
        .cloned()
        .collect();
    for c in open_store(config)?.conflicts(&declared, None) {
        if !out.ends_with('\n') {
            out.push('\n');
        }
        out.push_str(&warning(&c));
        out.push('\n');
    }
    Ok(out)
}

pub fn store_register(
    config: &Config,
    id: &str,
    decl: &str,
    description: &str,
    tags: Vec<String>,
    soft: bool,
) -> anyhow::Result<String> {
    let mut c = sicql::store::StoredConstraint::new(id, decl, description);
    c.tags = tags;
    c.soft = soft;
    Ok(open_store(config)?.register(c)?)
}

pub fn store_recommend(config: &Config, query: &str, k: usize) -> anyhow::Result<String> {
    let recs = open_store(config)?.recommend(query, k, None);
    Ok(serde_json::to_string_pretty(&recs)?)
}

pub fn store_conflicts(config: &Config) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(&open_store(config)?.conflicts(&[], None))?)
}
