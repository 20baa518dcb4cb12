use std::collections::BTreeMap;

use serde_json::json;
use sicql::config::EngineConfig;
use sicql::engine::{execute, ExecOutcome, RunOptions, Table};
use sicql::lang::parse_query;
use sicql::logical::{default_stats, optimize};
use sicql::model::{FakeModel, FakeScript};
use sicql::obs::RunStatus;
use sicql::physical::{select_plan, Capabilities, PhysicalPlan, Profile};

fn model(script: serde_json::Value) -> FakeModel {
    let script: FakeScript = serde_json::from_value(script).unwrap();
    FakeModel::new(script).unwrap()
}

fn plan(query: &str, model: &FakeModel, config: &EngineConfig) -> PhysicalPlan {
    let logical = optimize(&parse_query(query).unwrap(), config, &default_stats(config)).unwrap();
    let profile = Profile::default().with_defaults_for(&logical, config);
    select_plan(&logical, &profile, &Capabilities::of(Some(model), config), config).unwrap()
}

fn table(rows: serde_json::Value) -> BTreeMap<String, Table> {
    let rows = rows.as_array().unwrap().clone();
    BTreeMap::from([("t".to_string(), Table::from_json_rows("t", &rows))])
}

fn run(query: &str, script: serde_json::Value, rows: serde_json::Value, config: &EngineConfig) -> ExecOutcome {
    let m = model(script);
    let p = plan(query, &m, config);
    let opts = RunOptions {
        seed: 7,
        query_text: query.into(),
        ..RunOptions::default()
    };
    execute(&p, &table(rows), &m, config, &opts).unwrap()
}

fn attempts(out: &ExecOutcome, tuple: &str) -> usize {
    out.operator_records.iter().filter(|r| r.tuple_id == tuple).count()
}

fn conserved(out: &ExecOutcome) {
    for s in &out.record.stages {
        assert!(s.conserved(), "{s:?}");
    }
}

#[test]
fn scan_only_returns_rows_in_order() {
    let out = run("FROM t", json!({}), json!([{"a": 1}, {"a": 2}]), &EngineConfig::default());
    assert_eq!(out.status, RunStatus::Completed);
    let rows = out.relation.rows();
    assert_eq!(rows[0], json!({"_tuple_id": "t0", "_flags": [], "_parents": [], "a": 1}));
    assert_eq!(rows[1]["a"], json!(2));
    assert!(out.operator_records.is_empty());
    conserved(&out);
}

#[test]
fn retries_until_the_check_passes() {
    let q = "FROM t |> EXTEND p'count {x}' AS n INT |> ASSERT n > 0 RETRY 3 CONTINUE ON FAIL";
    let script = json!({"rules": [{"pattern": "count", "responses": ["0", "0", "5"]}]});
    let out = run(q, script, json!([{"x": "a"}]), &EngineConfig::default());
    assert_eq!(attempts(&out, "t0"), 3);
    let t = &out.relation.tuples[0];
    assert!(t.flags.is_empty());
    assert_eq!(out.relation.rows()[0]["n"], json!(5));
    // The retry prompt carries the previous output and the violated constraint.
    let last = &out.operator_records[2].prompt.text;
    assert!(last.contains("Previous output: 0"), "{last}");
    assert!(last.contains("Violated constraint:"), "{last}");
}

#[test]
fn unparsable_output_counts_against_the_type_constraint() {
    let q = "FROM t |> EXTEND p'count {x}' AS n INT";
    let script = json!({"rules": [{"pattern": "count", "responses": ["abc", "7"]}]});
    let out = run(q, script, json!([{"x": "a"}]), &EngineConfig::default());
    assert_eq!(attempts(&out, "t0"), 2);
    let first = &out.constraint_records[0];
    assert_eq!(first.constraint_id, "n.type");
    assert_eq!(first.attempt, 0);
    assert!(first.feedback.as_deref().unwrap().contains("abc"));
    assert_eq!(out.relation.rows()[0]["n"], json!(7));
}

#[test]
fn exhausted_continue_flags_and_keeps_the_tuple() {
    let q = "FROM t |> EXTEND p'say {x}' AS s STRING |> ASSERT s INCLUDES 'ok' RETRY 1 CONTINUE ON FAIL";
    let script = json!({"rules": [{"pattern": "say", "responses": ["nope"]}]});
    let out = run(q, script, json!([{"x": "a"}, {"x": "b"}]), &EngineConfig::default());
    assert_eq!(out.status, RunStatus::Completed);
    for t in &out.relation.tuples {
        assert_eq!(t.flags.iter().collect::<Vec<_>>(), ["c1"]);
        assert_eq!(attempts(&out, &t.parents[0]), 2);
    }
    assert_eq!(out.record.totals.flagged, 2);
    conserved(&out);
}

#[test]
fn ignored_member_drops_its_group_only() {
    let q = "FROM t \
             |> EXTEND p'label {x}' AS l STRING \
             |> ASSERT l INCLUDES 'ok' RETRY 0 IGNORE ON FAIL \
             |> AGGREGATE p'summarize {l}' AS s STRING GROUP BY g";
    let script = json!({"rules": [
        {"pattern": "label", "responses": ["{x}"]},
        {"pattern": "summarize", "responses": ["sum"]}
    ]});
    let rows = json!([
        {"g": "a", "x": "ok 1"}, {"g": "a", "x": "bad"}, {"g": "a", "x": "ok 3"},
        {"g": "b", "x": "ok 4"}, {"g": "b", "x": "ok 5"}
    ]);
    let out = run(q, script, rows, &EngineConfig::default());
    assert_eq!(out.status, RunStatus::Completed);
    assert_eq!(out.relation.tuples.len(), 1);
    assert_eq!(out.relation.rows()[0]["g"], json!("b"));
    assert_eq!(out.relation.tuples[0].parents.len(), 2);
    let agg = out.record.stages.last().unwrap();
    assert_eq!((agg.tuples_in, agg.tuples_out, agg.ignored, agg.emitted), (4, 2, 2, 1));
    conserved(&out);
    // The group with the ignored member never reached the model.
    let prompts: Vec<_> = out.operator_records.iter().filter(|r| r.operator.contains("s")).collect();
    assert!(prompts.iter().all(|r| !r.prompt.text.contains("ok 1")));
}

#[test]
fn abort_stops_the_run_with_an_empty_result() {
    let q = "FROM t |> EXTEND p'say {x}' AS s STRING |> ASSERT s INCLUDES 'ok' RETRY 0 ABORT ON FAIL";
    let script = json!({"rules": [{"pattern": "say", "responses": ["{x}"]}]});
    let out = run(q, script, json!([{"x": "ok"}, {"x": "no"}, {"x": "ok"}]), &EngineConfig::default());
    assert_eq!(out.status, RunStatus::Aborted);
    assert!(out.relation.tuples.is_empty());
    let s = out.record.stages.last().unwrap();
    assert_eq!((s.tuples_out, s.aborted), (1, 2));
    conserved(&out);
}

#[test]
fn missing_rule_fails_the_run() {
    let q = "FROM t |> EXTEND p'say {x}' AS s STRING";
    let out = run(q, json!({}), json!([{"x": "a"}]), &EngineConfig::default());
    assert_eq!(out.status, RunStatus::Failed);
    assert!(out.record.error.as_deref().unwrap().contains("no rule"));
}

#[test]
fn reruns_are_identical_and_workers_do_not_matter() {
    let q = "FROM t |> EXTEND p'say {x}' AS s STRING |> ASSERT s INCLUDES 'ok' RETRY 2 CONTINUE ON FAIL \
             |> WHERE p'keep {s}' AS k";
    let script = json!({"rules": [
        {"pattern": "say", "responses": ["{x}", "ok {x}"]},
        {"pattern": "keep .*ok a", "responses": ["false"]},
        {"pattern": "keep", "responses": ["true"]}
    ]});
    let rows = json!((0..40).map(|i| json!({"x": if i % 3 == 0 { "ok a".to_string() } else { format!("v{i}") }})).collect::<Vec<_>>());
    let strip = |o: &ExecOutcome| {
        let ops: Vec<_> = o.operator_records.iter().map(|r| (r.tuple_id.clone(), r.attempt, r.prompt.text.clone(), r.output.text.clone())).collect();
        let cis: Vec<_> = o.constraint_records.iter().map(|r| (r.constraint_id.clone(), r.tuple_id.clone(), r.predicted_label)).collect();
        (o.relation.rows(), ops, cis, o.record.stages.clone())
    };
    let mut config = EngineConfig { batch_size: 8, ..EngineConfig::default() };
    let a = run(q, script.clone(), rows.clone(), &config);
    let b = run(q, script.clone(), rows.clone(), &config);
    config.workers = Some(4);
    let c = run(q, script, rows, &config);
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(strip(&a), strip(&c));
    assert_eq!(a.run_id, b.run_id);
    let w = a.record.stages.last().unwrap();
    assert_eq!(w.filtered, 14);
    conserved(&a);
}

#[test]
fn run_directory_holds_records_and_results() {
    let dir = tempfile::tempdir().unwrap();
    let q = "FROM t |> EXTEND p'say {x}' AS s STRING";
    let m = model(json!({"rules": [{"pattern": "say", "responses": ["hi"]}]}));
    let config = EngineConfig::default();
    let p = plan(q, &m, &config);
    let opts = RunOptions {
        seed: 1,
        run_root: Some(dir.path().to_path_buf()),
        query_text: q.into(),
        ..RunOptions::default()
    };
    let tables = table(json!([{"x": "a"}]));
    let first = execute(&p, &tables, &m, &config, &opts).unwrap();
    let second = execute(&p, &tables, &m, &config, &opts).unwrap();
    assert_eq!(second.run_id, format!("{}-2", first.run_id));
    let results = std::fs::read_to_string(dir.path().join(&first.run_id).join("results.jsonl")).unwrap();
    assert_eq!(results.lines().next().unwrap(), r#"{"_tuple_id":"t1","_flags":[],"_parents":["t0"],"x":"a","s":"hi"}"#);
    let store = sicql::obs::RunStore::open(dir.path());
    assert_eq!(store.list_runs().unwrap().len(), 2);
    assert_eq!(store.lineage(&first.run_id, "t1").unwrap().parents[0].tuple_id, "t0");
}
