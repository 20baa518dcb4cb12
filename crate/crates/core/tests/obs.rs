use std::collections::HashSet;
use std::sync::Arc;

use sicql::check::Verdict;
use sicql::lang::ClassKind;
use sicql::obs::*;
use sicql::physical::ImplMode;

fn record(constraint: &str, tuple: &str, deterministic: bool, label: Verdict) -> ConstraintInvocationRecord {
    ConstraintInvocationRecord {
        invocation_id: String::new(),
        seq: 0,
        run_id: String::new(),
        constraint_id: constraint.into(),
        class: if deterministic { ClassKind::Domain } else { ClassKind::Grounding },
        description: format!("{constraint} holds"),
        operator: "op".into(),
        tuple_id: tuple.into(),
        attempt: 0,
        input: Snapshot::of("value"),
        source: Some(Snapshot::of("source text")),
        predicted_label: label,
        confidence: Some(0.8),
        true_label: None,
        implementation: ImplTag {
            deterministic,
            mode: ImplMode::Reactive,
            mechanism: if deterministic { "deterministic:regex" } else { "model:fake" }.into(),
        },
        feedback: None,
        cost: 1.0,
        timestamp: sicql::util::now_utc(),
    }
}

fn finish(w: &RunWriter, rows: Vec<serde_json::Value>) {
    w.flush().unwrap();
    w.write_results(&rows).unwrap();
    w.write_run(&RunRecord {
        run_id: w.run_id().into(),
        query: "FROM t".into(),
        logical_plan: String::new(),
        physical_plan: String::new(),
        status: RunStatus::Completed,
        seed: 0,
        started_at: sicql::util::now_utc(),
        finished_at: Some(sicql::util::now_utc()),
        totals: RunTotals::default(),
        stages: Vec::new(),
        error: None,
    })
    .unwrap();
}

#[test]
fn concurrent_appends_keep_every_record() {
    let dir = tempfile::tempdir().unwrap();
    let w = Arc::new(RunWriter::create(dir.path(), "r1").unwrap());
    let handles: Vec<_> = (0..4)
        .map(|k| {
            let w = Arc::clone(&w);
            std::thread::spawn(move || {
                (0..250)
                    .map(|i| w.record_constraint(record("c1", &format!("t{k}-{i}"), false, Verdict::Pass)).unwrap())
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    let ids: Vec<String> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    assert_eq!(ids.iter().collect::<HashSet<_>>().len(), 1000);
    finish(&w, vec![]);
    let stored = RunStore::open(dir.path()).constraint_records("r1").unwrap();
    assert_eq!(stored.len(), 1000);
    assert!(stored.windows(2).all(|p| p[0].seq + 1 == p[1].seq));
    assert_eq!(stored[0].invocation_id, "r1:ci0");
}

#[test]
fn labeling_queue_and_write_once_labels() {
    let dir = tempfile::tempdir().unwrap();
    let w = RunWriter::create(dir.path(), "r2").unwrap();
    w.record_constraint(record("c1", "t0", false, Verdict::Violation)).unwrap();
    w.record_constraint(record("c2", "t0", true, Verdict::Pass)).unwrap();
    w.record_constraint(record("c1", "t1", false, Verdict::Pass)).unwrap();
    w.record_constraint(record("c1", "t2", false, Verdict::Violation)).unwrap();
    finish(&w, vec![]);
    let store = RunStore::open(dir.path());

    let queue = store.label_queue(Some("r2"), None).unwrap();
    let ids: Vec<&str> = queue.iter().map(|r| r.invocation_id.as_str()).collect();
    assert_eq!(ids, ["r2:ci0", "r2:ci2", "r2:ci3"]);
    assert!(store.metrics("r2").unwrap().constraints[0].precision.is_none());

    assert_eq!(store.submit_label("r2:ci1", true), Err(LabelError::Rejected("r2:ci1".into())));
    assert_eq!(store.submit_label("r2:ci9", true), Err(LabelError::NotFound("r2:ci9".into())));
    for (id, holds) in [("r2:ci0", false), ("r2:ci2", true), ("r2:ci3", true)] {
        store.submit_label(id, holds).unwrap();
    }
    assert_eq!(store.submit_label("r2:ci0", true), Err(LabelError::Conflict("r2:ci0".into())));
    assert!(store.next_label(Some("r2"), None).unwrap().is_none());

    let m = store.metrics("r2").unwrap();
    let c1 = m.constraints.iter().find(|c| c.constraint_id == "c1").unwrap();
    assert_eq!((c1.precision, c1.recall, c1.n_labeled), (Some(0.5), Some(1.0), 3));
}

#[test]
fn lineage_and_flagged_tuples() {
    let dir = tempfile::tempdir().unwrap();
    let w = RunWriter::create(dir.path(), "r3").unwrap();
    for p in ["t0", "t1", "t2"] {
        w.record_lineage(LineageRecord {
            child: "t5".into(),
            parent: p.into(),
            operator: "summary".into(),
            flags: vec!["c4".into()],
        })
        .unwrap();
    }
    finish(
        &w,
        vec![
            serde_json::json!({"_tuple_id": "t5", "_flags": ["c4"], "_parents": ["t0", "t1", "t2"]}),
            serde_json::json!({"_tuple_id": "t6", "_flags": [], "_parents": ["t3"]}),
        ],
    );
    let store = RunStore::open(dir.path());
    let tree = store.lineage("r3", "t5").unwrap();
    assert_eq!(tree.parents.len(), 3);
    assert_eq!(tree.operator.as_deref(), Some("summary"));
    assert!(store.lineage("r3", "t0").unwrap().parents.is_empty());
    assert!(matches!(store.lineage("r3", "zz"), Err(StoreError::NotFound(_))));
    assert_eq!(store.tuples("r3", Some(true)).unwrap().len(), 1);
    assert_eq!(store.tuples("r3", Some(false)).unwrap().len(), 1);
    assert_eq!(store.run_for_tuple("t5").unwrap(), "r3");
    assert!(matches!(store.run("../etc"), Err(StoreError::NotFound(_))));
}
