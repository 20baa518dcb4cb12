use std::path::{Path, PathBuf};
use std::process::Command;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn sicql(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sicql"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("data")).unwrap();
    std::fs::copy(fixtures().join("ehr.jsonl"), dir.path().join("data/ehr_table.jsonl")).unwrap();
    dir
}

fn ehr_args<'a>(f: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "run".into(),
        format!("{f}/ehr_e2e.sicql"),
        "--data".into(),
        "data".into(),
        "--config".into(),
        format!("{f}/ehr_config.json"),
        "--model-script".into(),
        format!("{f}/ehr_script.json"),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

#[test]
fn run_ehr_query_writes_results_and_is_reproducible() {
    let f = fixtures().display().to_string();
    let a = workspace();
    let b = workspace();
    let args = ehr_args(&f, &[]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let (code, stdout, stderr) = sicql(a.path(), &args);
    assert_eq!(code, 0, "{stderr}");
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["status"], "completed");
    let id = summary["run_id"].as_str().unwrap();
    let (code, _, _) = sicql(b.path(), &args);
    assert_eq!(code, 0);
    for file in ["results.jsonl", "lineage.jsonl"] {
        let x = std::fs::read_to_string(a.path().join("runs").join(id).join(file)).unwrap();
        let y = std::fs::read_to_string(b.path().join("runs").join(id).join(file)).unwrap();
        assert_eq!(x, y, "{file}");
    }
    let strip = |p: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("timestamp");
                v
            })
            .collect()
    };
    for file in ["op_invocations.jsonl", "constraint_invocations.jsonl"] {
        assert_eq!(
            strip(&a.path().join("runs").join(id).join(file)),
            strip(&b.path().join("runs").join(id).join(file)),
            "{file}"
        );
    }
}

#[test]
fn missing_table_exits_one() {
    let f = fixtures().display().to_string();
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("data")).unwrap();
    let args = ehr_args(&f, &[]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let (code, _, stderr) = sicql(dir.path(), &args);
    assert_eq!(code, 1);
    assert!(stderr.contains("ehr_table"), "{stderr}");
}

#[test]
fn abort_exits_two_and_keeps_the_run_directory() {
    let dir = workspace();
    let p = dir.path();
    std::fs::write(p.join("q.sicql"), "FROM t |> EXTEND p'say {x}' AS s STRING |> ASSERT s INCLUDES 'ok' RETRY 0 ABORT ON FAIL").unwrap();
    std::fs::write(p.join("data/t.jsonl"), "{\"x\": \"ok\"}\n{\"x\": \"no\"}\n").unwrap();
    std::fs::write(p.join("m.json"), r#"{"rules": [{"pattern": "say", "responses": ["{x}"]}]}"#).unwrap();
    let (code, stdout, _) = sicql(p, &["run", "q.sicql", "--data", "data", "--model-script", "m.json"]);
    assert_eq!(code, 2);
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let run = p.join("runs").join(summary["run_id"].as_str().unwrap());
    assert!(run.join("constraint_invocations.jsonl").is_file());
    assert_eq!(std::fs::read_to_string(run.join("results.jsonl")).unwrap(), "");
}

#[test]
fn explain_levels_and_conflict_warnings() {
    let f = fixtures().display().to_string();
    let dir = workspace();
    let p = dir.path();
    let q = format!("{f}/ehr_e2e.sicql");
    let (code, logical, _) = sicql(p, &["explain", &q, "--level", "logical"]);
    assert_eq!(code, 0);
    // Pushdown moves the date check right after the operator producing dob.
    let lines: Vec<&str> = logical.lines().collect();
    assert!(lines[1].starts_with("|> SET dob"), "{logical}");
    assert!(lines[2].contains("REGEXP_CONTAINS(dob"), "{logical}");
    let (code, physical, _) = sicql(p, &["explain", &q]);
    assert_eq!(code, 0);
    assert!(physical.contains("[deterministic] [reactive]"), "{physical}");
    assert!(!physical.contains("warning"));

    let (code, _, stderr) = sicql(
        p,
        &["store", "register", "--id", "no-results", "--decl", "ASSERT med_hist_sum EXCLUDES 'lactate'", "--description", "keep lab values out of summaries"],
    );
    assert_eq!(code, 0, "{stderr}");
    let (code, _, _) = sicql(
        p,
        &["store", "register", "--id", "needs-lactate", "--decl", "ASSERT med_hist_sum INCLUDES 'lactate level'", "--description", "summaries cite lactate"],
    );
    assert_eq!(code, 0);
    let (_, dup, _) = sicql(p, &["store", "register", "--id", "no-results", "--decl", "ASSERT a > 1", "--description", "x"]);
    assert!(dup.is_empty());
    let (code, physical, _) = sicql(p, &["explain", &q]);
    assert_eq!(code, 0);
    assert!(
        physical.contains("-- warning: include-exclude-contradiction between needs-lactate and no-results"),
        "{physical}"
    );
    let (_, conflicts, _) = sicql(p, &["store", "conflicts"]);
    let conflicts: serde_json::Value = serde_json::from_str(&conflicts).unwrap();
    assert_eq!(conflicts[0]["kind"], "include-exclude-contradiction");
    let (_, recs, _) = sicql(p, &["store", "recommend", "summaries of lab values", "--k", "1"]);
    let recs: serde_json::Value = serde_json::from_str(&recs).unwrap();
    assert_eq!(recs[0]["id"], "no-results");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"run_dirr": "x"}"#).unwrap();
    let (code, _, stderr) = sicql(dir.path(), &["store", "conflicts", "--config", "c.json"]);
    assert_eq!(code, 1);
    assert!(stderr.contains("unknown field"), "{stderr}");
}
