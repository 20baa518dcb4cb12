//! Append-only writer for one run's record files.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;

use super::{ConstraintInvocationRecord, LineageRecord, OperatorInvocationRecord, RunRecord};

struct Files {
    ops: BufWriter<File>,
    constraints: BufWriter<File>,
    lineage: BufWriter<File>,
}

#[derive(Default)]
struct State {
    op_seq: u64,
    ci_seq: u64,
    ops: Vec<OperatorInvocationRecord>,
    constraints: Vec<ConstraintInvocationRecord>,
    lineage: Vec<LineageRecord>,
    files: Option<Files>,
}

/// Records a run. Safe to share between producer threads; ids are assigned
/// in append order under the lock.
pub struct RunWriter {
    run_id: String,
    dir: Option<PathBuf>,
    state: Mutex<State>,
}

fn line<T: Serialize>(w: &mut impl Write, value: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

impl RunWriter {
    /// Creates `<root>/<run_id>/` and its record files.
    pub fn create(root: &Path, run_id: &str) -> io::Result<Self> {
        let dir = root.join(run_id);
        fs::create_dir_all(&dir)?;
        let open = |name: &str| File::create(dir.join(name)).map(BufWriter::new);
        let files = Files {
            ops: open("op_invocations.jsonl")?,
            constraints: open("constraint_invocations.jsonl")?,
            lineage: open("lineage.jsonl")?,
        };
        Ok(RunWriter {
            run_id: run_id.to_string(),
            dir: Some(dir),
            state: Mutex::new(State {
                files: Some(files),
                ..State::default()
            }),
        })
    }

    /// A writer that keeps records in memory only.
    pub fn memory(run_id: &str) -> Self {
        RunWriter {
            run_id: run_id.to_string(),
            dir: None,
            state: Mutex::new(State::default()),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Appends an operator invocation, returning its assigned id.
    pub fn record_operator(&self, mut rec: OperatorInvocationRecord) -> io::Result<String> {
        let mut st = self.lock();
        rec.seq = st.op_seq;
        rec.invocation_id = format!("{}:op{}", self.run_id, rec.seq);
        rec.run_id = self.run_id.clone();
        st.op_seq += 1;
        if let Some(f) = st.files.as_mut() {
            line(&mut f.ops, &rec)?;
        }
        let id = rec.invocation_id.clone();
        st.ops.push(rec);
        Ok(id)
    }

    /// Appends a constraint invocation, returning its assigned id.
    pub fn record_constraint(&self, mut rec: ConstraintInvocationRecord) -> io::Result<String> {
        let mut st = self.lock();
        rec.seq = st.ci_seq;
        rec.invocation_id = format!("{}:ci{}", self.run_id, rec.seq);
        rec.run_id = self.run_id.clone();
        st.ci_seq += 1;
        if let Some(f) = st.files.as_mut() {
            line(&mut f.constraints, &rec)?;
        }
        let id = rec.invocation_id.clone();
        st.constraints.push(rec);
        Ok(id)
    }

    pub fn record_lineage(&self, rec: LineageRecord) -> io::Result<()> {
        let mut st = self.lock();
        if let Some(f) = st.files.as_mut() {
            line(&mut f.lineage, &rec)?;
        }
        st.lineage.push(rec);
        Ok(())
    }

    /// Replaces `run.json`.
    pub fn write_run(&self, run: &RunRecord) -> io::Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let tmp = dir.join("run.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(run)?)?;
        fs::rename(tmp, dir.join("run.json"))
    }

    /// Writes `results.jsonl`, one object per row.
    pub fn write_results(&self, rows: &[serde_json::Value]) -> io::Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let mut w = BufWriter::new(File::create(dir.join("results.jsonl"))?);
        for r in rows {
            line(&mut w, r)?;
        }
        w.flush()
    }

    pub fn flush(&self) -> io::Result<()> {
        let mut st = self.lock();
        if let Some(f) = st.files.as_mut() {
            f.ops.flush()?;
            f.constraints.flush()?;
            f.lineage.flush()?;
        }
        Ok(())
    }

    pub fn operator_records(&self) -> Vec<OperatorInvocationRecord> {
        self.lock().ops.clone()
    }

    pub fn constraint_records(&self) -> Vec<ConstraintInvocationRecord> {
        self.lock().constraints.clone()
    }

    pub fn lineage_records(&self) -> Vec<LineageRecord> {
        self.lock().lineage.clone()
    }
}

impl Drop for RunWriter {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
