//! Read access to run directories, the label overlay and lineage queries.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    run_metrics, ConstraintInvocationRecord, LineageRecord, OperatorInvocationRecord, RunMetrics,
    RunRecord,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Io(String),
    #[error("corrupt record in {file}: {message}")]
    Corrupt { file: String, message: String },
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LabelError {
    #[error("invocation {0} not found")]
    NotFound(String),
    #[error("invocation {0} is already labeled")]
    Conflict(String),
    #[error("invocation {0} used a deterministic check and cannot be labeled")]
    Rejected(String),
    #[error("{0}")]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelEntry {
    invocation_id: String,
    true_label: bool,
    timestamp: String,
}

/// An unlabeled stochastic invocation awaiting a human verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTask {
    #[serde(flatten)]
    pub record: ConstraintInvocationRecord,
    /// Unlabeled items left in the queue, this one included.
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageNode {
    pub tuple_id: String,
    /// Operator that produced the tuple; `None` for scanned tuples.
    pub operator: Option<String>,
    pub flags: Vec<String>,
    pub parents: Vec<LineageNode>,
}

/// Runs stored under one root directory.
pub struct RunStore {
    root: PathBuf,
    labels: Mutex<()>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                file: path.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        RunStore {
            root: root.into(),
            labels: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, run: &str) -> Result<PathBuf, StoreError> {
        let dir = self.root.join(run);
        if valid_id(run) && dir.join("run.json").is_file() {
            Ok(dir)
        } else {
            Err(StoreError::NotFound(format!("run {run}")))
        }
    }

    /// All runs, oldest first.
    pub fn list_runs(&self) -> Result<Vec<RunRecord>, StoreError> {
        let mut runs = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(runs),
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Ok(run) = self.run(&name) {
                runs.push(run);
            }
        }
        runs.sort_by(|a, b| (&a.started_at, &a.run_id).cmp(&(&b.started_at, &b.run_id)));
        Ok(runs)
    }

    pub fn run(&self, run: &str) -> Result<RunRecord, StoreError> {
        let path = self.dir(run)?.join("run.json");
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| StoreError::Corrupt {
            file: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn operator_records(&self, run: &str) -> Result<Vec<OperatorInvocationRecord>, StoreError> {
        read_jsonl(&self.dir(run)?.join("op_invocations.jsonl"))
    }

    /// Constraint invocations with submitted labels applied.
    pub fn constraint_records(&self, run: &str) -> Result<Vec<ConstraintInvocationRecord>, StoreError> {
        let dir = self.dir(run)?;
        let mut records: Vec<ConstraintInvocationRecord> = read_jsonl(&dir.join("constraint_invocations.jsonl"))?;
        let labels: Vec<LabelEntry> = read_jsonl(&dir.join("labels.jsonl"))?;
        let by_id: HashMap<&str, bool> = labels.iter().map(|l| (l.invocation_id.as_str(), l.true_label)).collect();
        for r in &mut records {
            if let Some(&l) = by_id.get(r.invocation_id.as_str()) {
                r.true_label = Some(l);
            }
        }
        Ok(records)
    }

    pub fn lineage_records(&self, run: &str) -> Result<Vec<LineageRecord>, StoreError> {
        read_jsonl(&self.dir(run)?.join("lineage.jsonl"))
    }

    pub fn results(&self, run: &str) -> Result<Vec<serde_json::Value>, StoreError> {
        read_jsonl(&self.dir(run)?.join("results.jsonl"))
    }

    /// Result rows, optionally restricted to flagged or unflagged ones.
    pub fn tuples(&self, run: &str, flagged: Option<bool>) -> Result<Vec<serde_json::Value>, StoreError> {
        let rows = self.results(run)?;
        Ok(rows
            .into_iter()
            .filter(|r| {
                let has = r["_flags"].as_array().is_some_and(|f| !f.is_empty());
                flagged.is_none_or(|want| want == has)
            })
            .collect())
    }

    pub fn metrics(&self, run: &str) -> Result<RunMetrics, StoreError> {
        Ok(run_metrics(
            &self.run(run)?,
            &self.operator_records(run)?,
            &self.constraint_records(run)?,
        ))
    }

    /// Full ancestry of a tuple.
    pub fn lineage(&self, run: &str, tuple: &str) -> Result<LineageNode, StoreError> {
        let records = self.lineage_records(run)?;
        let known = records.iter().any(|r| r.child == tuple || r.parent == tuple)
            || self.results(run)?.iter().any(|r| r["_tuple_id"] == tuple);
        if !known {
            return Err(StoreError::NotFound(format!("tuple {tuple} in run {run}")));
        }
        let mut by_child: HashMap<&str, Vec<&LineageRecord>> = HashMap::new();
        for r in &records {
            by_child.entry(&r.child).or_default().push(r);
        }
        fn build(id: &str, by_child: &HashMap<&str, Vec<&LineageRecord>>) -> LineageNode {
            let recs = by_child.get(id).map(Vec::as_slice).unwrap_or(&[]);
            LineageNode {
                tuple_id: id.to_string(),
                operator: recs.first().map(|r| r.operator.clone()),
                flags: recs.first().map(|r| r.flags.clone()).unwrap_or_default(),
                parents: recs.iter().map(|r| build(&r.parent, by_child)).collect(),
            }
        }
        Ok(build(tuple, &by_child))
    }

    /// Most recent run containing the tuple id.
    pub fn run_for_tuple(&self, tuple: &str) -> Result<String, StoreError> {
        for run in self.list_runs()?.into_iter().rev() {
            if self.lineage(&run.run_id, tuple).is_ok() {
                return Ok(run.run_id);
            }
        }
        Err(StoreError::NotFound(format!("tuple {tuple}")))
    }

    /// Unlabeled stochastic invocations in invocation order.
    pub fn label_queue(&self, run: Option<&str>, constraint: Option<&str>) -> Result<Vec<ConstraintInvocationRecord>, StoreError> {
        let runs = match run {
            Some(r) => vec![self.run(r)?],
            None => self.list_runs()?,
        };
        let mut out = Vec::new();
        for r in runs {
            out.extend(self.constraint_records(&r.run_id)?.into_iter().filter(|c| {
                !c.implementation.deterministic
                    && c.true_label.is_none()
                    && constraint.is_none_or(|k| k == c.constraint_id)
            }));
        }
        Ok(out)
    }

    pub fn next_label(&self, run: Option<&str>, constraint: Option<&str>) -> Result<Option<LabelTask>, StoreError> {
        let queue = self.label_queue(run, constraint)?;
        let remaining = queue.len();
        Ok(queue.into_iter().next().map(|record| LabelTask { record, remaining }))
    }

    /// Records a label once per invocation.
    pub fn submit_label(&self, invocation_id: &str, true_label: bool) -> Result<ConstraintInvocationRecord, LabelError> {
        let not_found = || LabelError::NotFound(invocation_id.to_string());
        let (run, _) = invocation_id.rsplit_once(":ci").ok_or_else(not_found)?;
        let dir = self.dir(run).map_err(|_| not_found())?;
        let _guard = self.labels.lock().unwrap_or_else(|e| e.into_inner());
        let mut record = self
            .constraint_records(run)?
            .into_iter()
            .find(|r| r.invocation_id == invocation_id)
            .ok_or_else(not_found)?;
        if record.implementation.deterministic {
            return Err(LabelError::Rejected(invocation_id.to_string()));
        }
        if record.true_label.is_some() {
            return Err(LabelError::Conflict(invocation_id.to_string()));
        }
        let entry = LabelEntry {
            invocation_id: invocation_id.to_string(),
            true_label,
            timestamp: crate::util::now_utc(),
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("labels.jsonl"))
            .map_err(StoreError::from)?;
        let mut line = serde_json::to_vec(&entry).map_err(|e| StoreError::Io(e.to_string()))?;
        line.push(b'\n');
        f.write_all(&line).map_err(StoreError::from)?;
        record.true_label = Some(true_label);
        Ok(record)
    }
}
