//! Loading tables from CSV or JSONL files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IoError {
    #[error("table `{table}` not found in {dir} (looked for .jsonl and .csv)")]
    MissingTable { table: String, dir: String },
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub name: String,
    /// Column names in first-seen order.
    pub columns: Vec<String>,
    pub rows: Vec<BTreeMap<String, Value>>,
}

impl Table {
    /// Builds a table from JSON objects.
    pub fn from_json_rows(name: &str, rows: &[serde_json::Value]) -> Self {
        let mut t = Table {
            name: name.to_string(),
            ..Table::default()
        };
        for r in rows {
            let mut row = BTreeMap::new();
            if let Some(obj) = r.as_object() {
                for (k, v) in obj {
                    if !t.columns.contains(k) {
                        t.columns.push(k.clone());
                    }
                    row.insert(k.clone(), Value::from_json(v));
                }
            }
            t.rows.push(row);
        }
        t
    }
}

fn infer(field: &str) -> Value {
    if field.is_empty() {
        Value::Null
    } else if let Ok(i) = field.parse::<i64>() {
        Value::Int(i)
    } else if let Ok(f) = field.parse::<f64>() {
        Value::Float(f)
    } else {
        Value::Text(field.to_string())
    }
}

fn read_err(path: &Path, e: impl ToString) -> IoError {
    IoError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Reads a `.csv` (header row required) or `.jsonl` file. The table is
/// named after the file stem.
pub fn load_table(path: &Path) -> Result<Table, IoError> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext.eq_ignore_ascii_case("csv") {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| read_err(path, e))?;
        let columns: Vec<String> = rdr
            .headers()
            .map_err(|e| read_err(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| IoError::Parse {
                path: path.display().to_string(),
                line: i + 2,
                message: e.to_string(),
            })?;
            rows.push(columns.iter().cloned().zip(rec.iter().map(infer)).collect());
        }
        Ok(Table { name, columns, rows })
    } else {
        let text = fs::read_to_string(path).map_err(|e| read_err(path, e))?;
        let mut objects = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| IoError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if !v.is_object() {
                return Err(IoError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: "expected a JSON object".into(),
                });
            }
            objects.push(v);
        }
        Ok(Table::from_json_rows(&name, &objects))
    }
}

/// Finds `<dir>/<table>.jsonl` or `<dir>/<table>.csv`.
pub fn find_table(dir: &Path, table: &str) -> Result<PathBuf, IoError> {
    ["jsonl", "csv"]
        .iter()
        .map(|ext| dir.join(format!("{table}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| IoError::MissingTable {
            table: table.to_string(),
            dir: dir.display().to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_inference_and_quoting() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("people.csv");
        fs::write(&p, "name,age,score,note\n\"Doe, J\",41,3.5,\nAl,x,,\"said \"\"hi\"\"\"\n").unwrap();
        let t = load_table(&p).unwrap();
        assert_eq!(t.name, "people");
        assert_eq!(t.columns, ["name", "age", "score", "note"]);
        assert_eq!(t.rows[0]["name"], Value::Text("Doe, J".into()));
        assert_eq!(t.rows[0]["age"], Value::Int(41));
        assert_eq!(t.rows[0]["score"], Value::Float(3.5));
        assert_eq!(t.rows[0]["note"], Value::Null);
        assert_eq!(t.rows[1]["note"], Value::Text("said \"hi\"".into()));
        assert_eq!(find_table(dir.path(), "people").unwrap(), p);
        assert!(matches!(find_table(dir.path(), "nope"), Err(IoError::MissingTable { .. })));
    }

    #[test]
    fn jsonl_rows_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        fs::write(&p, "{\"a\": 1}\n\n{\"b\": \"x\", \"a\": null}\n").unwrap();
        let t = load_table(&p).unwrap();
        assert_eq!(t.columns, ["a", "b"]);
        assert_eq!(t.rows.len(), 2);
        fs::write(&p, "{\"a\": 1}\n[1]\n").unwrap();
        assert!(matches!(load_table(&p), Err(IoError::Parse { line: 2, .. })));
    }
}
