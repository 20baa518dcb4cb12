//! Organization-wide constraint registry: reuse, recommendation and
//! conflict warnings.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::automata::Dfa;
use crate::lang::format::constraint_sql;
use crate::lang::{parse_constraints, ConstraintClass, ConstraintDecl, DomainSpec, FailureMode, Matcher, Target};
use crate::model::{JudgeMode, JudgeRequest, Model};
use crate::util::{cosine, sha256_hex, words};

pub const EMBEDDING_DIM: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum ConstraintStoreError {
    #[error("constraint `{0}` is already registered")]
    Duplicate(String),
    #[error("constraint `{0}` not found")]
    NotFound(String),
    #[error("invalid constraint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("corrupt store line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredConstraint {
    pub id: String,
    /// A single `ASSERT ...` declaration.
    pub decl: String,
    pub description: String,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Query the constraint was taken from, if any.
    #[serde(default)]
    pub provenance: Option<String>,
    #[serde(default)]
    pub usage_count: u64,
    /// Soft constraints never escalate past CONTINUE.
    #[serde(default)]
    pub soft: bool,
}

impl StoredConstraint {
    pub fn new(id: &str, decl: &str, description: &str) -> Self {
        StoredConstraint {
            id: id.to_string(),
            decl: decl.to_string(),
            description: description.to_string(),
            tags: Vec::new(),
            provenance: None,
            usage_count: 0,
            soft: false,
        }
    }

    /// The parsed declaration, with the stored id and soft cap applied.
    pub fn parsed(&self) -> Result<ConstraintDecl, ConstraintStoreError> {
        let mut decls = parse_constraints::<&str>(&self.decl, &[]).map_err(|e| ConstraintStoreError::Invalid(e.to_string()))?;
        if decls.len() != 1 {
            return Err(ConstraintStoreError::Invalid(format!(
                "`{}` declares {} constraints; register conjuncts separately",
                self.decl,
                decls.len()
            )));
        }
        let mut d = decls.remove(0);
        d.id = self.id.clone();
        if self.soft && d.on_fail.is_some_and(|m| m != FailureMode::Continue) {
            d.on_fail = Some(FailureMode::Continue);
        }
        Ok(d)
    }
}

/// Text embedding used for recommendation.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Bag of lowercase words hashed into buckets, L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder;

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        embed(text)
    }
}

pub fn embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; EMBEDDING_DIM];
    for w in words(text) {
        let h = sha256_hex(&w);
        let bucket = usize::from_str_radix(&h[..8], 16).expect("hex digest") % EMBEDDING_DIM;
        v[bucket] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub id: String,
    pub score: f64,
    pub constraint: StoredConstraint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConflictKind {
    DisjointDomain,
    EmptyRegexIntersection,
    IncludeExcludeContradiction,
    FlaggedByJudge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    /// Ids in sorted order.
    pub pair: (String, String),
    pub kind: ConflictKind,
    pub explanation: String,
}

fn target_name(t: &Target) -> &str {
    match t {
        Target::Attr(a) | Target::Operator(a) => a,
    }
}

fn constrained_attr(c: &ConstraintDecl) -> &str {
    match &c.class {
        ConstraintClass::Domain { attr, .. } => attr,
        _ => target_name(&c.target),
    }
}

/// Regex languages a constraint confines its target to.
fn regex_of(c: &ConstraintDecl) -> Option<&str> {
    match &c.class {
        ConstraintClass::Domain { spec: DomainSpec::Regex { pattern }, .. } => Some(pattern),
        ConstraintClass::Include(Matcher::Regex(p)) => Some(p),
        _ => None,
    }
}

fn include_exclude(inc: &ConstraintDecl, exc: &ConstraintDecl) -> Option<String> {
    match (&inc.class, &exc.class) {
        (ConstraintClass::Include(Matcher::Literal(l)), ConstraintClass::Exclude(Matcher::Literal(x))) if l.contains(x.as_str()) => {
            Some(if l == x {
                format!("`{l}` is both required and forbidden")
            } else {
                format!("required text `{l}` contains forbidden text `{x}`")
            })
        }
        _ => None,
    }
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Static conflict between two constraints on the same target.
pub fn static_conflict(a: &ConstraintDecl, b: &ConstraintDecl) -> Option<Conflict> {
    let (a, b) = if a.id <= b.id { (a, b) } else { (b, a) };
    if constrained_attr(a) != constrained_attr(b) || (a.class == b.class && a.target == b.target) {
        return None;
    }
    let conflict = |kind, explanation: String| Conflict {
        pair: ordered(&a.id, &b.id),
        kind,
        explanation,
    };
    if let Some(why) = include_exclude(a, b).or_else(|| include_exclude(b, a)) {
        return Some(conflict(ConflictKind::IncludeExcludeContradiction, why));
    }
    if let (ConstraintClass::Domain { spec: sa, .. }, ConstraintClass::Domain { spec: sb, .. }) = (&a.class, &b.class) {
        match (sa, sb) {
            (DomainSpec::ValueSet { values: x }, DomainSpec::ValueSet { values: y }) if !x.iter().any(|v| y.contains(v)) => {
                return Some(conflict(
                    ConflictKind::DisjointDomain,
                    format!("value sets {x:?} and {y:?} share no value"),
                ));
            }
            (DomainSpec::Range { lo: l1, hi: h1 }, DomainSpec::Range { lo: l2, hi: h2 }) if l1.max(*l2) > h1.min(*h2) => {
                return Some(conflict(
                    ConflictKind::DisjointDomain,
                    format!("ranges [{l1}, {h1}] and [{l2}, {h2}] do not overlap"),
                ));
            }
            _ => {}
        }
    }
    if let (Some(p), Some(q)) = (regex_of(a), regex_of(b)) {
        if let (Ok(x), Ok(y)) = (Dfa::from_regex(p), Dfa::from_regex(q)) {
            if x.intersection_witness(&y).is_none() {
                return Some(conflict(
                    ConflictKind::EmptyRegexIntersection,
                    format!("no string matches both `{p}` and `{q}`"),
                ));
            }
        }
    }
    None
}

fn prompt_text(c: &ConstraintDecl) -> Option<&str> {
    match &c.class {
        ConstraintClass::Include(Matcher::Prompt(p)) | ConstraintClass::Exclude(Matcher::Prompt(p)) => Some(&p.raw_text),
        _ => None,
    }
}

/// Pairwise conflicts, statically and, when a judge is given, over prompt
/// matchers on the same target. Warnings only.
pub fn detect_conflicts(decls: &[ConstraintDecl], judge: Option<&dyn Model>) -> Vec<Conflict> {
    let mut out = Vec::new();
    for (i, a) in decls.iter().enumerate() {
        for b in &decls[i + 1..] {
            if let Some(c) = static_conflict(a, b) {
                out.push(c);
                continue;
            }
            let Some(judge) = judge else { continue };
            let (a, b) = if a.id <= b.id { (a, b) } else { (b, a) };
            if constrained_attr(a) != constrained_attr(b) || (prompt_text(a).is_none() && prompt_text(b).is_none()) {
                continue;
            }
            let (sa, sb) = (constraint_sql(a), constraint_sql(b));
            let req = JudgeRequest {
                mode: JudgeMode::SemanticMatch,
                task: format!("no value can satisfy both `{sa}` and this constraint"),
                input: sa.clone(),
                output: sb.clone(),
                seed: 0,
            };
            if let Ok(j) = judge.judge(&req) {
                if j.holds {
                    out.push(Conflict {
                        pair: ordered(&a.id, &b.id),
                        kind: ConflictKind::FlaggedByJudge,
                        explanation: if j.rationale.is_empty() {
                            format!("judge considers `{sa}` and `{sb}` contradictory")
                        } else {
                            j.rationale
                        },
                    });
                }
            }
        }
    }
    out
}

/// JSONL-backed registry. Reads run concurrently; writes are serialized.
pub struct ConstraintStore {
    path: Option<PathBuf>,
    items: RwLock<Vec<StoredConstraint>>,
    embedder: Box<dyn Embedder>,
}

impl ConstraintStore {
    pub fn memory() -> Self {
        ConstraintStore {
            path: None,
            items: RwLock::new(Vec::new()),
            embedder: Box::new(HashEmbedder),
        }
    }

    /// Opens the store file, creating it on first write.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ConstraintStoreError> {
        let path = path.as_ref().to_path_buf();
        let mut items = Vec::new();
        match fs::File::open(&path) {
            Ok(f) => {
                for (i, line) in BufReader::new(f).lines().enumerate() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let c: StoredConstraint = serde_json::from_str(&line).map_err(|e| ConstraintStoreError::Corrupt {
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                    items.push(c);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        Ok(ConstraintStore {
            path: Some(path),
            items: RwLock::new(items),
            embedder: Box::new(HashEmbedder),
        })
    }

    pub fn with_embedder(mut self, embedder: Box<dyn Embedder>) -> Self {
        self.embedder = embedder;
        self
    }

    fn persist(&self, items: &[StoredConstraint]) -> Result<(), ConstraintStoreError> {
        let Some(path) = &self.path else { return Ok(()) };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
        for c in items {
            serde_json::to_writer(&mut f, c).map_err(io::Error::other)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        drop(f);
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn register(&self, c: StoredConstraint) -> Result<String, ConstraintStoreError> {
        c.parsed()?;
        let mut items = self.items.write().expect("store lock");
        if items.iter().any(|x| x.id == c.id) {
            return Err(ConstraintStoreError::Duplicate(c.id));
        }
        let id = c.id.clone();
        items.push(c);
        self.persist(&items)?;
        Ok(id)
    }

    pub fn lookup(&self, id: &str) -> Result<StoredConstraint, ConstraintStoreError> {
        self.items
            .read()
            .expect("store lock")
            .iter()
            .find(|c| c.id == id)
            .cloned()
            .ok_or_else(|| ConstraintStoreError::NotFound(id.to_string()))
    }

    pub fn list(&self) -> Vec<StoredConstraint> {
        self.items.read().expect("store lock").clone()
    }

    /// Records that a recommendation was taken up.
    pub fn accept(&self, id: &str) -> Result<u64, ConstraintStoreError> {
        let mut items = self.items.write().expect("store lock");
        let c = items
            .iter_mut()
            .find(|c| c.id == id)
            .ok_or_else(|| ConstraintStoreError::NotFound(id.to_string()))?;
        c.usage_count += 1;
        let n = c.usage_count;
        self.persist(&items)?;
        Ok(n)
    }

    /// Top `k` constraints by description similarity to `query`. With a
    /// judge, the best `2k` are reordered so judged-relevant ones come first.
    pub fn recommend(&self, query: &str, k: usize, judge: Option<&dyn Model>) -> Vec<Recommendation> {
        if k == 0 {
            return Vec::new();
        }
        let q = self.embedder.embed(query);
        let mut scored: Vec<Recommendation> = self
            .list()
            .into_iter()
            .map(|c| Recommendation {
                id: c.id.clone(),
                score: cosine(&q, &self.embedder.embed(&c.description)),
                constraint: c,
            })
            .collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
        if let Some(judge) = judge {
            scored.truncate(2 * k);
            let mut keyed: Vec<(bool, Recommendation)> = scored
                .into_iter()
                .map(|r| {
                    let req = JudgeRequest {
                        mode: JudgeMode::Relevance,
                        task: "constraint applies to the query".into(),
                        input: query.to_string(),
                        output: format!("{}: {}", r.constraint.decl, r.constraint.description),
                        seed: 0,
                    };
                    (judge.judge(&req).map(|j| j.holds).unwrap_or(false), r)
                })
                .collect();
            keyed.sort_by_key(|(relevant, _)| !*relevant);
            scored = keyed.into_iter().map(|(_, r)| r).collect();
        }
        scored.truncate(k);
        scored
    }

    /// Conflicts among stored constraints plus `extra`.
    pub fn conflicts(&self, extra: &[ConstraintDecl], judge: Option<&dyn Model>) -> Vec<Conflict> {
        let mut decls: Vec<ConstraintDecl> = self.list().iter().filter_map(|c| c.parsed().ok()).collect();
        decls.extend(extra.iter().cloned());
        detect_conflicts(&decls, judge)
    }
}
