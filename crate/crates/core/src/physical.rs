//! Enforcement implementations, cost and reliability estimation, and plan
//! selection under user thresholds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::automata::Dfa;
use crate::check::domain_mechanism;
use crate::config::{CostDefaults, DecodeKind, EngineConfig};
use crate::lang::format::{predicate_sql, stage_label, stage_sql};
use crate::lang::{
    Annotation, ConstraintClass, ConstraintDecl, DataType, DomainSpec, FailureMode, LogicalPlan,
    Matcher,
};
use crate::logical::operator_groups;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImplMode {
    Reactive,
    ProactiveMask,
    ProactiveStream,
}

impl ImplMode {
    pub fn is_proactive(self) -> bool {
        self != ImplMode::Reactive
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplCandidate {
    pub constraint_id: String,
    pub mode: ImplMode,
    /// `deterministic:<kind>` or `model:<judge>`.
    pub mechanism: String,
    pub cost: f64,
    pub precision: f64,
    pub recall: f64,
    pub confidence_capable: bool,
}

impl ImplCandidate {
    pub fn is_deterministic(&self) -> bool {
        self.mechanism.starts_with("deterministic:")
    }

    /// Mechanism without its family prefix.
    pub fn kind(&self) -> &str {
        self.mechanism.split_once(':').map_or(&self.mechanism, |(_, k)| k)
    }
}

/// What the model client offers to the planner.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Capabilities {
    pub judge: Option<String>,
    pub token_level: bool,
    pub confidence_capable: bool,
    pub decode_allowlist: Vec<DecodeKind>,
    pub infer_annotations: bool,
}

impl Capabilities {
    pub fn of(model: Option<&dyn Model>, config: &EngineConfig) -> Self {
        Capabilities {
            judge: model.map(|m| m.name().to_string()),
            token_level: model.is_some_and(|m| m.token_level()),
            confidence_capable: model.is_some_and(|m| m.confidence_capable()),
            decode_allowlist: config.decode_allowlist.clone(),
            infer_annotations: config.infer_annotations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhysicalError {
    #[error("constraint {0} needs a model judge but none is configured")]
    NoJudge(String),
    #[error("constraint {0} is GROUNDED on an operator without EXTRACTIVE or ABSTRACTIVE")]
    Unannotated(String),
    #[error("profile has no entry for constraint {0}")]
    MissingProfile(String),
    #[error("no plan meets the thresholds: {}", format_violations(.0))]
    Infeasible(Vec<ThresholdViolation>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdViolation {
    /// Constraint id, or `plan` for plan-wide limits.
    pub constraint: String,
    pub threshold: String,
    pub required: f64,
    /// Closest value any candidate reaches.
    pub best: f64,
}

fn format_violations(v: &[ThresholdViolation]) -> String {
    v.iter()
        .map(|t| {
            let cmp = if t.threshold == "max_plan_cost" { "<=" } else { ">=" };
            format!("{}: {} {cmp} {} but best is {}", t.constraint, t.threshold, t.required, t.best)
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn escape_literal(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        if "\\.+*?()|[]{}^$-".contains(c) {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// Pattern whose language is exactly the outputs a domain allows, when the
/// domain has one.
pub fn mask_pattern(spec: &DomainSpec) -> Option<String> {
    let p = match spec {
        DomainSpec::Regex { pattern } => pattern.clone(),
        DomainSpec::Type { ty, .. } => match ty {
            DataType::Int => r"^-?\d+$".into(),
            DataType::Float => r"^-?\d+(\.\d+)?$".into(),
            DataType::Bool => "^(true|false)$".into(),
            DataType::Date => r"^\d{4}-\d{2}-\d{2}$".into(),
            DataType::String => return None,
        },
        DomainSpec::ValueSet { values } if !values.is_empty() => {
            let alts: Vec<String> = values.iter().map(|v| escape_literal(v)).collect();
            format!("^(?:{})$", alts.join("|"))
        }
        DomainSpec::MaxLength { limit } if *limit >= 1 && *limit <= 1000 => {
            format!(r"^[\s\S]{{0,{}}}$", limit - 1)
        }
        _ => return None,
    };
    Dfa::from_regex(&p).ok().map(|_| p)
}

fn candidate(c: &ConstraintDecl, mode: ImplMode, mechanism: String, cost: f64, pr: f64, conf: bool) -> ImplCandidate {
    ImplCandidate {
        constraint_id: c.id.clone(),
        mode,
        mechanism,
        cost,
        precision: pr,
        recall: pr,
        confidence_capable: conf,
    }
}

/// Implementations able to enforce `c` on an operator with the given
/// annotation. Masks are offered only on prompt operators.
pub fn enumerate_impls(
    c: &ConstraintDecl,
    annotation: Annotation,
    semantic: bool,
    caps: &Capabilities,
    costs: &CostDefaults,
) -> Result<Vec<ImplCandidate>, PhysicalError> {
    let det = |kind: &str| candidate(c, ImplMode::Reactive, format!("deterministic:{kind}"), costs.deterministic, 1.0, true);
    let mask = |kind: &str| candidate(c, ImplMode::ProactiveMask, format!("deterministic:{kind}"), costs.mask, 1.0, true);
    let can_mask = |k: DecodeKind| semantic && caps.token_level && caps.decode_allowlist.contains(&k);
    let judge = || caps.judge.clone().ok_or_else(|| PhysicalError::NoJudge(c.id.clone()));
    let model = |mode: ImplMode, cost: f64| -> Result<ImplCandidate, PhysicalError> {
        let mut m = candidate(c, mode, format!("model:{}", judge()?), cost, costs.model_precision, caps.confidence_capable);
        m.recall = costs.model_recall;
        Ok(m)
    };
    let matcher_kind = |m: &Matcher| match m {
        Matcher::Literal(_) => "literal",
        Matcher::Regex(_) => "regex",
        Matcher::LiteralSet(_) => "literal-set",
        Matcher::Prompt(_) => "prompt",
    };
    Ok(match &c.class {
        ConstraintClass::Domain { spec, .. } => {
            let mut v = vec![det(domain_mechanism(spec))];
            if can_mask(DecodeKind::DomainRegex) && mask_pattern(spec).is_some() {
                v.push(mask("regex-dfa"));
            }
            v
        }
        ConstraintClass::Include(m) | ConstraintClass::Exclude(m) => match m {
            Matcher::Prompt(_) => vec![model(ImplMode::Reactive, costs.model)?],
            other => vec![det(matcher_kind(other))],
        },
        ConstraintClass::Grounded => {
            let annotation = match annotation {
                Annotation::None if caps.infer_annotations => Annotation::Abstractive,
                Annotation::None => return Err(PhysicalError::Unannotated(c.id.clone())),
                a => a,
            };
            if annotation == Annotation::Extractive {
                let mut v = vec![det("substring")];
                if can_mask(DecodeKind::GroundingExtractive) {
                    v.push(mask("suffix-automaton"));
                }
                v
            } else {
                vec![
                    model(ImplMode::Reactive, costs.model)?,
                    model(ImplMode::ProactiveStream, costs.stream)?,
                ]
            }
        }
        ConstraintClass::Sound | ConstraintClass::Relevant => vec![model(ImplMode::Reactive, costs.model)?],
        ConstraintClass::Assertion(_) => vec![det("expression")],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorProfile {
    #[serde(default)]
    pub cost: Option<f64>,
    #[serde(default = "one")]
    pub cardinality_factor: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateProfile {
    pub mode: ImplMode,
    /// Exact mechanism, or `model` for any judge.
    pub mechanism: String,
    #[serde(default)]
    pub cost: Option<f64>,
    #[serde(default)]
    pub precision: Option<f64>,
    #[serde(default)]
    pub recall: Option<f64>,
}

impl CandidateProfile {
    fn matches(&self, c: &ImplCandidate) -> bool {
        self.mode == c.mode
            && (self.mechanism == c.mechanism || (self.mechanism == "model" && c.mechanism.starts_with("model:")))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintProfile {
    #[serde(default)]
    pub candidates: Vec<CandidateProfile>,
    /// Per-attempt probability the output violates the constraint.
    #[serde(default)]
    pub violation_prob: Option<f64>,
    /// Probability a tuple passes the check; used for check ordering.
    #[serde(default)]
    pub selectivity: Option<f64>,
}

impl ConstraintProfile {
    pub fn violation(&self) -> Option<f64> {
        self.violation_prob.or(self.selectivity.map(|s| 1.0 - s))
    }

    pub fn pass_rate(&self) -> Option<f64> {
        self.selectivity.or(self.violation_prob.map(|v| 1.0 - v))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReliabilityThresholds {
    #[serde(default)]
    pub min_precision: Option<f64>,
    #[serde(default)]
    pub min_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default)]
    pub max_plan_cost: Option<f64>,
    #[serde(default)]
    pub min_precision: Option<f64>,
    #[serde(default)]
    pub min_recall: Option<f64>,
    /// Proxy mode: stochastic checks must report a confidence and pass
    /// only at or above this value.
    #[serde(default)]
    pub min_confidence: Option<f64>,
    #[serde(default)]
    pub constraints: BTreeMap<String, ReliabilityThresholds>,
}

impl Thresholds {
    fn precision_for(&self, id: &str) -> Option<f64> {
        self.constraints.get(id).and_then(|t| t.min_precision).or(self.min_precision)
    }

    fn recall_for(&self, id: &str) -> Option<f64> {
        self.constraints.get(id).and_then(|t| t.min_recall).or(self.min_recall)
    }

    /// Threshold failures of a single candidate, as `(name, required, actual)`.
    fn failures(&self, c: &ImplCandidate) -> Vec<(&'static str, f64, f64)> {
        if c.is_deterministic() {
            return Vec::new();
        }
        let mut out = Vec::new();
        if let Some(p) = self.precision_for(&c.constraint_id) {
            if c.precision < p {
                out.push(("min_precision", p, c.precision));
            }
        }
        if let Some(r) = self.recall_for(&c.constraint_id) {
            if c.recall < r {
                out.push(("min_recall", r, c.recall));
            }
        }
        if let Some(m) = self.min_confidence {
            if !c.confidence_capable {
                out.push(("min_confidence", m, 0.0));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    #[serde(default)]
    pub operators: BTreeMap<String, OperatorProfile>,
    #[serde(default)]
    pub constraints: BTreeMap<String, ConstraintProfile>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub input_cardinality: Option<f64>,
}

impl Profile {
    /// Adds default statistics for every declared constraint not already
    /// described.
    pub fn with_defaults_for(mut self, plan: &LogicalPlan, config: &EngineConfig) -> Self {
        for c in plan.constraints() {
            let e = self.constraints.entry(c.id.clone()).or_default();
            if e.violation().is_none() {
                e.selectivity = Some(config.default_selectivity);
            }
        }
        self
    }

    /// Check statistics for the logical reorder pass.
    pub fn stats(&self, config: &EngineConfig, c: &ConstraintDecl) -> crate::logical::ConstraintStats {
        let entry = self.constraints.get(&c.id);
        let cost = entry
            .and_then(|e| e.candidates.iter().filter_map(|k| k.cost).reduce(f64::min))
            .unwrap_or(config.default_cost);
        crate::logical::ConstraintStats {
            cost,
            selectivity: entry.and_then(|e| e.pass_rate()).unwrap_or(config.default_selectivity),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorEstimate {
    pub operator: String,
    pub cardinality: f64,
    pub expected_attempts: f64,
    /// Expected cost of one tuple through the operator, retries included.
    pub unit_cost: f64,
    pub cost: f64,
    /// Probability all of the operator's constraints hold on its output.
    pub reliability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintEstimate {
    pub constraint: String,
    pub mode: ImplMode,
    pub mechanism: String,
    pub expected_checks: f64,
    pub expected_retries: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanEstimate {
    pub expected_cost: f64,
    pub operators: Vec<OperatorEstimate>,
    pub constraints: Vec<ConstraintEstimate>,
}

/// Expected operator invocations when each attempt independently violates
/// with probability `v` and at most `r` retries follow the first attempt.
pub fn expected_attempts(v: f64, r: u32) -> f64 {
    (0..=r).map(|k| v.powi(k as i32)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchKind {
    Exhaustive,
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalPlan {
    pub logical: LogicalPlan,
    /// Chosen implementation per constraint id.
    pub choices: BTreeMap<String, ImplCandidate>,
    pub estimate: PlanEstimate,
    pub search: SearchKind,
}

/// Estimates cost and reliability of `plan` under the given choices.
pub fn estimate_plan(
    plan: &LogicalPlan,
    choices: &BTreeMap<String, ImplCandidate>,
    profile: &Profile,
    config: &EngineConfig,
) -> Result<PlanEstimate, PhysicalError> {
    let mut card = profile.input_cardinality.unwrap_or(config.input_cardinality);
    let mut total = 0.0;
    let mut operators = Vec::new();
    let mut constraints = Vec::new();
    for g in operator_groups(plan) {
        let stage = &plan.stages[g.stage];
        let key = stage.key(g.stage);
        let op = profile.operators.get(&key);
        let op_cost = op.and_then(|o| o.cost).unwrap_or(if stage.is_semantic() {
            config.costs.semantic_operator
        } else {
            config.costs.deterministic_operator
        });
        let mut check_cost = 0.0;
        let mut reach = 1.0;
        let mut adherence = 1.0;
        let mut all_pass = 1.0;
        let mut max_retry = 0;
        let mut per = Vec::new();
        for c in g.constraints(plan) {
            let choice = choices
                .get(&c.id)
                .ok_or_else(|| PhysicalError::MissingProfile(c.id.clone()))?;
            let entry = profile.constraints.get(&c.id);
            let v = match entry.and_then(|e| e.violation()) {
                Some(v) => v,
                None if matches!(c.origin, crate::lang::Origin::Implicit) => 0.0,
                None => return Err(PhysicalError::MissingProfile(c.id.clone())),
            };
            let v = if choice.mode.is_proactive() { 0.0 } else { v };
            let s = entry.and_then(|e| e.pass_rate()).map_or(1.0 - v, |s| if choice.mode.is_proactive() { 1.0 } else { s });
            let r = if stage.is_semantic() { config.retry_of(c) } else { 0 };
            check_cost += reach * choice.cost;
            per.push((c.id.clone(), choice, reach, v, r));
            reach *= s;
            all_pass *= 1.0 - v;
            max_retry = max_retry.max(r);
            if config.mode_of(c) == FailureMode::Continue {
                adherence *= 1.0 - v.powi(r as i32 + 1);
            }
        }
        let attempts = if stage.is_semantic() {
            expected_attempts(1.0 - all_pass, max_retry)
        } else {
            1.0
        };
        let unit = (op_cost + check_cost) * attempts;
        total += unit * card;
        for (id, choice, reach, v, r) in per {
            constraints.push(ConstraintEstimate {
                constraint: id,
                mode: choice.mode,
                mechanism: choice.mechanism.clone(),
                expected_checks: card * attempts * reach,
                expected_retries: card * (expected_attempts(v, r) - 1.0),
            });
        }
        operators.push(OperatorEstimate {
            operator: key,
            cardinality: card,
            expected_attempts: attempts,
            unit_cost: unit,
            cost: unit * card,
            reliability: adherence,
        });
        card *= op.map_or(1.0, |o| o.cardinality_factor);
    }
    Ok(PlanEstimate {
        expected_cost: total,
        operators,
        constraints,
    })
}

/// Candidates per constraint with profile overrides applied, in plan order.
pub fn candidate_table(
    plan: &LogicalPlan,
    profile: &Profile,
    caps: &Capabilities,
    config: &EngineConfig,
) -> Result<Vec<(String, usize, Vec<ImplCandidate>)>, PhysicalError> {
    let mut out = Vec::new();
    for g in operator_groups(plan) {
        let stage = &plan.stages[g.stage];
        for c in g.constraints(plan) {
            let mut cands = enumerate_impls(c, stage.annotation(), stage.is_semantic(), caps, &config.costs)?;
            if let Some(entry) = profile.constraints.get(&c.id) {
                for k in &mut cands {
                    if let Some(p) = entry.candidates.iter().find(|p| p.matches(k)) {
                        k.cost = p.cost.unwrap_or(k.cost);
                        if !k.is_deterministic() {
                            k.precision = p.precision.unwrap_or(k.precision);
                            k.recall = p.recall.unwrap_or(k.recall);
                        }
                    }
                }
            }
            out.push((c.id.clone(), g.stage, cands));
        }
    }
    Ok(out)
}

const EXHAUSTIVE_LIMIT: f64 = 1e4;

/// Picks the cheapest assignment of implementations meeting the thresholds.
pub fn select_plan(
    plan: &LogicalPlan,
    profile: &Profile,
    caps: &Capabilities,
    config: &EngineConfig,
) -> Result<PhysicalPlan, PhysicalError> {
    let table = candidate_table(plan, profile, caps, config)?;
    let th = &profile.thresholds;

    let mut violations = Vec::new();
    let feasible: Vec<Vec<usize>> = table
        .iter()
        .map(|(id, _, cands)| {
            let ok: Vec<usize> = (0..cands.len()).filter(|&i| th.failures(&cands[i]).is_empty()).collect();
            if ok.is_empty() {
                let mut best: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
                for f in cands.iter().flat_map(|k| th.failures(k)) {
                    let e = best.entry(f.0).or_insert((f.1, f64::NEG_INFINITY));
                    e.1 = e.1.max(f.2);
                }
                for (name, (required, b)) in best {
                    violations.push(ThresholdViolation {
                        constraint: id.clone(),
                        threshold: name.to_string(),
                        required,
                        best: b,
                    });
                }
            }
            ok
        })
        .collect();
    if !violations.is_empty() {
        return Err(PhysicalError::Infeasible(violations));
    }

    let build = |assign: &[usize]| -> BTreeMap<String, ImplCandidate> {
        table
            .iter()
            .zip(assign)
            .map(|((id, _, cands), &i)| (id.clone(), cands[i].clone()))
            .collect()
    };
    // At most one mask can steer a single decode.
    let masks_ok = |assign: &[usize]| {
        let mut seen = std::collections::HashSet::new();
        table
            .iter()
            .zip(assign)
            .all(|((_, stage, cands), &i)| cands[i].mode != ImplMode::ProactiveMask || seen.insert(*stage))
    };

    let space: f64 = feasible.iter().map(|f| f.len() as f64).product();
    let (assign, search) = if space <= EXHAUSTIVE_LIMIT {
        let mut best: Option<(f64, Vec<usize>)> = None;
        // Mixed-radix counting visits assignments in lexicographic order.
        for n in 0..space as usize {
            let mut rest = n;
            let mut assign = vec![0; feasible.len()];
            for k in (0..feasible.len()).rev() {
                assign[k] = feasible[k][rest % feasible[k].len()];
                rest /= feasible[k].len();
            }
            if !masks_ok(&assign) {
                continue;
            }
            let cost = estimate_plan(plan, &build(&assign), profile, config)?.expected_cost;
            if best.as_ref().is_none_or(|(b, _)| cost < *b) {
                best = Some((cost, assign));
            }
        }
        (best.map(|b| b.1).unwrap_or_default(), SearchKind::Exhaustive)
    } else {
        let mut masked = std::collections::HashSet::new();
        let assign = table
            .iter()
            .zip(&feasible)
            .map(|((_, stage, cands), ok)| {
                let pick = ok
                    .iter()
                    .copied()
                    .filter(|&i| cands[i].mode != ImplMode::ProactiveMask || !masked.contains(stage))
                    .min_by(|&a, &b| cands[a].cost.total_cmp(&cands[b].cost))
                    .expect("a reactive candidate always exists");
                if cands[pick].mode == ImplMode::ProactiveMask {
                    masked.insert(*stage);
                }
                pick
            })
            .collect();
        (assign, SearchKind::Greedy)
    };

    let choices = build(&assign);
    let estimate = estimate_plan(plan, &choices, profile, config)?;
    if let Some(max) = th.max_plan_cost {
        if estimate.expected_cost > max {
            return Err(PhysicalError::Infeasible(vec![ThresholdViolation {
                constraint: "plan".into(),
                threshold: "max_plan_cost".into(),
                required: max,
                best: estimate.expected_cost,
            }]));
        }
    }
    Ok(PhysicalPlan {
        logical: plan.clone(),
        choices,
        estimate,
        search,
    })
}

fn choice_note(c: &ImplCandidate) -> String {
    let class = if c.is_deterministic() {
        "deterministic".to_string()
    } else {
        format!("stochastic:{}", c.kind())
    };
    let mode = if c.mode.is_proactive() { "proactive" } else { "reactive" };
    let kind = if c.is_deterministic() { c.kind() } else { "judge" };
    let imp = match c.mode {
        ImplMode::Reactive => kind.to_string(),
        ImplMode::ProactiveMask => format!("mask/{kind}"),
        ImplMode::ProactiveStream => format!("stream/{kind}"),
    };
    format!("[{class}] [{mode}] impl={imp} cost={}", c.cost)
}

/// Logical plan text with each check annotated by its chosen implementation.
pub fn format_physical(p: &PhysicalPlan) -> String {
    let mut out = String::new();
    for (i, stage) in p.logical.stages.iter().enumerate() {
        let prefix = if i == 0 { "" } else { "|> " };
        let _ = write!(out, "{prefix}{}  -- {}", stage_sql(stage), stage_label(stage));
        if let Some(c) = stage.constraint().and_then(|c| p.choices.get(&c.id)) {
            let _ = write!(out, " {}", choice_note(c));
        }
        out.push('\n');
        for c in &stage.implicit {
            if let Some(k) = p.choices.get(&c.id) {
                let _ = writeln!(out, "--   {} {} {}", c.id, predicate_sql(c), choice_note(k));
            }
        }
    }
    let search = match p.search {
        SearchKind::Exhaustive => "exhaustive",
        SearchKind::Greedy => "greedy",
    };
    let _ = writeln!(out, "-- estimated cost: {:.4} (search: {search})", p.estimate.expected_cost);
    out
}
