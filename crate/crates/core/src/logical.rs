//! Logical rewrites: constraint placement, lineage expansion, default
//! relevance, prompt injection and per-operator check ordering.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::lang::{
    expr_sql, Annotation, ConstraintClass, ConstraintDecl, DomainSpec, LogicalPlan, Matcher,
    Origin, Stage, StageKind, Target,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("constraint {constraint} targets `{target}`, which no stage produces")]
    Dangling { constraint: String, target: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintStats {
    pub cost: f64,
    /// Probability that a tuple satisfies the constraint.
    pub selectivity: f64,
}

/// An operator stage and the assert stages directly after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorGroup {
    pub stage: usize,
    pub asserts: Vec<usize>,
}

impl OperatorGroup {
    /// Implicit constraints of the operator, then its asserts in order.
    pub fn constraints<'p>(&self, plan: &'p LogicalPlan) -> Vec<&'p ConstraintDecl> {
        let mut out: Vec<&ConstraintDecl> = plan.stages[self.stage].implicit.iter().collect();
        out.extend(self.asserts.iter().filter_map(|&i| plan.stages[i].constraint()));
        out
    }
}

pub fn operator_groups(plan: &LogicalPlan) -> Vec<OperatorGroup> {
    let mut groups: Vec<OperatorGroup> = Vec::new();
    for (i, s) in plan.stages.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if s.is_assert() => g.asserts.push(i),
            _ => groups.push(OperatorGroup {
                stage: i,
                asserts: Vec::new(),
            }),
        }
    }
    groups
}

/// Tracks which stage last wrote each attribute while walking a plan.
#[derive(Default, Clone)]
struct Writers {
    attrs: HashMap<String, usize>,
    aliases: HashMap<String, usize>,
}

impl Writers {
    fn apply(&mut self, index: usize, stage: &Stage) {
        match &stage.kind {
            StageKind::Scan { .. } => {
                for n in stage.schema.names() {
                    self.attrs.insert(n.to_string(), index);
                }
            }
            StageKind::Set { attr, .. } => {
                self.attrs.insert(attr.clone(), index);
            }
            StageKind::Extend { out, .. } => {
                self.attrs.insert(out.clone(), index);
            }
            StageKind::Aggregate { .. } => {
                self.attrs.clear();
                for n in stage.schema.names() {
                    self.attrs.insert(n.to_string(), index);
                }
            }
            StageKind::Where { alias, .. } => {
                if let Some(a) = alias {
                    self.aliases.insert(a.clone(), index);
                }
            }
            StageKind::Assert(_) => {}
        }
    }

    /// Earliest stage after which every input of `c` is available.
    fn anchor(&self, c: &ConstraintDecl) -> Result<usize, PlanError> {
        let dangling = |t: &str| PlanError::Dangling {
            constraint: c.id.clone(),
            target: t.to_string(),
        };
        let mut at = match &c.target {
            Target::Operator(a) => *self.aliases.get(a).ok_or_else(|| dangling(a))?,
            Target::Attr(a) => *self.attrs.get(a).ok_or_else(|| dangling(a))?,
        };
        let mut refs = crate::lang::constraint_attributes(c);
        if let ConstraintClass::Include(Matcher::Prompt(p)) | ConstraintClass::Exclude(Matcher::Prompt(p)) = &c.class {
            refs.extend(p.inputs());
        }
        for r in refs {
            at = at.max(*self.attrs.get(&r).ok_or_else(|| dangling(&r))?);
        }
        Ok(at)
    }
}

/// Rebuilds the plan from operator stages, placing each `(anchor, decl)`
/// at the end of its anchor's assert block, in the given order.
fn assemble(operators: Vec<(usize, Stage)>, asserts: Vec<(usize, ConstraintDecl)>, schema_of: &[Stage]) -> LogicalPlan {
    let mut stages = Vec::new();
    for (i, s) in operators {
        stages.push(s);
        for (_, c) in asserts.iter().filter(|(a, _)| *a == i) {
            stages.push(Stage {
                kind: StageKind::Assert(c.clone()),
                schema: schema_of[i].schema.clone(),
                implicit: Vec::new(),
            });
        }
    }
    LogicalPlan { stages }
}

/// Moves every assert directly after the stage that produces what it reads.
pub fn pushdown_constraints(plan: &LogicalPlan) -> Result<LogicalPlan, PlanError> {
    let mut w = Writers::default();
    let mut operators = Vec::new();
    let mut asserts = Vec::new();
    for (i, s) in plan.stages.iter().enumerate() {
        match &s.kind {
            StageKind::Assert(c) => asserts.push((w.anchor(c)?, c.clone())),
            _ => {
                w.apply(i, s);
                operators.push((i, s.clone()));
            }
        }
    }
    Ok(assemble(operators, asserts, &plan.stages))
}

fn split(plan: &LogicalPlan) -> (Vec<(usize, Stage)>, Vec<(usize, ConstraintDecl)>) {
    let mut operators = Vec::new();
    let mut asserts = Vec::new();
    for g in operator_groups(plan) {
        operators.push((g.stage, plan.stages[g.stage].clone()));
        for a in g.asserts {
            asserts.push((g.stage, plan.stages[a].constraint().expect("assert stage").clone()));
        }
    }
    (operators, asserts)
}

fn unique_id(base: String, used: &mut HashSet<String>) -> String {
    let mut id = base.clone();
    let mut n = 2;
    while used.contains(&id) {
        id = format!("{base}{n}");
        n += 1;
    }
    used.insert(id.clone());
    id
}

fn generating_prompt_inputs(stage: &Stage) -> Option<Vec<String>> {
    match &stage.kind {
        StageKind::Set { .. } | StageKind::Extend { .. } | StageKind::Aggregate { .. } => {
            stage.prompt().map(|p| p.inputs())
        }
        _ => None,
    }
}

/// Adds a grounding check after every generating stage an existing
/// grounding constraint's attribute derives from.
pub fn expand_grounding_lineage(plan: &LogicalPlan) -> LogicalPlan {
    let (operators, mut asserts) = split(plan);
    let mut used: HashSet<String> = plan.constraints().map(|c| c.id.clone()).collect();
    // Writers visible just before each stage.
    let mut before: Vec<Writers> = Vec::with_capacity(plan.stages.len());
    let mut w = Writers::default();
    for (i, s) in plan.stages.iter().enumerate() {
        before.push(w.clone());
        w.apply(i, s);
    }
    let grounded_key = |anchor: usize, c: &ConstraintDecl| -> Option<(String, usize)> {
        match (&c.class, &c.target) {
            (ConstraintClass::Grounded, Target::Attr(a)) => Some((a.clone(), anchor)),
            _ => None,
        }
    };
    let mut have: HashSet<(String, usize)> = asserts.iter().filter_map(|(a, c)| grounded_key(*a, c)).collect();
    let roots: Vec<(usize, ConstraintDecl)> = asserts
        .iter()
        .filter(|(_, c)| matches!(c.class, ConstraintClass::Grounded))
        .cloned()
        .collect();
    for (anchor, root) in roots {
        let Target::Attr(attr) = &root.target else { continue };
        let mut stack = vec![(attr.clone(), anchor)];
        let mut seen = HashSet::new();
        while let Some((a, producer)) = stack.pop() {
            if !seen.insert((a.clone(), producer)) {
                continue;
            }
            let stage = &plan.stages[producer];
            if matches!(stage.kind, StageKind::Scan { .. }) {
                continue;
            }
            if generating_prompt_inputs(stage).is_some() && !have.contains(&(a.clone(), producer)) {
                have.insert((a.clone(), producer));
                let from = match &root.origin {
                    Origin::Lineage { from } => from.clone(),
                    _ => root.id.clone(),
                };
                asserts.push((
                    producer,
                    ConstraintDecl {
                        id: unique_id(format!("{from}.{a}"), &mut used),
                        target: Target::Attr(a.clone()),
                        class: ConstraintClass::Grounded,
                        retry: root.retry,
                        on_fail: root.on_fail,
                        origin: Origin::Lineage { from },
                    },
                ));
            }
            for input in stage.inputs() {
                if let Some(&p) = before[producer].attrs.get(&input) {
                    stack.push((input, p));
                }
            }
        }
    }
    assemble(operators, asserts, &plan.stages)
}

/// Adds a relevance check for every prompt-generated attribute lacking one.
pub fn attach_default_relevance(plan: &LogicalPlan, enabled: bool) -> LogicalPlan {
    if !enabled {
        return plan.clone();
    }
    let (operators, mut asserts) = split(plan);
    let mut used: HashSet<String> = plan.constraints().map(|c| c.id.clone()).collect();
    for (i, s) in &operators {
        let (Some(attr), true) = (s.produces(), generating_prompt_inputs(s).is_some()) else {
            continue;
        };
        let covered = asserts.iter().any(|(a, c)| {
            a == i && matches!(c.class, ConstraintClass::Relevant) && c.target.name() == attr
        });
        if !covered {
            asserts.push((
                *i,
                ConstraintDecl {
                    id: unique_id(format!("{attr}.relevant"), &mut used),
                    target: Target::Attr(attr.to_string()),
                    class: ConstraintClass::Relevant,
                    retry: None,
                    on_fail: None,
                    origin: Origin::DefaultRelevance,
                },
            ));
        }
    }
    // Keep each block's declared constraints ahead of the added ones.
    asserts.sort_by_key(|(a, _)| *a);
    assemble(operators, asserts, &plan.stages)
}

/// Natural-language rendering of a constraint for operator prompts.
pub fn render_constraint(c: &ConstraintDecl, annotation: Annotation) -> String {
    let m = |m: &Matcher| match m {
        Matcher::Literal(l) => format!("\"{l}\""),
        Matcher::Regex(r) => format!("a match for regex {r}"),
        Matcher::LiteralSet(s) => format!("any of: {}", s.join(", ")),
        Matcher::Prompt(p) => p.raw_text.clone(),
    };
    match &c.class {
        ConstraintClass::Domain { spec, .. } => match spec {
            DomainSpec::Type { ty, .. } => format!("output must be a valid {ty} value"),
            DomainSpec::Regex { pattern } => format!("output must match regex {pattern}"),
            DomainSpec::Range { lo, hi } => format!("output must be between {lo} and {hi}"),
            DomainSpec::MaxLength { limit } => format!("output must be shorter than {limit} characters"),
            DomainSpec::ValueSet { values } => format!("output must be one of: {}", values.join(", ")),
        },
        ConstraintClass::Include(x) => format!("output must include {}", m(x)),
        ConstraintClass::Exclude(x) => format!("output must not include {}", m(x)),
        ConstraintClass::Grounded => match annotation {
            Annotation::Extractive => "output must be copied verbatim from the input".to_string(),
            _ => "output must be factually consistent with the input".to_string(),
        },
        ConstraintClass::Sound => {
            "list the premises taken from the input and the reasoning steps before answering".to_string()
        }
        ConstraintClass::Relevant => "output must be relevant to the task".to_string(),
        ConstraintClass::Assertion(e) => format!("the following must hold: {}", expr_sql(e)),
    }
}

/// Replaces each semantic operator's constraints section with renderings of
/// the constraints attached to it, in order.
pub fn inject_constraint_prompts(plan: &LogicalPlan) -> LogicalPlan {
    let mut out = plan.clone();
    for g in operator_groups(plan) {
        let annotation = plan.stages[g.stage].annotation();
        let text: Vec<String> = g
            .constraints(plan)
            .into_iter()
            .map(|c| render_constraint(c, annotation))
            .collect();
        if let Some(p) = out.stages[g.stage].prompt_mut() {
            p.instructions = text;
        }
    }
    out
}

/// Sort key of a check under short-circuit evaluation.
pub fn rank(s: ConstraintStats) -> f64 {
    if s.selectivity >= 1.0 {
        f64::INFINITY
    } else {
        s.cost / (1.0 - s.selectivity)
    }
}

/// Expected cost of running checks in order, stopping at the first violation.
pub fn expected_check_cost(order: &[ConstraintStats]) -> f64 {
    let mut reach = 1.0;
    let mut total = 0.0;
    for s in order {
        total += reach * s.cost;
        reach *= s.selectivity;
    }
    total
}

/// Orders every assert block by rank; ties keep declaration order.
pub fn reorder_constraints(plan: &LogicalPlan, stats: &dyn Fn(&ConstraintDecl) -> ConstraintStats) -> LogicalPlan {
    let mut out = plan.clone();
    for g in operator_groups(plan) {
        let mut block: Vec<Stage> = g.asserts.iter().map(|&i| plan.stages[i].clone()).collect();
        block.sort_by(|a, b| {
            let ra = rank(stats(a.constraint().expect("assert")));
            let rb = rank(stats(b.constraint().expect("assert")));
            ra.total_cmp(&rb)
        });
        for (slot, stage) in g.asserts.iter().zip(block) {
            out.stages[*slot] = stage;
        }
    }
    out
}

/// Statistics lookup falling back to configured defaults.
pub fn default_stats(config: &EngineConfig) -> impl Fn(&ConstraintDecl) -> ConstraintStats + '_ {
    move |_| ConstraintStats {
        cost: config.default_cost,
        selectivity: config.default_selectivity,
    }
}

/// Runs every rewrite in order.
pub fn optimize(
    plan: &LogicalPlan,
    config: &EngineConfig,
    stats: &dyn Fn(&ConstraintDecl) -> ConstraintStats,
) -> Result<LogicalPlan, PlanError> {
    let p = pushdown_constraints(plan)?;
    let p = expand_grounding_lineage(&p);
    let p = attach_default_relevance(&p, config.default_relevance);
    let p = reorder_constraints(&p, stats);
    Ok(inject_constraint_prompts(&p))
}
