//! Stage-by-stage execution with per-tuple constraint enforcement.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rayon::prelude::*;

use super::cache::ExemplarCache;
use super::{EngineError, Relation, Tuple};
use crate::automata::{Automaton, Dfa, Segmenter, StreamEvent, StreamGuard, SuffixAutomaton, ViolationPolicy};
use crate::check::{self, CheckError, CheckOutcome, Verdict};
use crate::config::EngineConfig;
use crate::eval::{eval_expr, EvalEnv};
use crate::lang::{
    Annotation, ConstraintClass, ConstraintDecl, DataType, FailureMode, LogicalPlan, Operand,
    PromptTemplate, Stage, StageKind, Target,
};
use crate::logical::{operator_groups, render_constraint};
use crate::model::{parse_contract, Contract, Cot, JudgeMode, JudgeRequest, Model, ModelError, ModelRequest, ModelResponse};
use crate::obs::{
    ConstraintInvocationRecord, ImplTag, LineageRecord, OperatorInvocationRecord, RunWriter,
    Snapshot, StageCounts,
};
use crate::physical::{mask_pattern, ImplCandidate, ImplMode};
use crate::util::{now_utc, stable_hash};
use crate::value::Value;

pub(crate) struct Ctx<'a> {
    pub config: &'a EngineConfig,
    pub model: &'a dyn Model,
    pub seed: u64,
    pub min_confidence: Option<f64>,
    pub env: EvalEnv,
    pub choices: &'a BTreeMap<String, ImplCandidate>,
}

/// A check as the attempt loop sees it. Output parse failures use a
/// synthetic entry without a declaration.
#[derive(Clone)]
struct CheckSpec<'a> {
    id: String,
    decl: Option<&'a ConstraintDecl>,
    retry: u32,
    mode: FailureMode,
    description: String,
}

#[derive(Clone)]
enum MaskSpec {
    Regex(Arc<Dfa>),
    Source,
}

enum Body<'a> {
    Scan,
    ExprMap(&'a crate::lang::Expr),
    ExprFilter(&'a crate::lang::Expr),
    Prompt(&'a PromptTemplate),
}

struct Operator<'a> {
    key: String,
    stage: &'a Stage,
    body: Body<'a>,
    /// Attribute written, if any.
    produces: Option<String>,
    annotation: Annotation,
    contract: Contract,
    checks: Vec<CheckSpec<'a>>,
    mask: Option<(String, MaskSpec)>,
    stream: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Disposition {
    Keep,
    Ignored,
    Aborted,
}

/// Everything one tuple (or group) produced at one stage.
struct Outcome {
    value: Option<Value>,
    flags: Vec<String>,
    disposition: Disposition,
    ops: Vec<OperatorInvocationRecord>,
    checks: Vec<ConstraintInvocationRecord>,
    touched: Vec<String>,
    accepted: Option<(String, String)>,
    error: Option<EngineError>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            value: None,
            flags: Vec::new(),
            disposition: Disposition::Keep,
            ops: Vec::new(),
            checks: Vec::new(),
            touched: Vec::new(),
            accepted: None,
            error: None,
        }
    }
}

fn impl_tag(choice: Option<&ImplCandidate>) -> ImplTag {
    match choice {
        Some(c) => ImplTag {
            deterministic: c.is_deterministic(),
            mode: c.mode,
            mechanism: c.mechanism.clone(),
        },
        None => ImplTag {
            deterministic: true,
            mode: ImplMode::Reactive,
            mechanism: "deterministic:parse".into(),
        },
    }
}

fn operator<'a>(plan: &'a LogicalPlan, index: usize, asserts: &[usize], ctx: &Ctx) -> Result<Operator<'a>, EngineError> {
    let stage = &plan.stages[index];
    let key = stage.key(index);
    let (body, produces, ty) = match &stage.kind {
        StageKind::Scan { .. } => (Body::Scan, None, None),
        StageKind::Set { attr, value } => {
            let ty = stage.schema.get(attr).and_then(|c| c.ty);
            let body = match value {
                Operand::Expr(e) => Body::ExprMap(e),
                Operand::Prompt(p) => Body::Prompt(p),
            };
            (body, Some(attr.clone()), ty)
        }
        StageKind::Extend { value, out, ty, .. } => {
            let body = match value {
                Operand::Expr(e) => Body::ExprMap(e),
                Operand::Prompt(p) => Body::Prompt(p),
            };
            (body, Some(out.clone()), *ty)
        }
        StageKind::Where { predicate, .. } => match predicate {
            Operand::Expr(e) => (Body::ExprFilter(e), None, None),
            Operand::Prompt(p) => (Body::Prompt(p), None, Some(DataType::Bool)),
        },
        StageKind::Aggregate { prompt, out, ty, .. } => (Body::Prompt(prompt), Some(out.clone()), *ty),
        StageKind::Assert(_) => unreachable!("asserts belong to operator groups"),
    };
    let mut decls: Vec<&ConstraintDecl> = stage.implicit.iter().collect();
    decls.extend(asserts.iter().filter_map(|&i| plan.stages[i].constraint()));
    let annotation = match stage.annotation() {
        Annotation::None if ctx.config.infer_annotations => Annotation::Abstractive,
        a => a,
    };
    let is_filter = matches!(stage.kind, StageKind::Where { .. });
    let contract = match (is_filter, ty) {
        (true, _) if decls.iter().any(|c| matches!(c.class, ConstraintClass::Sound)) => Contract::BoolCot,
        (true, _) => Contract::Bool,
        (false, Some(t)) => Contract::Typed(t),
        (false, None) => Contract::Text,
    };
    let mut mask = None;
    let mut stream = None;
    for c in &decls {
        match ctx.choices.get(&c.id).map(|k| k.mode) {
            Some(ImplMode::ProactiveMask) if mask.is_none() && matches!(body, Body::Prompt(_)) => {
                let spec = match &c.class {
                    ConstraintClass::Domain { spec, .. } => mask_pattern(spec)
                        .and_then(|p| Dfa::from_regex(&p).ok())
                        .map(|d| MaskSpec::Regex(Arc::new(d))),
                    ConstraintClass::Grounded => Some(MaskSpec::Source),
                    _ => None,
                };
                if let Some(s) = spec {
                    mask = Some((c.id.clone(), s));
                }
            }
            Some(ImplMode::ProactiveStream) if stream.is_none() => stream = Some(c.id.clone()),
            _ => {}
        }
    }
    let checks = decls
        .iter()
        .map(|c| CheckSpec {
            id: c.id.clone(),
            decl: Some(c),
            retry: ctx.config.retry_of(c),
            mode: ctx.config.mode_of(c),
            description: render_constraint(c, annotation),
        })
        .collect();
    Ok(Operator {
        key,
        stage,
        body,
        produces,
        annotation,
        contract,
        checks,
        mask,
        stream,
    })
}

/// Output parse failures count against the operator's type constraint when
/// it has one.
fn parse_spec<'a>(op: &Operator<'a>, ctx: &Ctx) -> CheckSpec<'a> {
    if let Some(c) = op.stage.implicit.first().and_then(|t| op.checks.iter().find(|c| c.id == t.id)) {
        return c.clone();
    }
    let id = format!("{}.type", op.key);
    let what = match op.contract {
        Contract::Typed(t) => format!("a valid {t} value"),
        Contract::Bool => "true or false".into(),
        Contract::BoolCot => "premises, steps and a true or false answer".into(),
        Contract::Text => "text".into(),
    };
    CheckSpec {
        id,
        decl: None,
        retry: ctx.config.default_retry,
        mode: ctx.config.default_failure_mode,
        description: format!("output must be {what}"),
    }
}

fn parse_output(text: &str, contract: Contract) -> Result<(Value, Option<Cot>), String> {
    match contract {
        Contract::Text => Ok((Value::Text(text.to_string()), None)),
        Contract::Typed(t) => Value::parse_as(text, t)
            .map(|v| (v, None))
            .ok_or_else(|| format!("`{}` is not a valid {t}", text.chars().take(80).collect::<String>())),
        Contract::Bool | Contract::BoolCot => {
            let (cot, answer) = parse_contract(text, contract)?;
            let answer = answer.ok_or_else(|| format!("`{}` is not true or false", text.chars().take(80).collect::<String>()))?;
            Ok((Value::Bool(answer), cot))
        }
    }
}

fn invoke(model: &dyn Model, req: &ModelRequest, mask: Option<&dyn Automaton>) -> Result<ModelResponse, ModelError> {
    let call = || match mask {
        Some(m) => model.complete_constrained(req, m),
        None => model.complete(req),
    };
    match call() {
        Err(e) if e.is_transport() => call(),
        r => r,
    }
}

/// State shared by the checks of one attempt.
struct Attempt<'t> {
    tuple_id: &'t str,
    attempt: u32,
    values: &'t BTreeMap<String, Value>,
    output: Option<&'t Value>,
    source: &'t str,
    task: &'t str,
    cot: Option<&'t Cot>,
}

fn run_check(ctx: &Ctx, op: &Operator, c: &ConstraintDecl, a: &Attempt) -> Result<(CheckOutcome, Value), CheckError> {
    let target = match &c.target {
        Target::Attr(name) => a.values.get(name).cloned().unwrap_or(Value::Null),
        Target::Operator(_) => a.output.cloned().unwrap_or(Value::Null),
    };
    let judge = Some(ctx.model);
    let seed = stable_hash(&[
        ctx.seed.to_string(),
        op.key.clone(),
        a.tuple_id.to_string(),
        c.id.clone(),
        a.attempt.to_string(),
    ]);
    let lookup = |n: &str| a.values.get(n).cloned();
    let outcome = match &c.class {
        ConstraintClass::Domain { attr, spec, .. } => {
            check::check_domain(&a.values.get(attr).cloned().unwrap_or(Value::Null), spec)?
        }
        ConstraintClass::Include(m) | ConstraintClass::Exclude(m) => {
            let include = matches!(c.class, ConstraintClass::Include(_));
            let render = |p: &PromptTemplate| p.render(|n| lookup(n).map(|v| v.render()).unwrap_or_default());
            check::check_ie(&target, m, include, judge, &render, seed)?
        }
        ConstraintClass::Grounded => {
            if op.annotation == Annotation::Extractive {
                check::check_grounding_extractive(&target, a.source, ctx.config.normalize_whitespace)
            } else {
                check::check_grounding_abstractive(&target, a.source, judge, seed)?
            }
        }
        ConstraintClass::Sound => check::check_soundness(a.source, a.cot, judge, seed)?,
        ConstraintClass::Relevant => check::check_relevance(a.task, a.source, &target, judge, seed)?,
        ConstraintClass::Assertion(e) => check::eval_assertion(e, &lookup, &ctx.env)?,
    };
    Ok((outcome, target))
}

fn uses_source(c: &ConstraintDecl) -> bool {
    matches!(c.class, ConstraintClass::Grounded | ConstraintClass::Sound | ConstraintClass::Relevant)
}

#[allow(clippy::too_many_arguments)]
fn constraint_record(
    ctx: &Ctx,
    op: &Operator,
    spec: &CheckSpec,
    a: &Attempt,
    checked: &Value,
    outcome: &CheckOutcome,
    stochastic: bool,
) -> ConstraintInvocationRecord {
    let choice = ctx.choices.get(&spec.id);
    ConstraintInvocationRecord {
        invocation_id: String::new(),
        seq: 0,
        run_id: String::new(),
        constraint_id: spec.id.clone(),
        class: spec.decl.map_or(crate::lang::ClassKind::Domain, |d| d.class.kind()),
        description: spec.description.clone(),
        operator: op.key.clone(),
        tuple_id: a.tuple_id.to_string(),
        attempt: a.attempt,
        input: Snapshot::of(&checked.render()),
        source: spec.decl.filter(|d| uses_source(d)).map(|_| Snapshot::of(a.source)),
        predicted_label: outcome.verdict,
        confidence: stochastic.then_some(outcome.confidence),
        true_label: None,
        implementation: impl_tag(choice.filter(|_| spec.decl.is_some())),
        feedback: (!outcome.feedback.is_empty()).then(|| outcome.feedback.clone()),
        cost: outcome.cost + choice.filter(|k| k.is_deterministic()).map_or(0.0, |k| k.cost),
        timestamp: now_utc(),
    }
}

/// Runs `checks[from..]` in order, stopping at the first violation. Returns
/// the index of the violated check and its feedback.
fn run_checks(
    ctx: &Ctx,
    op: &Operator,
    a: &Attempt,
    from: usize,
    skip: Option<&str>,
    out: &mut Outcome,
) -> Result<Option<(usize, String)>, CheckError> {
    for (i, spec) in op.checks.iter().enumerate().skip(from) {
        let Some(decl) = spec.decl else { continue };
        if skip == Some(spec.id.as_str()) {
            continue;
        }
        let (mut outcome, checked) = run_check(ctx, op, decl, a)?;
        let stochastic = outcome.mechanism.starts_with("judge:");
        if stochastic && outcome.passed() {
            if let Some(min) = ctx.min_confidence {
                if outcome.confidence < min {
                    outcome.verdict = Verdict::Violation;
                    outcome.feedback = format!("judge confidence {:.3} is below {min}", outcome.confidence);
                }
            }
        }
        out.checks.push(constraint_record(ctx, op, spec, a, &checked, &outcome, stochastic));
        if !outcome.passed() {
            return Ok(Some((i, outcome.feedback)));
        }
    }
    Ok(None)
}

/// Applies the failure mode of an exhausted violation; for CONTINUE the
/// checks after it still run, without retries.
fn settle(ctx: &Ctx, op: &Operator, a: &Attempt, spec: &CheckSpec, index: Option<usize>, out: &mut Outcome) -> Result<(), CheckError> {
    match spec.mode {
        FailureMode::Ignore => out.disposition = Disposition::Ignored,
        FailureMode::Abort => out.disposition = Disposition::Aborted,
        FailureMode::Continue => {
            out.flags.push(spec.id.clone());
            let Some(mut next) = index.map(|i| i + 1) else { return Ok(()) };
            while let Some((i, _)) = run_checks(ctx, op, a, next, None, out)? {
                let s = &op.checks[i];
                match s.mode {
                    FailureMode::Continue => out.flags.push(s.id.clone()),
                    FailureMode::Ignore => {
                        out.disposition = Disposition::Ignored;
                        return Ok(());
                    }
                    FailureMode::Abort => {
                        out.disposition = Disposition::Aborted;
                        return Ok(());
                    }
                }
                next = i + 1;
            }
        }
    }
    Ok(())
}

fn check_failure(e: CheckError, op: &Operator) -> EngineError {
    EngineError::Check {
        operator: op.key.clone(),
        message: e.to_string(),
    }
}

/// Deterministic operators and scans: one evaluation, no retries.
fn run_deterministic(ctx: &Ctx, op: &Operator, tuple_id: &str, values: &BTreeMap<String, Value>) -> Outcome {
    let mut out = Outcome::new();
    let lookup = |n: &str| values.get(n).cloned();
    let produced = match &op.body {
        Body::ExprMap(e) | Body::ExprFilter(e) => match eval_expr(e, &lookup, &ctx.env) {
            Ok(v) => Some(v),
            Err(e) => {
                out.error = Some(EngineError::Check {
                    operator: op.key.clone(),
                    message: e.to_string(),
                });
                return out;
            }
        },
        _ => None,
    };
    let mut env = values.clone();
    if let (Some(attr), Some(v)) = (&op.produces, &produced) {
        env.insert(attr.clone(), v.clone());
    }
    let a = Attempt {
        tuple_id,
        attempt: 0,
        values: &env,
        output: produced.as_ref(),
        source: "",
        task: "",
        cot: None,
    };
    let result = run_checks(ctx, op, &a, 0, None, &mut out).and_then(|v| match v {
        Some((i, _)) => settle(ctx, op, &a, &op.checks[i].clone(), Some(i), &mut out),
        None => Ok(()),
    });
    if let Err(e) = result {
        out.error = Some(check_failure(e, op));
    }
    out.value = produced;
    out
}

fn render_inputs(p: &PromptTemplate, values: &BTreeMap<String, Value>) -> BTreeMap<String, String> {
    p.inputs()
        .into_iter()
        .map(|n| {
            let v = values.get(&n).map(Value::render).unwrap_or_else(|| "NULL".into());
            (n, v)
        })
        .collect()
}

/// Prompt operators: generate, check, retry with feedback, settle.
fn run_prompt(
    ctx: &Ctx,
    op: &Operator,
    template: &PromptTemplate,
    tuple_id: &str,
    values: &BTreeMap<String, Value>,
    cache: &ExemplarCache,
) -> Outcome {
    let mut out = Outcome::new();
    let inputs = render_inputs(template, values);
    let base = template.render(|n| inputs.get(n).cloned().unwrap_or_default());
    let task = {
        let mut bare = template.clone();
        bare.instructions.clear();
        bare.render(|n| inputs.get(n).cloned().unwrap_or_default())
    };
    let source = inputs.values().cloned().collect::<Vec<_>>().join("\n");
    let suffix;
    let mask: Option<&dyn Automaton> = match &op.mask {
        Some((_, MaskSpec::Regex(d))) => Some(d.as_ref()),
        Some((_, MaskSpec::Source)) => {
            suffix = SuffixAutomaton::new(&source);
            Some(&suffix)
        }
        None => None,
    };
    let parse = parse_spec(op, ctx);
    let req_seed = stable_hash(&[ctx.seed.to_string(), op.key.clone(), tuple_id.to_string()]);
    let mut feedback = String::new();
    let mut attempt = 0u32;
    loop {
        let mut prompt = base.clone();
        if attempt > 0 {
            let examples = cache.nearest(&op.key, &base, ctx.config.few_shot);
            if !examples.is_empty() {
                prompt.push_str("\n\nExamples:");
                for e in &examples {
                    prompt.push_str(&format!("\nInput: {}\nOutput: {}", e.prompt, e.output));
                    out.touched.push(e.prompt.clone());
                }
            }
            prompt.push_str("\n\n");
            prompt.push_str(&feedback);
        }
        let req = ModelRequest {
            operator: op.key.clone(),
            prompt: prompt.clone(),
            contract: op.contract,
            inputs: inputs.clone(),
            attempt,
            seed: req_seed,
        };
        let resp = invoke(ctx.model, &req, mask);
        let (resp, error) = match resp {
            Ok(r) => (r, None),
            Err(e) => (ModelResponse::default(), Some(e.to_string())),
        };
        out.ops.push(OperatorInvocationRecord {
            invocation_id: String::new(),
            seq: 0,
            run_id: String::new(),
            operator: op.key.clone(),
            tuple_id: tuple_id.to_string(),
            attempt,
            prompt: Snapshot::of(&prompt),
            output: Snapshot::of(&resp.text),
            masked: mask.is_some(),
            cost: resp.cost,
            error: error.clone(),
            timestamp: now_utc(),
        });
        if let Some(message) = error {
            out.error = Some(EngineError::Model {
                operator: op.key.clone(),
                message,
            });
            return out;
        }

        let mut text = resp.text.clone();
        let mut violation: Option<(CheckSpec, Option<usize>, String)> = None;
        let mut value = Value::Null;
        let mut cot = None;

        if let Some(sid) = &op.stream {
            let spec = op.checks.iter().find(|c| &c.id == sid).expect("stream check").clone();
            match guard_stream(ctx, op, &spec, &resp, &source, tuple_id, attempt) {
                Ok((guarded, outcome, record)) => {
                    out.checks.push(record);
                    text = guarded;
                    if !outcome.passed() {
                        let idx = op.checks.iter().position(|c| c.id == spec.id);
                        violation = Some((spec, idx, outcome.feedback));
                    }
                }
                Err(e) => {
                    out.error = Some(check_failure(e, op));
                    return out;
                }
            }
        }

        if violation.is_none() {
            match parse_output(&text, op.contract) {
                Ok((v, c)) => {
                    value = v;
                    cot = c;
                }
                Err(reason) => {
                    let outcome = CheckOutcome::violation("parse", reason.clone());
                    let a = Attempt {
                        tuple_id,
                        attempt,
                        values,
                        output: None,
                        source: &source,
                        task: &task,
                        cot: None,
                    };
                    let mut rec = constraint_record(ctx, op, &parse, &a, &Value::Text(text.clone()), &outcome, false);
                    rec.implementation = impl_tag(None);
                    rec.class = crate::lang::ClassKind::Domain;
                    out.checks.push(rec);
                    violation = Some((parse.clone(), None, reason));
                }
            }
        }

        let mut env = values.clone();
        if let Some(attr) = &op.produces {
            env.insert(attr.clone(), value.clone());
        }
        let a = Attempt {
            tuple_id,
            attempt,
            values: &env,
            output: Some(&value),
            source: &source,
            task: &task,
            cot: cot.as_ref(),
        };
        if violation.is_none() {
            match run_checks(ctx, op, &a, 0, op.stream.as_deref(), &mut out) {
                Ok(Some((i, fb))) => violation = Some((op.checks[i].clone(), Some(i), fb)),
                Ok(None) => {}
                Err(e) => {
                    out.error = Some(check_failure(e, op));
                    return out;
                }
            }
        }

        match violation {
            None => {
                out.accepted = Some((base.clone(), text.clone()));
                out.value = Some(value);
                return out;
            }
            Some((spec, _, fb)) if attempt < spec.retry => {
                feedback = format!(
                    "Previous output: {text}\nViolated constraint: {}\nReason: {fb}",
                    spec.description
                );
                attempt += 1;
            }
            Some((spec, index, _)) => {
                // A parse failure leaves nothing for later checks to inspect.
                let index = if spec.decl.is_none() || value.is_null() && index.is_none() { None } else { index };
                if let Err(e) = settle(ctx, op, &a, &spec, index, &mut out) {
                    out.error = Some(check_failure(e, op));
                }
                out.value = Some(value);
                return out;
            }
        }
    }
}

/// Replays the response through a per-sentence grounding guard.
fn guard_stream(
    ctx: &Ctx,
    op: &Operator,
    spec: &CheckSpec,
    resp: &ModelResponse,
    source: &str,
    tuple_id: &str,
    attempt: u32,
) -> Result<(String, CheckOutcome, ConstraintInvocationRecord), CheckError> {
    let seed = stable_hash(&[ctx.seed.to_string(), op.key.clone(), tuple_id.to_string(), spec.id.clone(), attempt.to_string()]);
    let mut cost = 0.0;
    let mut confidence: f64 = 1.0;
    let mut reasons = Vec::new();
    let tokens = if resp.tokens.is_empty() { vec![resp.text.clone()] } else { resp.tokens.clone() };
    let output = {
        let mut guard = StreamGuard::new(Segmenter::default(), ctx.config.stream_policy, |candidate: &str| {
            let j = ctx.model.judge(&JudgeRequest {
                mode: JudgeMode::FactCheck,
                task: String::new(),
                input: source.to_string(),
                output: candidate.to_string(),
                seed,
            })?;
            cost += j.cost;
            if j.holds {
                confidence = confidence.min(j.confidence.unwrap_or(1.0));
                Ok::<_, ModelError>(None)
            } else {
                Ok(Some(format!("unsupported sentence: {}", j.rationale)))
            }
        });
        for t in &tokens {
            for ev in guard.feed(t)? {
                if let StreamEvent::Backtracked { reason, .. } | StreamEvent::Violation { reason, .. } = ev {
                    reasons.push(reason);
                }
            }
        }
        if let Some(StreamEvent::Backtracked { reason, .. } | StreamEvent::Violation { reason, .. }) = guard.finish()? {
            reasons.push(reason);
        }
        let failed = guard.violation().is_some();
        (guard.output().trim_end().to_string(), failed)
    };
    let (text, failed) = output;
    let mut outcome = if failed || text.trim().is_empty() {
        let why = reasons.last().cloned().unwrap_or_else(|| "no supported content was generated".into());
        CheckOutcome::violation(&format!("judge:{}", ctx.model.name()), why)
    } else {
        let mut o = CheckOutcome::pass(&format!("judge:{}", ctx.model.name()));
        o.confidence = confidence;
        o
    };
    outcome.cost = cost;
    if ctx.config.stream_policy == ViolationPolicy::Backtrack && !reasons.is_empty() && outcome.passed() {
        outcome.feedback.clear();
    }
    let values = BTreeMap::new();
    let a = Attempt {
        tuple_id,
        attempt,
        values: &values,
        output: None,
        source,
        task: "",
        cot: None,
    };
    let rec = constraint_record(ctx, op, spec, &a, &Value::Text(text.clone()), &outcome, true);
    Ok((text, outcome, rec))
}

fn run_unit(ctx: &Ctx, op: &Operator, tuple_id: &str, values: &BTreeMap<String, Value>, cache: &ExemplarCache) -> Outcome {
    match &op.body {
        Body::Prompt(p) => run_prompt(ctx, op, p, tuple_id, values, cache),
        _ => run_deterministic(ctx, op, tuple_id, values),
    }
}

pub(crate) struct StageResult {
    pub counts: StageCounts,
    pub stopped: Option<Disposition>,
    pub error: Option<EngineError>,
}

/// Mutable state threaded through the stages of one run.
pub(crate) struct Exec<'a> {
    pub ctx: Ctx<'a>,
    pub writer: &'a RunWriter,
    pub cache: ExemplarCache,
    pub next_id: u64,
    pub live: Vec<Tuple>,
    /// Tuples dropped under IGNORE since the last aggregate.
    pub tombstones: Vec<Tuple>,
    pub cost: f64,
}

fn io_err(e: std::io::Error) -> EngineError {
    EngineError::Record(e.to_string())
}

impl<'a> Exec<'a> {
    fn fresh_ids(&mut self, n: usize) -> Vec<String> {
        let ids = (0..n).map(|i| format!("t{}", self.next_id + i as u64)).collect();
        self.next_id += n as u64;
        ids
    }

    /// Appends records and folds cache updates in unit order.
    fn absorb(&mut self, out: &mut Outcome, key: &str) -> Result<(), EngineError> {
        for r in out.ops.drain(..) {
            self.cost += r.cost;
            self.writer.record_operator(r).map_err(io_err)?;
        }
        for r in out.checks.drain(..) {
            self.cost += r.cost;
            self.writer.record_constraint(r).map_err(io_err)?;
        }
        for p in out.touched.drain(..) {
            self.cache.touch(key, &p);
        }
        if let Some((p, o)) = out.accepted.take() {
            if out.flags.is_empty() {
                self.cache.insert(key, &p, &o);
            }
        }
        Ok(())
    }

    fn lineage(&self, child: &Tuple, op: &str) -> Result<(), EngineError> {
        for p in &child.parents {
            self.writer
                .record_lineage(LineageRecord {
                    child: child.id.clone(),
                    parent: p.clone(),
                    operator: op.to_string(),
                    flags: child.flags.iter().cloned().collect(),
                })
                .map_err(io_err)?;
        }
        Ok(())
    }

    pub fn scan(&mut self, table: &super::io::Table, stage: &Stage) {
        let ids = self.fresh_ids(table.rows.len());
        self.live = table
            .rows
            .iter()
            .zip(ids)
            .map(|(row, id)| {
                let mut values = row.clone();
                for col in &stage.schema.columns {
                    let v = values.entry(col.name.clone()).or_insert(Value::Null);
                    if let Some(ty) = col.ty {
                        if !v.is_null() && v.data_type() != Some(ty) {
                            *v = v.cast(ty);
                        }
                    }
                }
                Tuple {
                    id,
                    values,
                    flags: BTreeSet::new(),
                    parents: Vec::new(),
                }
            })
            .collect();
    }

    /// Runs one operator and its checks over the live tuples.
    pub fn stage(&mut self, plan: &LogicalPlan, index: usize, asserts: &[usize]) -> Result<StageResult, EngineError> {
        let op = operator(plan, index, asserts, &self.ctx)?;
        let stage = &plan.stages[index];
        if let StageKind::Aggregate { group_by, .. } = &stage.kind {
            return self.aggregate(&op, group_by);
        }
        let creates = matches!(stage.kind, StageKind::Set { .. } | StageKind::Extend { .. });
        let input = std::mem::take(&mut self.live);
        let mut counts = StageCounts {
            operator: op.key.clone(),
            tuples_in: input.len() as u64,
            ..StageCounts::default()
        };
        let ids = if creates { self.fresh_ids(input.len()) } else { Vec::new() };
        let batch = self.ctx.config.batch_size.max(1);
        let mut stopped = None;
        let mut error = None;
        let mut pos = 0;
        'chunks: for chunk in input.chunks(batch) {
            let outcomes: Vec<Outcome> = {
                let (ctx, cache, op) = (&self.ctx, &self.cache, &op);
                chunk
                    .par_iter()
                    .map(|t| run_unit(ctx, op, &t.id, &t.values, cache))
                    .collect()
            };
            for (t, mut out) in chunk.iter().zip(outcomes) {
                self.absorb(&mut out, &op.key)?;
                if let Some(e) = out.error.take() {
                    error = Some(e);
                    counts.aborted = counts.tuples_in - counts.tuples_out - counts.filtered - counts.ignored;
                    break 'chunks;
                }
                let mut tuple = t.clone();
                tuple.flags.extend(out.flags.iter().cloned());
                if let (Some(attr), Some(v)) = (&op.produces, out.value.clone()) {
                    tuple.values.insert(attr.clone(), v);
                }
                match out.disposition {
                    Disposition::Aborted => {
                        stopped = Some(Disposition::Aborted);
                        counts.aborted = counts.tuples_in - counts.tuples_out - counts.filtered - counts.ignored;
                        break 'chunks;
                    }
                    Disposition::Ignored => {
                        counts.ignored += 1;
                        self.tombstones.push(tuple);
                    }
                    _ => {
                        let keep = match &op.body {
                            Body::ExprFilter(_) => out.value == Some(Value::Bool(true)),
                            Body::Prompt(_) if op.produces.is_none() => out.value == Some(Value::Bool(true)),
                            _ => true,
                        };
                        if !keep {
                            counts.filtered += 1;
                        } else {
                            if creates {
                                tuple.parents = vec![t.id.clone()];
                                tuple.id = ids[pos].clone();
                                self.lineage(&tuple, &op.key)?;
                                counts.emitted += 1;
                            } else {
                                counts.emitted += 1;
                            }
                            counts.tuples_out += 1;
                            self.live.push(tuple);
                        }
                    }
                }
                pos += 1;
            }
        }
        Ok(StageResult { counts, stopped, error })
    }

    fn aggregate(&mut self, op: &Operator, group_by: &[String]) -> Result<StageResult, EngineError> {
        let input = std::mem::take(&mut self.live);
        let key_of = |t: &Tuple| -> Option<String> {
            group_by
                .iter()
                .map(|g| t.values.get(g).map(Value::render))
                .collect::<Option<Vec<_>>>()
                .map(|v| v.join("\u{1f}"))
        };
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<&Tuple>> = HashMap::new();
        for t in &input {
            let k = key_of(t).unwrap_or_default();
            if !groups.contains_key(&k) {
                order.push(k.clone());
            }
            groups.entry(k).or_default().push(t);
        }
        let tainted: BTreeSet<String> = std::mem::take(&mut self.tombstones).iter().filter_map(key_of).collect();
        let mut counts = StageCounts {
            operator: op.key.clone(),
            tuples_in: input.len() as u64,
            ..StageCounts::default()
        };
        let ids = self.fresh_ids(order.len());
        let Body::Prompt(template) = op.body else { unreachable!("aggregates are prompts") };
        let units: Vec<(String, BTreeMap<String, Value>, &Vec<&Tuple>)> = order
            .iter()
            .zip(&ids)
            .map(|(k, id)| {
                let members = &groups[k];
                let mut values = BTreeMap::new();
                for g in group_by {
                    values.insert(g.clone(), members[0].values.get(g).cloned().unwrap_or(Value::Null));
                }
                for p in template.inputs() {
                    if group_by.contains(&p) {
                        continue;
                    }
                    let joined: Vec<String> = members
                        .iter()
                        .map(|t| t.values.get(&p).map(Value::render).unwrap_or_else(|| "NULL".into()))
                        .collect();
                    values.insert(p, Value::Text(joined.join("\n---\n")));
                }
                (id.clone(), values, members)
            })
            .collect();
        let batch = self.ctx.config.batch_size.max(1);
        let mut stopped = None;
        let mut error = None;
        'chunks: for (chunk_keys, chunk) in order.chunks(batch).zip(units.chunks(batch)) {
            let outcomes: Vec<Option<Outcome>> = {
                let (ctx, cache) = (&self.ctx, &self.cache);
                chunk
                    .par_iter()
                    .zip(chunk_keys)
                    .map(|((id, values, _), k)| (!tainted.contains(k)).then(|| run_unit(ctx, op, id, values, cache)))
                    .collect()
            };
            for ((id, values, members), out) in chunk.iter().zip(outcomes) {
                let n = members.len() as u64;
                let Some(mut out) = out else {
                    counts.ignored += n;
                    continue;
                };
                self.absorb(&mut out, &op.key)?;
                if let Some(e) = out.error.take() {
                    error = Some(e);
                    counts.aborted = counts.tuples_in - counts.tuples_out - counts.ignored;
                    break 'chunks;
                }
                match out.disposition {
                    Disposition::Aborted => {
                        stopped = Some(Disposition::Aborted);
                        counts.aborted = counts.tuples_in - counts.tuples_out - counts.ignored;
                        break 'chunks;
                    }
                    Disposition::Ignored => counts.ignored += n,
                    _ => {
                        let mut flags: BTreeSet<String> = members.iter().flat_map(|t| t.flags.iter().cloned()).collect();
                        flags.extend(out.flags.iter().cloned());
                        let mut vals: BTreeMap<String, Value> = group_by
                            .iter()
                            .map(|g| (g.clone(), values[g].clone()))
                            .collect();
                        if let (Some(attr), Some(v)) = (&op.produces, out.value.clone()) {
                            vals.insert(attr.clone(), v);
                        }
                        let t = Tuple {
                            id: id.clone(),
                            values: vals,
                            flags,
                            parents: members.iter().map(|m| m.id.clone()).collect(),
                        };
                        self.lineage(&t, &op.key)?;
                        counts.tuples_out += n;
                        counts.emitted += 1;
                        self.live.push(t);
                    }
                }
            }
        }
        Ok(StageResult { counts, stopped, error })
    }
}

/// Executes every operator group in order.
pub(crate) fn run_stages(
    exec: &mut Exec,
    plan: &LogicalPlan,
    tables: &BTreeMap<String, super::io::Table>,
) -> Result<(Vec<StageCounts>, Option<Disposition>, Option<EngineError>), EngineError> {
    let mut all = Vec::new();
    for g in operator_groups(plan) {
        let stage = &plan.stages[g.stage];
        if let StageKind::Scan { table } = &stage.kind {
            let t = tables.get(table).ok_or_else(|| EngineError::MissingTable(table.clone()))?;
            exec.scan(t, stage);
        }
        let r = exec.stage(plan, g.stage, &g.asserts)?;
        all.push(r.counts);
        if r.error.is_some() || r.stopped.is_some() {
            return Ok((all, r.stopped, r.error));
        }
    }
    Ok((all, None, None))
}

/// Output columns: the last stage's schema, led by the scanned table's
/// columns when no aggregate replaced them.
pub(crate) fn final_relation(plan: &LogicalPlan, tables: &BTreeMap<String, super::io::Table>, live: Vec<Tuple>) -> Relation {
    let mut columns: Vec<String> = Vec::new();
    if !plan.stages.iter().any(|s| matches!(s.kind, StageKind::Aggregate { .. })) {
        for s in &plan.stages {
            if let StageKind::Scan { table } = &s.kind {
                if let Some(t) = tables.get(table) {
                    columns.extend(t.columns.iter().cloned());
                }
            }
        }
    }
    if let Some(last) = plan.stages.iter().rev().find(|s| !s.is_assert()) {
        for n in last.schema.names() {
            if !columns.iter().any(|c| c == n) {
                columns.push(n.to_string());
            }
        }
    }
    Relation { columns, tuples: live }
}
