//! Violation detection for each constraint class.

use serde::{Deserialize, Serialize};

use crate::eval::{eval_expr, regex_contains, EvalEnv, EvalError};
use crate::lang::{DataType, DomainSpec, Expr, Matcher};
use crate::model::{Cot, JudgeMode, JudgeRequest, Model, ModelError};
use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Violation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub verdict: Verdict,
    pub confidence: f64,
    /// Why the check failed; empty on pass.
    pub feedback: String,
    /// `regex`, `substring`, `judge:<name>`, ...
    pub mechanism: String,
    /// Cost units spent on judge calls.
    #[serde(default)]
    pub cost: f64,
}

impl CheckOutcome {
    pub fn pass(mechanism: &str) -> Self {
        CheckOutcome {
            verdict: Verdict::Pass,
            confidence: 1.0,
            feedback: String::new(),
            mechanism: mechanism.to_string(),
            cost: 0.0,
        }
    }

    pub fn violation(mechanism: &str, feedback: impl Into<String>) -> Self {
        let feedback = feedback.into();
        debug_assert!(!feedback.is_empty());
        CheckOutcome {
            verdict: Verdict::Violation,
            confidence: 1.0,
            feedback,
            mechanism: mechanism.to_string(),
            cost: 0.0,
        }
    }

    fn deterministic(ok: bool, mechanism: &str, feedback: impl FnOnce() -> String) -> Self {
        if ok {
            CheckOutcome::pass(mechanism)
        } else {
            CheckOutcome::violation(mechanism, feedback())
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckError {
    #[error("no judge is configured for a {0} check")]
    NoJudge(&'static str),
    #[error("judge failed: {0}")]
    Judge(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn judge_name(judge: &dyn Model) -> String {
    format!("judge:{}", judge.name())
}

fn null_violation(mechanism: &str) -> CheckOutcome {
    CheckOutcome::violation(mechanism, "value is NULL")
}

pub fn domain_mechanism(spec: &DomainSpec) -> &'static str {
    match spec {
        DomainSpec::Type { .. } => "type",
        DomainSpec::Regex { .. } => "regex",
        DomainSpec::Range { .. } => "range",
        DomainSpec::MaxLength { .. } => "length",
        DomainSpec::ValueSet { .. } => "value-set",
    }
}

fn has_type(value: &Value, ty: DataType) -> bool {
    match (value, ty) {
        (Value::Text(_), DataType::String)
        | (Value::Int(_), DataType::Int)
        | (Value::Float(_) | Value::Int(_), DataType::Float)
        | (Value::Bool(_), DataType::Bool)
        | (Value::Date(_), DataType::Date) => true,
        (Value::Text(s), ty) => Value::parse_as(s, ty).is_some(),
        _ => false,
    }
}

pub fn check_domain(value: &Value, spec: &DomainSpec) -> Result<CheckOutcome, CheckError> {
    let mech = domain_mechanism(spec);
    if value.is_null() {
        return Ok(match spec {
            DomainSpec::Type { nullable: true, .. } => CheckOutcome::pass(mech),
            _ => null_violation(mech),
        });
    }
    Ok(match spec {
        DomainSpec::Type { ty, .. } => CheckOutcome::deterministic(has_type(value, *ty), mech, || {
            format!("`{}` is not a valid {ty}", value.render())
        }),
        DomainSpec::Regex { pattern } => {
            CheckOutcome::deterministic(regex_contains(pattern, &value.render())?, mech, || {
                format!("`{}` does not match regex {pattern}", value.render())
            })
        }
        DomainSpec::Range { lo, hi } => {
            let x = match value {
                Value::Text(s) => s.trim().parse::<f64>().ok(),
                v => v.as_f64(),
            };
            CheckOutcome::deterministic(x.is_some_and(|x| *lo <= x && x <= *hi), mech, || {
                format!("`{}` is outside [{lo}, {hi}]", value.render())
            })
        }
        DomainSpec::MaxLength { limit } => {
            let n = value.render().chars().count();
            CheckOutcome::deterministic(n < *limit, mech, || {
                format!("length {n} is not below {limit}")
            })
        }
        DomainSpec::ValueSet { values } => {
            let v = value.render();
            CheckOutcome::deterministic(values.contains(&v), mech, || {
                format!("`{v}` is not one of {}", values.join(", "))
            })
        }
    })
}

fn matcher_kind(m: &Matcher) -> &'static str {
    match m {
        Matcher::Literal(_) => "literal",
        Matcher::Regex(_) => "regex",
        Matcher::LiteralSet(_) => "literal-set",
        Matcher::Prompt(_) => "prompt",
    }
}

/// Inclusion (`include = true`) or exclusion check. `render` fills
/// placeholders of prompt matchers.
pub fn check_ie(
    value: &Value,
    matcher: &Matcher,
    include: bool,
    judge: Option<&dyn Model>,
    render: &dyn Fn(&crate::lang::PromptTemplate) -> String,
    seed: u64,
) -> Result<CheckOutcome, CheckError> {
    let verb = if include { "include" } else { "exclude" };
    let mech = matcher_kind(matcher);
    if matcher.is_prompt() && judge.is_none() {
        return Err(CheckError::NoJudge("semantic match"));
    }
    if value.is_null() {
        return Ok(null_violation(mech));
    }
    let text = value.render();
    let (found, what): (bool, String) = match matcher {
        Matcher::Literal(l) => (text.contains(l.as_str()), format!("\"{l}\"")),
        Matcher::Regex(r) => (regex_contains(r, &text)?, format!("a match for regex {r}")),
        Matcher::LiteralSet(set) => match set.iter().find(|s| text.contains(s.as_str())) {
            Some(s) => (true, format!("\"{s}\"")),
            None => (false, format!("any of {}", set.join(", "))),
        },
        Matcher::Prompt(p) => {
            let judge = judge.expect("checked above");
            let description = render(p);
            let j = judge.judge(&JudgeRequest {
                mode: JudgeMode::SemanticMatch,
                task: description.clone(),
                input: String::new(),
                output: text,
                seed,
            })?;
            let ok = j.holds == include;
            let mut out = if ok {
                CheckOutcome::pass(&judge_name(judge))
            } else if include {
                CheckOutcome::violation(&judge_name(judge), format!("output does not include {description}: {}", j.rationale))
            } else {
                CheckOutcome::violation(&judge_name(judge), format!("output includes {description}: {}", j.rationale))
            };
            out.confidence = j.confidence.unwrap_or(1.0);
            out.cost = j.cost;
            return Ok(out);
        }
    };
    Ok(if found == include {
        CheckOutcome::pass(mech)
    } else if include {
        CheckOutcome::violation(mech, format!("output must {verb} {what}"))
    } else {
        CheckOutcome::violation(mech, format!("output must not contain {what}"))
    })
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn check_grounding_extractive(output: &Value, source: &str, normalize: bool) -> CheckOutcome {
    let mech = "substring";
    let Some(text) = (match output {
        Value::Null => None,
        v => Some(v.render()),
    }) else {
        return null_violation(mech);
    };
    let ok = if normalize {
        normalize_ws(source).contains(&normalize_ws(&text))
    } else {
        source.contains(&text)
    };
    CheckOutcome::deterministic(ok, mech, || {
        let head: String = text.chars().take(80).collect();
        format!("output is not copied verbatim from the input: `{head}`")
    })
}

fn judged(judge: &dyn Model, j: crate::model::Judgement, feedback: impl FnOnce(&str) -> String) -> CheckOutcome {
    let mut out = if j.holds {
        CheckOutcome::pass(&judge_name(judge))
    } else {
        CheckOutcome::violation(&judge_name(judge), feedback(&j.rationale))
    };
    out.confidence = j.confidence.unwrap_or(1.0);
    out.cost = j.cost;
    out
}

pub fn check_grounding_abstractive(
    output: &Value,
    source: &str,
    judge: Option<&dyn Model>,
    seed: u64,
) -> Result<CheckOutcome, CheckError> {
    let judge = judge.ok_or(CheckError::NoJudge("grounding"))?;
    if output.is_null() {
        return Ok(null_violation(&judge_name(judge)));
    }
    let j = judge.judge(&JudgeRequest {
        mode: JudgeMode::FactCheck,
        task: String::new(),
        input: source.to_string(),
        output: output.render(),
        seed,
    })?;
    Ok(judged(judge, j, |why| format!("output is not supported by the input: {why}")))
}

/// Premises must each be supported by the operator input and the steps must
/// follow. Feedback names the first failing premise (1-based).
pub fn check_soundness(
    operator_input: &str,
    cot: Option<&Cot>,
    judge: Option<&dyn Model>,
    seed: u64,
) -> Result<CheckOutcome, CheckError> {
    let judge = judge.ok_or(CheckError::NoJudge("soundness"))?;
    let name = judge_name(judge);
    let Some(cot) = cot else {
        return Ok(CheckOutcome::violation(&name, "no reasoning was returned"));
    };
    if cot.premises.is_empty() {
        return Ok(CheckOutcome::violation(&name, "reasoning lists no premises"));
    }
    let mut cost = 0.0;
    let mut confidence: f64 = 1.0;
    for (i, p) in cot.premises.iter().enumerate() {
        let j = judge.judge(&JudgeRequest {
            mode: JudgeMode::FactCheck,
            task: String::new(),
            input: operator_input.to_string(),
            output: p.clone(),
            seed,
        })?;
        cost += j.cost;
        confidence = confidence.min(j.confidence.unwrap_or(1.0));
        if !j.holds {
            let mut out = CheckOutcome::violation(
                &name,
                format!("premise {} is not supported by the input: {}", i + 1, j.rationale),
            );
            out.cost = cost;
            out.confidence = j.confidence.unwrap_or(1.0);
            return Ok(out);
        }
    }
    let mut argument = String::new();
    for (i, s) in cot.steps.iter().enumerate() {
        argument.push_str(&format!("{}. {s}\n", i + 1));
    }
    argument.push_str(&format!("Conclusion: {}", cot.answer));
    let j = judge.judge(&JudgeRequest {
        mode: JudgeMode::SoundnessSteps,
        task: String::new(),
        input: cot.premises.join("\n"),
        output: argument,
        seed,
    })?;
    cost += j.cost;
    let mut out = judged(judge, j.clone(), |why| format!("reasoning steps are not valid: {why}"));
    out.cost = cost;
    out.confidence = if out.passed() {
        confidence.min(j.confidence.unwrap_or(1.0))
    } else {
        j.confidence.unwrap_or(1.0)
    };
    Ok(out)
}

pub fn check_relevance(
    task: &str,
    input: &str,
    output: &Value,
    judge: Option<&dyn Model>,
    seed: u64,
) -> Result<CheckOutcome, CheckError> {
    let judge = judge.ok_or(CheckError::NoJudge("relevance"))?;
    let text = match output {
        Value::Null => return Ok(null_violation(&judge_name(judge))),
        v => v.render(),
    };
    if text.trim().is_empty() {
        return Ok(CheckOutcome::violation(&judge_name(judge), "output is empty"));
    }
    let j = judge.judge(&JudgeRequest {
        mode: JudgeMode::Relevance,
        task: task.to_string(),
        input: input.to_string(),
        output: text,
        seed,
    })?;
    Ok(judged(judge, j, |why| format!("output is not relevant to the task: {why}")))
}

pub fn eval_assertion(
    expr: &Expr,
    lookup: &dyn Fn(&str) -> Option<Value>,
    env: &EvalEnv,
) -> Result<CheckOutcome, CheckError> {
    Ok(match eval_expr(expr, lookup, env)? {
        Value::Bool(true) => CheckOutcome::pass("expression"),
        Value::Bool(false) => CheckOutcome::violation(
            "expression",
            format!("predicate {} is false", crate::lang::expr_sql(expr)),
        ),
        Value::Null => CheckOutcome::violation("expression", "predicate evaluated to NULL"),
        other => {
            return Err(CheckError::Eval(EvalError::Type(format!(
                "assertion evaluated to {}",
                other.type_name()
            ))))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FakeModel;

    const DOB: &str = r"^\d{4}-(0[1-9]|1[0-2])-(0[1-9]|[12]\d|3[01])$";

    fn text(s: &str) -> Value {
        Value::Text(s.to_string())
    }

    fn judge(json: &str) -> FakeModel {
        FakeModel::from_json(json).unwrap()
    }

    #[test]
    fn domain_examples() {
        let re = DomainSpec::Regex { pattern: DOB.into() };
        assert!(check_domain(&text("1985-03-12"), &re).unwrap().passed());
        let bad = check_domain(&text("3/12/1985"), &re).unwrap();
        assert!(!bad.passed() && !bad.feedback.is_empty());
        let len = DomainSpec::MaxLength { limit: 1000 };
        assert!(check_domain(&text(&"x".repeat(999)), &len).unwrap().passed());
        assert!(!check_domain(&text(&"x".repeat(1000)), &len).unwrap().passed());
    }

    #[test]
    fn nulls_violate_unless_nullable() {
        let t = |nullable| DomainSpec::Type { ty: DataType::Int, nullable };
        assert!(check_domain(&Value::Null, &t(true)).unwrap().passed());
        assert!(!check_domain(&Value::Null, &t(false)).unwrap().passed());
        let lit = Matcher::Literal("x".into());
        assert!(!check_ie(&Value::Null, &lit, false, None, &|_| String::new(), 0).unwrap().passed());
        assert!(!check_grounding_extractive(&Value::Null, "abc", false).passed());
    }

    #[test]
    fn literal_and_set_matchers() {
        let none = &|_: &crate::lang::PromptTemplate| String::new();
        let x = Matcher::Literal("x".into());
        assert!(check_ie(&text("abc"), &x, false, None, none, 0).unwrap().passed());
        assert!(!check_ie(&text("axc"), &x, false, None, none, 0).unwrap().passed());
        let set = Matcher::LiteralSet(vec!["Dr. Kim".into(), "Dr. Lee".into()]);
        assert!(check_ie(&text("seen by Dr. Lee"), &set, true, None, none, 0).unwrap().passed());
    }

    #[test]
    fn prompt_matchers_need_a_judge() {
        let p = Matcher::Prompt(crate::lang::parse_prompt_string("p'test results'").unwrap());
        let render = &|t: &crate::lang::PromptTemplate| t.raw_text.clone();
        assert!(matches!(
            check_ie(&text("x"), &p, false, None, render, 0),
            Err(CheckError::NoJudge(_))
        ));
        let j = judge(r#"{"judge": [{"mode": "semantic_match", "output": "lactate", "verdict": true}], "judge_default": {"verdict": false, "logit_true": 0, "logit_false": 1}}"#);
        let ok = check_ie(&text("no labs here"), &p, false, Some(&j), render, 0).unwrap();
        assert!(ok.passed());
        assert!((ok.confidence - crate::model::sigmoid(1.0)).abs() < 1e-12);
        assert!(!check_ie(&text("lactate 4.1"), &p, false, Some(&j), render, 0).unwrap().passed());
    }

    #[test]
    fn extractive_grounding() {
        assert!(check_grounding_extractive(&text("abc"), "abc", false).passed());
        assert!(check_grounding_extractive(&text(""), "abc", false).passed());
        assert!(!check_grounding_extractive(&text("xy"), "xzy", false).passed());
        assert!(!check_grounding_extractive(&text("a  b"), "a b", false).passed());
        assert!(check_grounding_extractive(&text("a  b"), "a b", true).passed());
    }

    #[test]
    fn abstractive_grounding_separates_errors_from_violations() {
        let j = judge(r#"{"judge": [{"output": "UNSUPPORTED", "verdict": false}], "judge_default": {"verdict": true}}"#);
        assert!(check_grounding_abstractive(&text("fine"), "src", Some(&j), 0).unwrap().passed());
        let bad = check_grounding_abstractive(&text("UNSUPPORTED claim"), "src", Some(&j), 0).unwrap();
        assert!(!bad.passed() && bad.mechanism == "judge:fake");
        let broken = judge("{}");
        assert!(matches!(
            check_grounding_abstractive(&text("x"), "src", Some(&broken), 0),
            Err(CheckError::Judge(_))
        ));
    }

    #[test]
    fn soundness_names_the_failing_premise() {
        let j = judge(r#"{"judge": [{"mode": "fact_check", "output": "^fever", "verdict": false}], "judge_default": {"verdict": true}}"#);
        let cot = |premises: &[&str]| Cot {
            premises: premises.iter().map(|s| s.to_string()).collect(),
            steps: vec!["so".into()],
            answer: true,
        };
        assert!(check_soundness("lactate 4", Some(&cot(&["lactate 4"])), Some(&j), 0).unwrap().passed());
        let bad = check_soundness("lactate 4", Some(&cot(&["fever 39"])), Some(&j), 0).unwrap();
        assert!(bad.feedback.starts_with("premise 1 "), "{}", bad.feedback);
        assert!(!check_soundness("x", Some(&cot(&[])), Some(&j), 0).unwrap().passed());
        assert!(!check_soundness("x", None, Some(&j), 0).unwrap().passed());
    }

    #[test]
    fn relevance() {
        let j = judge(r#"{"judge": [{"mode": "relevance", "output": "social history", "verdict": false}], "judge_default": {"verdict": true}}"#);
        assert!(check_relevance("extract", "in", &text("medical history: asthma"), Some(&j), 0).unwrap().passed());
        assert!(!check_relevance("extract", "in", &text("social history: smoker"), Some(&j), 0).unwrap().passed());
        assert!(!check_relevance("extract", "in", &text(" "), Some(&j), 0).unwrap().passed());
    }

    #[test]
    fn assertions() {
        let env = EvalEnv {
            current_date: chrono::NaiveDate::from_ymd_opt(2025, 1, 1).unwrap(),
        };
        let plan = crate::lang::parse_query("FROM t |> ASSERT a > b").unwrap();
        let crate::lang::ConstraintClass::Assertion(e) = &plan.constraint("c1").unwrap().class else {
            panic!()
        };
        let row = |a: Value, b: Value| move |n: &str| Some(if n == "a" { a.clone() } else { b.clone() });
        assert!(!eval_assertion(e, &row(Value::Int(1), Value::Int(2)), &env).unwrap().passed());
        assert!(eval_assertion(e, &row(Value::Int(3), Value::Int(2)), &env).unwrap().passed());
        let null = eval_assertion(e, &row(Value::Null, Value::Int(2)), &env).unwrap();
        assert_eq!(null.feedback, "predicate evaluated to NULL");
    }
}
