//! Expression evaluation with SQL NULL semantics.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::HashMap;

use chrono::{Datelike, NaiveDate};

use crate::lang::{BinaryOp, Expr, Func, Literal, UnaryOp};
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("type error: {0}")]
    Type(String),
    #[error("invalid regex `{pattern}`: {message}")]
    Regex { pattern: String, message: String },
}

#[derive(Debug, Clone, Copy)]
pub struct EvalEnv {
    pub current_date: NaiveDate,
}

/// A calendar interval as produced by `AGE`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub years: i32,
    pub months: i32,
    pub days: i32,
}

#[derive(Debug, Clone, PartialEq)]
enum Out {
    Val(Value),
    Interval(Interval),
}

impl Out {
    fn value(self) -> Result<Value, EvalError> {
        match self {
            Out::Val(v) => Ok(v),
            Out::Interval(_) => Err(EvalError::Type("interval used where a value is expected".into())),
        }
    }
}

pub fn days_in_month(year: i32, month: u32) -> i32 {
    let (ny, nm) = if month == 12 { (year + 1, 1) } else { (year, month + 1) };
    let first = NaiveDate::from_ymd_opt(year, month, 1).expect("valid month");
    let next = NaiveDate::from_ymd_opt(ny, nm, 1).expect("valid month");
    (next - first).num_days() as i32
}

/// Symbolic difference `a - b` in years, months and days, borrowing days
/// from the month of the earlier date.
pub fn age(a: NaiveDate, b: NaiveDate) -> Interval {
    if a < b {
        let i = age(b, a);
        return Interval {
            years: -i.years,
            months: -i.months,
            days: -i.days,
        };
    }
    let mut years = a.year() - b.year();
    let mut months = a.month() as i32 - b.month() as i32;
    let mut days = a.day() as i32 - b.day() as i32;
    if days < 0 {
        months -= 1;
        days += days_in_month(b.year(), b.month());
    }
    if months < 0 {
        years -= 1;
        months += 12;
    }
    Interval { years, months, days }
}

thread_local! {
    static REGEX_CACHE: RefCell<HashMap<String, regex::Regex>> = RefCell::new(HashMap::new());
}

pub fn regex_contains(pattern: &str, text: &str) -> Result<bool, EvalError> {
    REGEX_CACHE.with(|cache| {
        let mut cache = cache.borrow_mut();
        if !cache.contains_key(pattern) {
            let re = regex::Regex::new(pattern).map_err(|e| EvalError::Regex {
                pattern: pattern.to_string(),
                message: e.to_string(),
            })?;
            cache.insert(pattern.to_string(), re);
        }
        Ok(cache[pattern].is_match(text))
    })
}

fn literal_value(l: &Literal) -> Value {
    match l {
        Literal::Null => Value::Null,
        Literal::Bool(b) => Value::Bool(*b),
        Literal::Int(i) => Value::Int(*i),
        Literal::Float(f) => Value::Float(*f),
        Literal::String(s) | Literal::Regex(s) => Value::Text(s.clone()),
    }
}

/// Evaluates `expr`, reading attributes through `lookup`.
pub fn eval_expr(
    expr: &Expr,
    lookup: &dyn Fn(&str) -> Option<Value>,
    env: &EvalEnv,
) -> Result<Value, EvalError> {
    eval(expr, lookup, env)?.value()
}

fn eval(expr: &Expr, lookup: &dyn Fn(&str) -> Option<Value>, env: &EvalEnv) -> Result<Out, EvalError> {
    let val = |e: &Expr| eval(e, lookup, env).and_then(Out::value);
    Ok(Out::Val(match expr {
        Expr::Literal(l) => literal_value(l),
        Expr::Attr(name) => lookup(name).ok_or_else(|| EvalError::UnknownAttribute(name.clone()))?,
        Expr::Unary { op, expr } => {
            let v = val(expr)?;
            match (op, v) {
                (_, Value::Null) => Value::Null,
                (UnaryOp::Not, Value::Bool(b)) => Value::Bool(!b),
                (UnaryOp::Neg, Value::Int(i)) => i
                    .checked_neg()
                    .map(Value::Int)
                    .ok_or_else(|| EvalError::Type("integer overflow".into()))?,
                (UnaryOp::Neg, Value::Float(f)) => Value::Float(-f),
                (op, v) => return Err(EvalError::Type(format!("cannot apply {op:?} to {}", v.type_name()))),
            }
        }
        Expr::Binary { op, left, right } => match op {
            BinaryOp::And | BinaryOp::Or => logic(*op, val(left)?, val(right)?)?,
            _ => binary(*op, val(left)?, val(right)?)?,
        },
        Expr::Call { func, args } => return call(*func, args, lookup, env),
        Expr::Cast { expr, ty } => val(expr)?.cast(*ty),
        Expr::InList { expr, list, negated } => {
            let v = val(expr)?;
            if v.is_null() {
                Value::Null
            } else {
                let mut saw_null = false;
                let mut found = false;
                for l in list {
                    match v.compare(&literal_value(l)) {
                        Some(Ordering::Equal) => found = true,
                        None if matches!(l, Literal::Null) => saw_null = true,
                        _ => {}
                    }
                }
                if found {
                    Value::Bool(!negated)
                } else if saw_null {
                    Value::Null
                } else {
                    Value::Bool(*negated)
                }
            }
        }
        Expr::Between {
            expr,
            low,
            high,
            negated,
        } => {
            let v = val(expr)?;
            let ge = cmp_value(&v, &val(low)?, |o| o != Ordering::Less)?;
            let le = cmp_value(&v, &val(high)?, |o| o != Ordering::Greater)?;
            match logic(BinaryOp::And, ge, le)? {
                Value::Bool(b) => Value::Bool(b != *negated),
                other => other,
            }
        }
        Expr::IsNull { expr, negated } => Value::Bool(val(expr)?.is_null() != *negated),
    }))
}

fn cmp_value(a: &Value, b: &Value, test: impl Fn(Ordering) -> bool) -> Result<Value, EvalError> {
    if a.is_null() || b.is_null() {
        return Ok(Value::Null);
    }
    match a.compare(b) {
        Some(o) => Ok(Value::Bool(test(o))),
        None => Err(EvalError::Type(format!(
            "cannot compare {} with {}",
            a.type_name(),
            b.type_name()
        ))),
    }
}

fn logic(op: BinaryOp, a: Value, b: Value) -> Result<Value, EvalError> {
    let as_bool = |v: &Value| match v {
        Value::Null => Ok(None),
        Value::Bool(b) => Ok(Some(*b)),
        other => Err(EvalError::Type(format!("{} is not boolean", other.type_name()))),
    };
    let (a, b) = (as_bool(&a)?, as_bool(&b)?);
    Ok(match (op, a, b) {
        (BinaryOp::And, Some(false), _) | (BinaryOp::And, _, Some(false)) => Value::Bool(false),
        (BinaryOp::And, Some(true), Some(true)) => Value::Bool(true),
        (BinaryOp::Or, Some(true), _) | (BinaryOp::Or, _, Some(true)) => Value::Bool(true),
        (BinaryOp::Or, Some(false), Some(false)) => Value::Bool(false),
        _ => Value::Null,
    })
}

fn binary(op: BinaryOp, a: Value, b: Value) -> Result<Value, EvalError> {
    if op.is_comparison() {
        return cmp_value(&a, &b, |o| match op {
            BinaryOp::Eq => o == Ordering::Equal,
            BinaryOp::NotEq => o != Ordering::Equal,
            BinaryOp::Lt => o == Ordering::Less,
            BinaryOp::LtEq => o != Ordering::Greater,
            BinaryOp::Gt => o == Ordering::Greater,
            _ => o != Ordering::Less,
        });
    }
    if a.is_null() || b.is_null() {
        return Ok(Value::Null);
    }
    if op == BinaryOp::Concat {
        return Ok(Value::Text(a.render() + &b.render()));
    }
    let overflow = || EvalError::Type("integer overflow".into());
    match (&a, &b) {
        (Value::Int(x), Value::Int(y)) => Ok(match op {
            BinaryOp::Add => Value::Int(x.checked_add(*y).ok_or_else(overflow)?),
            BinaryOp::Sub => Value::Int(x.checked_sub(*y).ok_or_else(overflow)?),
            BinaryOp::Mul => Value::Int(x.checked_mul(*y).ok_or_else(overflow)?),
            // Division by zero yields NULL rather than failing the run.
            _ if *y == 0 => Value::Null,
            _ => Value::Int(x.checked_div(*y).ok_or_else(overflow)?),
        }),
        _ => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => Ok(match op {
                BinaryOp::Add => Value::Float(x + y),
                BinaryOp::Sub => Value::Float(x - y),
                BinaryOp::Mul => Value::Float(x * y),
                _ if y == 0.0 => Value::Null,
                _ => Value::Float(x / y),
            }),
            _ => Err(EvalError::Type(format!(
                "cannot apply {} to {} and {}",
                op.symbol(),
                a.type_name(),
                b.type_name()
            ))),
        },
    }
}

fn call(
    func: Func,
    args: &[Expr],
    lookup: &dyn Fn(&str) -> Option<Value>,
    env: &EvalEnv,
) -> Result<Out, EvalError> {
    let val = |e: &Expr| eval(e, lookup, env).and_then(Out::value);
    let date_of = |v: Value| -> Result<Option<NaiveDate>, EvalError> {
        match v {
            Value::Null => Ok(None),
            Value::Date(d) => Ok(Some(d)),
            Value::Text(s) => Ok(crate::value::parse_date(&s)),
            other => Err(EvalError::Type(format!("{} is not a date", other.type_name()))),
        }
    };
    Ok(match func {
        Func::CurrentDate => Out::Val(Value::Date(env.current_date)),
        Func::Length => Out::Val(match val(&args[0])? {
            Value::Null => Value::Null,
            v => Value::Int(v.render().chars().count() as i64),
        }),
        Func::RegexpContains => {
            let (text, pattern) = (val(&args[0])?, val(&args[1])?);
            Out::Val(match (text, pattern) {
                (Value::Null, _) | (_, Value::Null) => Value::Null,
                (t, p) => Value::Bool(regex_contains(&p.render(), &t.render())?),
            })
        }
        Func::Age => {
            let (a, b) = (date_of(val(&args[0])?)?, date_of(val(&args[1])?)?);
            match (a, b) {
                (Some(a), Some(b)) => Out::Interval(age(a, b)),
                _ => Out::Val(Value::Null),
            }
        }
        Func::DatePart => {
            let field = val(&args[0])?.render().to_ascii_lowercase();
            let target = eval(&args[1], lookup, env)?;
            let part = match target {
                Out::Interval(i) => match field.as_str() {
                    "year" | "years" => i.years,
                    "month" | "months" => i.months,
                    "day" | "days" => i.days,
                    _ => return Err(EvalError::Type(format!("unknown date part `{field}`"))),
                },
                Out::Val(v) => match date_of(v)? {
                    None => return Ok(Out::Val(Value::Null)),
                    Some(d) => match field.as_str() {
                        "year" => d.year(),
                        "month" => d.month() as i32,
                        "day" => d.day() as i32,
                        _ => return Err(EvalError::Type(format!("unknown date part `{field}`"))),
                    },
                },
            };
            Out::Val(Value::Int(part as i64))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse_query;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn eval_str(src: &str, row: &[(&str, Value)]) -> Value {
        let q = format!("FROM t |> EXTEND {src} AS out");
        let plan = parse_query(&q).unwrap();
        let crate::lang::StageKind::Extend {
            value: crate::lang::Operand::Expr(e),
            ..
        } = &plan.stages[1].kind
        else {
            panic!()
        };
        let lookup = |n: &str| row.iter().find(|(k, _)| *k == n).map(|(_, v)| v.clone());
        eval_expr(e, &lookup, &EvalEnv { current_date: d(2025, 1, 1) }).unwrap()
    }

    #[test]
    fn ehr_age_expression() {
        let v = eval_str(
            "DATE_PART('year', AGE(CURRENT_DATE, dob::DATE))",
            &[("dob", Value::Text("1985-03-12".into()))],
        );
        assert_eq!(v, Value::Int(39));
    }

    #[test]
    fn age_borrows_from_the_earlier_month() {
        assert_eq!(age(d(2024, 3, 1), d(2024, 1, 31)), Interval { years: 0, months: 1, days: 1 });
        assert_eq!(age(d(2025, 1, 1), d(1985, 3, 12)).years, 39);
        assert_eq!(age(d(1985, 3, 12), d(2025, 1, 1)).years, -39);
    }

    #[test]
    fn null_propagation_and_three_valued_logic() {
        let row = [("x", Value::Null)];
        assert_eq!(eval_str("x + 1", &row), Value::Null);
        assert_eq!(eval_str("x > 1 OR TRUE", &row), Value::Bool(true));
        assert_eq!(eval_str("x > 1 AND FALSE", &row), Value::Bool(false));
        assert_eq!(eval_str("x IS NULL", &row), Value::Bool(true));
        assert_eq!(eval_str("LENGTH(x)", &row), Value::Null);
    }

    #[test]
    fn builtins() {
        assert_eq!(eval_str("LENGTH('')", &[]), Value::Int(0));
        assert_eq!(eval_str("LENGTH('héllo')", &[]), Value::Int(5));
        assert_eq!(
            eval_str("REGEXP_CONTAINS('http://x', r'^https://')", &[]),
            Value::Bool(false)
        );
        assert_eq!(eval_str("'1985-03-12'::DATE", &[]), Value::Date(d(1985, 3, 12)));
        assert_eq!(eval_str("7 / 2", &[]), Value::Int(3));
        assert_eq!(eval_str("7 / 0", &[]), Value::Null);
        assert_eq!(eval_str("'a' || 1", &[]), Value::Text("a1".into()));
    }

    #[test]
    fn lists_and_ranges() {
        let row = [("x", Value::Int(3))];
        assert_eq!(eval_str("x IN (1, 2, 3)", &row), Value::Bool(true));
        assert_eq!(eval_str("x NOT IN (1, 2)", &row), Value::Bool(true));
        assert_eq!(eval_str("x BETWEEN 1 AND 3", &row), Value::Bool(true));
        assert_eq!(eval_str("x BETWEEN 4 AND 9", &row), Value::Bool(false));
    }
}
