//! Canonical pipe-SQL rendering of plans.
//!
//! Every stage renders on one line as valid query text followed by a `--`
//! comment naming the node, so a logical rendering parses back to the same plan.

use std::fmt::Write;

use super::ast::*;

const PREC_OR: u8 = 1;
const PREC_AND: u8 = 2;
const PREC_NOT: u8 = 3;
const PREC_CMP: u8 = 4;
const PREC_CONCAT: u8 = 5;
const PREC_NEG: u8 = 8;
const PREC_CAST: u8 = 9;
const PREC_PRIMARY: u8 = 10;

fn expr_prec(e: &Expr) -> u8 {
    match e {
        Expr::Literal(Literal::Int(i)) if *i < 0 => PREC_NEG,
        Expr::Literal(Literal::Float(f)) if *f < 0.0 => PREC_NEG,
        Expr::Literal(_) | Expr::Attr(_) | Expr::Call { .. } => PREC_PRIMARY,
        Expr::Cast { .. } => PREC_CAST,
        Expr::Unary {
            op: UnaryOp::Neg, ..
        } => PREC_NEG,
        Expr::Unary {
            op: UnaryOp::Not, ..
        } => PREC_NOT,
        Expr::Binary { op, .. } => op.precedence(),
        Expr::InList { .. } | Expr::Between { .. } | Expr::IsNull { .. } => PREC_CMP,
    }
}

pub fn quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

pub fn prompt_sql(p: &PromptTemplate) -> String {
    format!("p{}", quote(&p.raw_text))
}

fn float_text(f: f64) -> String {
    let s = f.to_string();
    if s.contains('.') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

pub fn literal_sql(l: &Literal) -> String {
    match l {
        Literal::Null => "NULL".into(),
        Literal::Bool(true) => "TRUE".into(),
        Literal::Bool(false) => "FALSE".into(),
        Literal::Int(i) => i.to_string(),
        Literal::Float(f) => float_text(*f),
        Literal::String(s) => quote(s),
        Literal::Regex(r) => format!("r'{r}'"),
    }
}

pub fn expr_sql(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(&mut out, e, 0, false);
    out
}

/// Renders an ASSERT predicate: a top-level AND must be parenthesized so it
/// is not read back as two conjuncts.
pub fn assert_expr_sql(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(&mut out, e, 0, true);
    out
}

fn write_expr(out: &mut String, e: &Expr, required: u8, assert_top: bool) {
    let own = expr_prec(e);
    let and_at_top = assert_top
        && matches!(
            e,
            Expr::Binary {
                op: BinaryOp::And,
                ..
            }
        );
    let parens = own < required || and_at_top;
    if parens {
        out.push('(');
    }
    match e {
        Expr::Literal(l) => out.push_str(&literal_sql(l)),
        Expr::Attr(a) => out.push_str(a),
        Expr::Unary {
            op: UnaryOp::Not,
            expr,
        } => {
            out.push_str("NOT ");
            write_expr(out, expr, PREC_NOT, false);
        }
        Expr::Unary {
            op: UnaryOp::Neg,
            expr,
        } => {
            out.push('-');
            let mut inner = String::new();
            write_expr(&mut inner, expr, PREC_NEG + 1, false);
            // `-5` would read back as a literal and `--` starts a comment.
            if inner.starts_with(|c: char| c == '-' || c.is_ascii_digit()) {
                let _ = write!(out, "({inner})");
            } else {
                out.push_str(&inner);
            }
        }
        Expr::Binary { op, left, right } => {
            let (lp, rp, top) = match op {
                BinaryOp::Or if assert_top && !parens => (PREC_OR, PREC_NOT, true),
                BinaryOp::Or => (PREC_OR, PREC_AND, false),
                BinaryOp::And => (PREC_AND, PREC_NOT, false),
                op if op.is_comparison() => (PREC_CONCAT, PREC_CONCAT, false),
                op => (op.precedence(), op.precedence() + 1, false),
            };
            write_expr(out, left, lp, top);
            let _ = write!(out, " {} ", op.symbol());
            let mut rhs = String::new();
            write_expr(&mut rhs, right, rp, false);
            out.push_str(&rhs);
        }
        Expr::Call { func, args } => {
            out.push_str(func.name());
            if *func != Func::CurrentDate {
                out.push('(');
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_expr(out, a, 0, false);
                }
                out.push(')');
            }
        }
        Expr::Cast { expr, ty } => {
            write_expr(out, expr, PREC_PRIMARY, false);
            let _ = write!(out, "::{ty}");
        }
        Expr::InList {
            expr,
            list,
            negated,
        } => {
            write_expr(out, expr, PREC_CONCAT, false);
            out.push_str(if *negated { " NOT IN (" } else { " IN (" });
            let items: Vec<String> = list.iter().map(literal_sql).collect();
            out.push_str(&items.join(", "));
            out.push(')');
        }
        Expr::Between {
            expr,
            low,
            high,
            negated,
        } => {
            write_expr(out, expr, PREC_CONCAT, false);
            out.push_str(if *negated { " NOT BETWEEN " } else { " BETWEEN " });
            write_expr(out, low, PREC_CONCAT, false);
            out.push_str(" AND ");
            write_expr(out, high, PREC_CONCAT, false);
        }
        Expr::IsNull { expr, negated } => {
            write_expr(out, expr, PREC_CONCAT, false);
            out.push_str(if *negated { " IS NOT NULL" } else { " IS NULL" });
        }
    }
    if parens {
        out.push(')');
    }
}

pub fn matcher_sql(m: &Matcher) -> String {
    match m {
        Matcher::Literal(s) => quote(s),
        Matcher::Regex(r) => format!("r'{r}'"),
        Matcher::LiteralSet(items) => {
            let v: Vec<String> = items.iter().map(|s| quote(s)).collect();
            format!("({})", v.join(", "))
        }
        Matcher::Prompt(p) => prompt_sql(p),
    }
}

/// Predicate text of a constraint, without `ASSERT` or retry settings.
/// Implicit type domains have no query syntax and render as `attr IS TYPE`.
pub fn predicate_sql(c: &ConstraintDecl) -> String {
    let t = c.target.name();
    match &c.class {
        ConstraintClass::Domain { expr: Some(e), .. } | ConstraintClass::Assertion(e) => {
            assert_expr_sql(e)
        }
        ConstraintClass::Domain {
            attr,
            spec: DomainSpec::Type { ty, .. },
            expr: None,
        } => format!("{attr} IS {ty}"),
        ConstraintClass::Domain { attr, spec, .. } => format!("{attr} IN DOMAIN {spec:?}"),
        ConstraintClass::Include(m) => format!("{t} INCLUDES {}", matcher_sql(m)),
        ConstraintClass::Exclude(m) => format!("{t} EXCLUDES {}", matcher_sql(m)),
        ConstraintClass::Grounded => format!("{t} GROUNDED"),
        ConstraintClass::Sound => format!("{t} SOUND"),
        ConstraintClass::Relevant => format!("{t} RELEVANT"),
    }
}

/// `ASSERT <pred> [RETRY n] [mode ON FAIL]`.
pub fn constraint_sql(c: &ConstraintDecl) -> String {
    let mut s = format!("ASSERT {}", predicate_sql(c));
    if let Some(r) = c.retry {
        let _ = write!(s, " RETRY {r}");
    }
    if let Some(m) = c.on_fail {
        let _ = write!(s, " {m} ON FAIL");
    }
    s
}

/// Short node label such as `Grounding(phys_exam)`.
pub fn constraint_label(c: &ConstraintDecl) -> String {
    let class = match c.class.kind() {
        ClassKind::Domain => "Domain",
        ClassKind::Inclusion => "Include",
        ClassKind::Exclusion => "Exclude",
        ClassKind::Grounding => "Grounded",
        ClassKind::Soundness => "Sound",
        ClassKind::Relevance => "Relevant",
        ClassKind::Assertion => "Assertion",
    };
    format!("{} {class}({})", c.id, c.target.name())
}

fn annotation_sql(a: Annotation) -> &'static str {
    match a {
        Annotation::Extractive => "EXTRACTIVE ",
        Annotation::Abstractive => "ABSTRACTIVE ",
        Annotation::None => "",
    }
}

fn operand_sql(o: &Operand) -> String {
    match o {
        Operand::Expr(e) => expr_sql(e),
        Operand::Prompt(p) => prompt_sql(p),
    }
}

/// Query text of a stage (without the leading `|>`).
pub fn stage_sql(stage: &Stage) -> String {
    match &stage.kind {
        StageKind::Scan { table } => format!("FROM {table}"),
        StageKind::Set { attr, value } => format!("SET {attr} = {}", operand_sql(value)),
        StageKind::Extend {
            value,
            annotation,
            out,
            ty,
        } => {
            let mut s = format!(
                "EXTEND {}{} AS {out}",
                annotation_sql(*annotation),
                operand_sql(value)
            );
            if let Some(t) = ty {
                let _ = write!(s, " {t}");
            }
            s
        }
        StageKind::Where { predicate, alias } => {
            let mut s = format!("WHERE {}", operand_sql(predicate));
            if let Some(a) = alias {
                let _ = write!(s, " AS {a}");
            }
            s
        }
        StageKind::Aggregate {
            prompt,
            annotation,
            out,
            ty,
            group_by,
        } => {
            let mut s = format!(
                "AGGREGATE {}{} AS {out}",
                annotation_sql(*annotation),
                prompt_sql(prompt)
            );
            if let Some(t) = ty {
                let _ = write!(s, " {t}");
            }
            if !group_by.is_empty() {
                let _ = write!(s, " GROUP BY {}", group_by.join(", "));
            }
            s
        }
        StageKind::Assert(c) => constraint_sql(c),
    }
}

pub fn stage_label(stage: &Stage) -> String {
    let ty = |t: &Option<DataType>| t.map(|t| format!(": {t}")).unwrap_or_default();
    match &stage.kind {
        StageKind::Scan { table } => format!("Scan({table})"),
        StageKind::Set { attr, value } => {
            let kind = if value.prompt().is_some() { "map" } else { "expr" };
            format!("Set({attr}, {kind})")
        }
        StageKind::Extend { out, ty: t, value, .. } => {
            let kind = if value.prompt().is_some() { "map" } else { "expr" };
            format!("Extend({out}{}, {kind})", ty(t))
        }
        StageKind::Where { alias, predicate } => {
            let kind = if predicate.prompt().is_some() {
                "filter"
            } else {
                "expr"
            };
            match alias {
                Some(a) => format!("Where({a}, {kind})"),
                None => format!("Where({kind})"),
            }
        }
        StageKind::Aggregate {
            out,
            ty: t,
            group_by,
            ..
        } => {
            if group_by.is_empty() {
                format!("Aggregate({out}{})", ty(t))
            } else {
                format!("Aggregate({out}{} by {})", ty(t), group_by.join(", "))
            }
        }
        StageKind::Assert(c) => constraint_label(c),
    }
}

/// One line per stage, in pipeline order.
pub fn format_logical(plan: &LogicalPlan) -> String {
    let mut out = String::new();
    for (i, stage) in plan.stages.iter().enumerate() {
        let prefix = if i == 0 { "" } else { "|> " };
        let _ = writeln!(out, "{prefix}{}  -- {}", stage_sql(stage), stage_label(stage));
    }
    out
}
