//! Schema propagation, name resolution and type checking.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::ast::*;
use super::parser::RawStage;
use super::ParseError;

/// Known table schemas, keyed by table name.
pub type Catalog = BTreeMap<String, Schema>;

/// Result type of an expression during checking. `Unknown` unifies with anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExprType {
    Known(DataType),
    Interval,
    Unknown,
}

impl ExprType {
    fn of(ty: Option<DataType>) -> Self {
        ty.map_or(ExprType::Unknown, ExprType::Known)
    }

    fn is_numeric(self) -> bool {
        matches!(
            self,
            ExprType::Unknown | ExprType::Known(DataType::Int | DataType::Float)
        )
    }

    fn is(self, ty: DataType) -> bool {
        matches!(self, ExprType::Unknown) || self == ExprType::Known(ty)
    }

    pub fn data_type(self) -> Option<DataType> {
        match self {
            ExprType::Known(t) => Some(t),
            _ => None,
        }
    }
}

pub fn infer_type(expr: &Expr, schema: &Schema) -> Result<ExprType, String> {
    use ExprType::*;
    Ok(match expr {
        Expr::Literal(l) => match l {
            Literal::Null => Unknown,
            Literal::Bool(_) => Known(DataType::Bool),
            Literal::Int(_) => Known(DataType::Int),
            Literal::Float(_) => Known(DataType::Float),
            Literal::String(_) | Literal::Regex(_) => Known(DataType::String),
        },
        Expr::Attr(name) => match schema.get(name) {
            Some(c) => ExprType::of(c.ty),
            None => return Err(format!("unknown attribute `{name}`")),
        },
        Expr::Unary { op, expr } => {
            let t = infer_type(expr, schema)?;
            match op {
                UnaryOp::Not if t.is(DataType::Bool) => Known(DataType::Bool),
                UnaryOp::Neg if t.is_numeric() => t,
                _ => return Err(format!("operator {op:?} cannot apply to {t:?}")),
            }
        }
        Expr::Binary { op, left, right } => {
            let l = infer_type(left, schema)?;
            let r = infer_type(right, schema)?;
            match op {
                BinaryOp::And | BinaryOp::Or => {
                    if !(l.is(DataType::Bool) && r.is(DataType::Bool)) {
                        return Err(format!("{} needs boolean operands", op.symbol()));
                    }
                    Known(DataType::Bool)
                }
                BinaryOp::Concat => Known(DataType::String),
                BinaryOp::Add | BinaryOp::Sub | BinaryOp::Mul | BinaryOp::Div => {
                    if !(l.is_numeric() && r.is_numeric()) {
                        return Err(format!("{} needs numeric operands", op.symbol()));
                    }
                    match (l, r) {
                        (Known(DataType::Int), Known(DataType::Int)) => Known(DataType::Int),
                        (Unknown, _) | (_, Unknown) => Unknown,
                        _ => Known(DataType::Float),
                    }
                }
                _ => {
                    let compatible = l == Unknown
                        || r == Unknown
                        || l == r
                        || (l.is_numeric() && r.is_numeric());
                    if !compatible {
                        return Err(format!("cannot compare {l:?} with {r:?}"));
                    }
                    Known(DataType::Bool)
                }
            }
        }
        Expr::Call { func, args } => {
            let tys = args
                .iter()
                .map(|a| infer_type(a, schema))
                .collect::<Result<Vec<_>, _>>()?;
            match func {
                Func::Length => Known(DataType::Int),
                Func::RegexpContains => Known(DataType::Bool),
                Func::CurrentDate => Known(DataType::Date),
                Func::Age => {
                    for t in &tys {
                        if !(t.is(DataType::Date) || *t == Known(DataType::String)) {
                            return Err("AGE expects dates".into());
                        }
                    }
                    Interval
                }
                Func::DatePart => {
                    match &args[0] {
                        Expr::Literal(Literal::String(part))
                            if ["year", "month", "day"]
                                .contains(&part.to_ascii_lowercase().as_str()) => {}
                        _ => return Err("DATE_PART expects 'year', 'month' or 'day'".into()),
                    }
                    Known(DataType::Int)
                }
            }
        }
        Expr::Cast { expr, ty } => {
            infer_type(expr, schema)?;
            Known(*ty)
        }
        Expr::InList { expr, .. } | Expr::IsNull { expr, .. } => {
            infer_type(expr, schema)?;
            Known(DataType::Bool)
        }
        Expr::Between {
            expr, low, high, ..
        } => {
            for e in [expr, low, high] {
                infer_type(e, schema)?;
            }
            Known(DataType::Bool)
        }
    })
}

fn unique_id(base: String, used: &mut HashSet<String>) -> String {
    if used.insert(base.clone()) {
        return base;
    }
    let mut n = 2;
    loop {
        let candidate = format!("{base}#{n}");
        if used.insert(candidate.clone()) {
            return candidate;
        }
        n += 1;
    }
}

/// Source columns referenced before they are produced, in order of first use.
/// Operator aliases are not columns.
fn infer_source_columns(stages: &[RawStage]) -> Vec<String> {
    let mut produced: HashSet<String> = HashSet::new();
    let mut source = Vec::new();
    for stage in stages {
        let mut wants: Vec<String> = Vec::new();
        match &stage.kind {
            StageKind::Scan { .. } => {}
            StageKind::Assert(c) => {
                wants.extend(constraint_attributes(c));
                if let ConstraintClass::Include(Matcher::Prompt(p))
                | ConstraintClass::Exclude(Matcher::Prompt(p)) = &c.class
                {
                    wants.extend(p.inputs());
                }
            }
            StageKind::Set { attr, value } => {
                wants.extend(value.attributes());
                wants.push(attr.clone());
            }
            StageKind::Extend { value, .. } => wants.extend(value.attributes()),
            StageKind::Where { predicate, .. } => wants.extend(predicate.attributes()),
            StageKind::Aggregate {
                prompt, group_by, ..
            } => {
                wants.extend(prompt.inputs());
                wants.extend(group_by.iter().cloned());
            }
        }
        for w in wants {
            if !produced.contains(&w) && !source.contains(&w) {
                source.push(w);
            }
        }
        match &stage.kind {
            StageKind::Extend { out, .. } => {
                produced.insert(out.clone());
            }
            StageKind::Aggregate { .. } => break,
            _ => {}
        }
    }
    source
}

pub(crate) fn resolve(
    raw: Vec<RawStage>,
    catalog: Option<&Catalog>,
) -> Result<LogicalPlan, ParseError> {
    let first = raw
        .first()
        .ok_or_else(|| ParseError::new(1, 1, "empty query"))?;
    let table = match &first.kind {
        StageKind::Scan { table } => table.clone(),
        _ => return Err(ParseError::new(1, 1, "query must start with FROM")),
    };
    let mut schema = match catalog {
        Some(cat) => cat
            .get(&table)
            .cloned()
            .ok_or_else(|| ParseError::new(first.line, first.column, format!("unknown table `{table}`")))?,
        None => Schema::untyped(&infer_source_columns(&raw)),
    };

    let mut used_ids: HashSet<String> = HashSet::new();
    let mut next_declared = 1usize;
    // attribute -> index of the stage that last wrote it (0 = scan)
    let mut writer: HashMap<String, usize> = schema.names().map(|n| (n.to_string(), 0)).collect();
    let mut semantic_writer: HashSet<usize> = HashSet::new();
    let mut stages: Vec<Stage> = Vec::with_capacity(raw.len());

    for (index, rs) in raw.into_iter().enumerate() {
        let err = |msg: String| ParseError::new(rs.line, rs.column, msg);
        let check_attrs = |names: &[String], schema: &Schema| -> Result<(), ParseError> {
            for n in names {
                if !schema.contains(n) {
                    return Err(err(format!("unknown attribute `{n}`")));
                }
            }
            Ok(())
        };
        let operand_type = |op: &Operand, schema: &Schema| -> Result<ExprType, ParseError> {
            match op {
                Operand::Prompt(p) => {
                    check_attrs(&p.inputs(), schema)?;
                    Ok(ExprType::Known(DataType::String))
                }
                Operand::Expr(e) => infer_type(e, schema).map_err(err),
            }
        };
        let mut implicit = Vec::new();
        let mut kind = rs.kind.clone();
        match &mut kind {
            StageKind::Scan { .. } => {
                if index != 0 {
                    return Err(err("FROM may only start a query".into()));
                }
            }
            StageKind::Set { attr, value } => {
                if !schema.contains(attr) {
                    return Err(err(format!("unknown attribute `{attr}`")));
                }
                let t = operand_type(value, &schema)?;
                schema.upsert(attr, t.data_type());
                writer.insert(attr.clone(), index);
            }
            StageKind::Extend { value, out, ty, .. } => {
                let t = operand_type(value, &schema)?;
                if schema.contains(out) {
                    return Err(err(format!("attribute `{out}` already exists")));
                }
                let declared = ty.or(t.data_type());
                schema.upsert(out, declared);
                writer.insert(out.clone(), index);
                if let (Some(ty), Operand::Prompt(_)) = (ty, value) {
                    implicit.push(type_domain(out, *ty, &mut used_ids));
                }
            }
            StageKind::Where { predicate, .. } => {
                let t = operand_type(predicate, &schema)?;
                if matches!(predicate, Operand::Expr(_)) && !t.is(DataType::Bool) {
                    return Err(err("WHERE predicate must be boolean".into()));
                }
            }
            StageKind::Aggregate {
                prompt,
                out,
                ty,
                group_by,
                ..
            } => {
                check_attrs(&prompt.inputs(), &schema)?;
                check_attrs(group_by, &schema)?;
                let mut next = Schema::default();
                for g in group_by.iter() {
                    if next.contains(g) {
                        return Err(err(format!("duplicate GROUP BY attribute `{g}`")));
                    }
                    next.upsert(g, schema.get(g).and_then(|c| c.ty));
                }
                if next.contains(out) {
                    return Err(err(format!("attribute `{out}` already exists")));
                }
                next.upsert(out, Some(ty.unwrap_or(DataType::String)));
                schema = next;
                writer.clear();
                for g in group_by.iter() {
                    writer.insert(g.clone(), index);
                }
                writer.insert(out.clone(), index);
                if let Some(ty) = ty {
                    implicit.push(type_domain(out, *ty, &mut used_ids));
                }
            }
            StageKind::Assert(decl) => {
                let refs = constraint_attributes(decl);
                check_attrs(&refs, &schema)?;
                match &decl.class {
                    ConstraintClass::Domain { expr: Some(e), .. }
                    | ConstraintClass::Assertion(e) => {
                        infer_type(e, &schema).map_err(err)?;
                    }
                    ConstraintClass::Include(Matcher::Prompt(p))
                    | ConstraintClass::Exclude(Matcher::Prompt(p)) => {
                        check_attrs(&p.inputs(), &schema)?;
                    }
                    _ => {}
                }
                if let ConstraintClass::Assertion(_) = &decl.class {
                    let latest = refs
                        .iter()
                        .max_by_key(|a| (writer.get(*a).copied().unwrap_or(0), std::cmp::Reverse(refs.iter().position(|r| r == *a))))
                        .cloned()
                        .expect("assertions reference attributes");
                    decl.target = Target::Attr(latest);
                }
                if matches!(decl.class, ConstraintClass::Grounded | ConstraintClass::Relevant) {
                    if let Target::Attr(a) = &decl.target {
                        let w = writer.get(a).copied().unwrap_or(0);
                        if !semantic_writer.contains(&w) {
                            return Err(err(format!(
                                "`{a}` is not generated by a semantic operator"
                            )));
                        }
                    }
                }
                decl.id = unique_id(format!("c{next_declared}"), &mut used_ids);
                next_declared += 1;
            }
        }
        let stage = Stage {
            kind,
            schema: schema.clone(),
            implicit,
        };
        if stage.is_semantic() {
            semantic_writer.insert(index);
        }
        stages.push(stage);
    }
    Ok(LogicalPlan { stages })
}

fn type_domain(attr: &str, ty: DataType, used: &mut HashSet<String>) -> ConstraintDecl {
    ConstraintDecl {
        id: unique_id(format!("{attr}.type"), used),
        target: Target::Attr(attr.to_string()),
        class: ConstraintClass::Domain {
            attr: attr.to_string(),
            spec: DomainSpec::Type {
                ty,
                nullable: false,
            },
            expr: None,
        },
        retry: None,
        on_fail: None,
        origin: Origin::Implicit,
    }
}
