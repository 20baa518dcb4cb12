//! Syntax tree for the pipe-SQL dialect.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Column types that can be declared on generated attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DataType {
    String,
    Int,
    Float,
    Bool,
    Date,
}

impl DataType {
    pub fn keyword(self) -> &'static str {
        match self {
            DataType::String => "STRING",
            DataType::Int => "INT",
            DataType::Float => "FLOAT",
            DataType::Bool => "BOOL",
            DataType::Date => "DATE",
        }
    }

    pub fn from_keyword(word: &str) -> Option<Self> {
        match word.to_ascii_uppercase().as_str() {
            "STRING" => Some(DataType::String),
            "INT" => Some(DataType::Int),
            "FLOAT" => Some(DataType::Float),
            "BOOL" => Some(DataType::Bool),
            "DATE" => Some(DataType::Date),
            _ => None,
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    String(String),
    /// `r'...'`, kept apart from plain strings so it prints back unchanged.
    Regex(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Not,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Eq,
    NotEq,
    Lt,
    LtEq,
    Gt,
    GtEq,
    Add,
    Sub,
    Mul,
    Div,
    Concat,
    And,
    Or,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Eq => "=",
            BinaryOp::NotEq => "<>",
            BinaryOp::Lt => "<",
            BinaryOp::LtEq => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::GtEq => ">=",
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Concat => "||",
            BinaryOp::And => "AND",
            BinaryOp::Or => "OR",
        }
    }

    /// Binding strength; higher binds tighter.
    pub fn precedence(self) -> u8 {
        match self {
            BinaryOp::Or => 1,
            BinaryOp::And => 2,
            BinaryOp::Eq
            | BinaryOp::NotEq
            | BinaryOp::Lt
            | BinaryOp::LtEq
            | BinaryOp::Gt
            | BinaryOp::GtEq => 4,
            BinaryOp::Concat => 5,
            BinaryOp::Add | BinaryOp::Sub => 6,
            BinaryOp::Mul | BinaryOp::Div => 7,
        }
    }

    pub fn is_comparison(self) -> bool {
        self.precedence() == 4
    }
}

/// Builtin scalar functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Length,
    RegexpContains,
    DatePart,
    Age,
    CurrentDate,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Length => "LENGTH",
            Func::RegexpContains => "REGEXP_CONTAINS",
            Func::DatePart => "DATE_PART",
            Func::Age => "AGE",
            Func::CurrentDate => "CURRENT_DATE",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "LENGTH" => Some(Func::Length),
            "REGEXP_CONTAINS" => Some(Func::RegexpContains),
            "DATE_PART" => Some(Func::DatePart),
            "AGE" => Some(Func::Age),
            "CURRENT_DATE" => Some(Func::CurrentDate),
            _ => None,
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Length => 1,
            Func::RegexpContains | Func::DatePart | Func::Age => 2,
            Func::CurrentDate => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(Literal),
    Attr(String),
    Unary {
        op: UnaryOp,
        expr: Box<Expr>,
    },
    Binary {
        op: BinaryOp,
        left: Box<Expr>,
        right: Box<Expr>,
    },
    Call {
        func: Func,
        args: Vec<Expr>,
    },
    Cast {
        expr: Box<Expr>,
        ty: DataType,
    },
    InList {
        expr: Box<Expr>,
        list: Vec<Literal>,
        negated: bool,
    },
    Between {
        expr: Box<Expr>,
        low: Box<Expr>,
        high: Box<Expr>,
        negated: bool,
    },
    IsNull {
        expr: Box<Expr>,
        negated: bool,
    },
}

impl Expr {
    pub fn binary(op: BinaryOp, left: Expr, right: Expr) -> Expr {
        Expr::Binary {
            op,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    /// Attribute names referenced anywhere in the expression, in first-seen order.
    pub fn attributes(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_attrs(&mut out);
        out
    }

    fn collect_attrs(&self, out: &mut Vec<String>) {
        match self {
            Expr::Literal(_) => {}
            Expr::Attr(name) => {
                if !out.contains(name) {
                    out.push(name.clone());
                }
            }
            Expr::Unary { expr, .. } | Expr::Cast { expr, .. } | Expr::IsNull { expr, .. } => {
                expr.collect_attrs(out)
            }
            Expr::InList { expr, .. } => expr.collect_attrs(out),
            Expr::Binary { left, right, .. } => {
                left.collect_attrs(out);
                right.collect_attrs(out);
            }
            Expr::Call { args, .. } => args.iter().for_each(|a| a.collect_attrs(out)),
            Expr::Between {
                expr, low, high, ..
            } => {
                expr.collect_attrs(out);
                low.collect_attrs(out);
                high.collect_attrs(out);
            }
        }
    }
}

/// A `p'...'` prompt string with `{attr}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub raw_text: String,
    pub placeholders: Vec<String>,
    /// Constraint text appended by the optimizer; never scanned for placeholders.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instructions: Vec<String>,
}

impl PromptTemplate {
    /// Substitutes placeholders and appends the constraints section, if any.
    pub fn render(&self, mut lookup: impl FnMut(&str) -> String) -> String {
        let mut out = String::with_capacity(self.raw_text.len());
        let mut chars = self.raw_text.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    out.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    out.push('}');
                }
                '{' => {
                    let name: String = chars.by_ref().take_while(|&c| c != '}').collect();
                    out.push_str(&lookup(name.trim()));
                }
                c => out.push(c),
            }
        }
        if !self.instructions.is_empty() {
            out.push_str("\nConstraints: ");
            out.push_str(&self.instructions.join("; "));
        }
        out
    }

    /// Distinct placeholder names in order of first appearance.
    pub fn inputs(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.placeholders {
            if !out.contains(p) {
                out.push(p.clone());
            }
        }
        out
    }
}

/// Input of `SET`, `EXTEND` and `WHERE`: either a plain expression or a prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Expr(Expr),
    Prompt(PromptTemplate),
}

impl Operand {
    pub fn prompt(&self) -> Option<&PromptTemplate> {
        match self {
            Operand::Prompt(p) => Some(p),
            Operand::Expr(_) => None,
        }
    }

    pub fn attributes(&self) -> Vec<String> {
        match self {
            Operand::Expr(e) => e.attributes(),
            Operand::Prompt(p) => p.inputs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Annotation {
    Extractive,
    Abstractive,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FailureMode {
    Continue,
    Ignore,
    Abort,
}

impl FailureMode {
    pub fn keyword(self) -> &'static str {
        match self {
            FailureMode::Continue => "CONTINUE",
            FailureMode::Ignore => "IGNORE",
            FailureMode::Abort => "ABORT",
        }
    }
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Target {
    Attr(String),
    /// An operator named with `AS` on a `WHERE`.
    Operator(String),
}

impl Target {
    pub fn name(&self) -> &str {
        match self {
            Target::Attr(n) | Target::Operator(n) => n,
        }
    }
}

/// How an inclusion/exclusion constraint recognizes a match.
#[derive(Debug, Clone, PartialEq)]
pub enum Matcher {
    Literal(String),
    Regex(String),
    LiteralSet(Vec<String>),
    Prompt(PromptTemplate),
}

impl Matcher {
    pub fn is_prompt(&self) -> bool {
        matches!(self, Matcher::Prompt(_))
    }
}

/// Value domains that are checked deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    Type { ty: DataType, nullable: bool },
    Regex { pattern: String },
    Range { lo: f64, hi: f64 },
    /// Text length must be strictly below `limit` characters.
    MaxLength { limit: usize },
    ValueSet { values: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintClass {
    Domain {
        attr: String,
        spec: DomainSpec,
        /// Source expression; absent for implicit type domains.
        expr: Option<Expr>,
    },
    Include(Matcher),
    Exclude(Matcher),
    Grounded,
    Sound,
    Relevant,
    Assertion(Expr),
}

/// Short class names used in records and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Domain,
    Inclusion,
    Exclusion,
    Grounding,
    Soundness,
    Relevance,
    Assertion,
}

impl ConstraintClass {
    pub fn kind(&self) -> ClassKind {
        match self {
            ConstraintClass::Domain { .. } => ClassKind::Domain,
            ConstraintClass::Include(_) => ClassKind::Inclusion,
            ConstraintClass::Exclude(_) => ClassKind::Exclusion,
            ConstraintClass::Grounded => ClassKind::Grounding,
            ConstraintClass::Sound => ClassKind::Soundness,
            ConstraintClass::Relevant => ClassKind::Relevance,
            ConstraintClass::Assertion(_) => ClassKind::Assertion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Declared,
    /// Installed by a declared output type.
    Implicit,
    DefaultRelevance,
    /// Added while expanding a grounding constraint over the lineage of `from`.
    Lineage { from: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintDecl {
    pub id: String,
    pub target: Target,
    pub class: ConstraintClass,
    /// `None` means "use the configured default".
    pub retry: Option<u32>,
    pub on_fail: Option<FailureMode>,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageKind {
    Scan {
        table: String,
    },
    Set {
        attr: String,
        value: Operand,
    },
    Extend {
        value: Operand,
        annotation: Annotation,
        out: String,
        ty: Option<DataType>,
    },
    Where {
        predicate: Operand,
        alias: Option<String>,
    },
    Aggregate {
        prompt: PromptTemplate,
        annotation: Annotation,
        out: String,
        ty: Option<DataType>,
        group_by: Vec<String>,
    },
    Assert(ConstraintDecl),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    /// `None` for source columns whose type was not declared.
    pub ty: Option<DataType>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Self {
        Schema { columns }
    }

    pub fn untyped<S: AsRef<str>>(names: &[S]) -> Self {
        Schema {
            columns: names
                .iter()
                .map(|n| Column {
                    name: n.as_ref().to_string(),
                    ty: None,
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// Adds or replaces a column, keeping position on replacement.
    pub fn upsert(&mut self, name: &str, ty: Option<DataType>) {
        match self.columns.iter_mut().find(|c| c.name == name) {
            Some(c) => c.ty = ty,
            None => self.columns.push(Column {
                name: name.to_string(),
                ty,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub kind: StageKind,
    /// Output schema of this stage.
    pub schema: Schema,
    /// Constraints installed by declared output types.
    pub implicit: Vec<ConstraintDecl>,
}

impl Stage {
    pub fn is_assert(&self) -> bool {
        matches!(self.kind, StageKind::Assert(_))
    }

    pub fn constraint(&self) -> Option<&ConstraintDecl> {
        match &self.kind {
            StageKind::Assert(c) => Some(c),
            _ => None,
        }
    }

    /// Prompt of a semantic operator, if this stage is one.
    pub fn prompt(&self) -> Option<&PromptTemplate> {
        match &self.kind {
            StageKind::Set { value, .. } | StageKind::Extend { value, .. } => value.prompt(),
            StageKind::Where { predicate, .. } => predicate.prompt(),
            StageKind::Aggregate { prompt, .. } => Some(prompt),
            _ => None,
        }
    }

    pub fn prompt_mut(&mut self) -> Option<&mut PromptTemplate> {
        match &mut self.kind {
            StageKind::Set {
                value: Operand::Prompt(p),
                ..
            }
            | StageKind::Extend {
                value: Operand::Prompt(p),
                ..
            }
            | StageKind::Where {
                predicate: Operand::Prompt(p),
                ..
            } => Some(p),
            StageKind::Aggregate { prompt, .. } => Some(prompt),
            _ => None,
        }
    }

    pub fn is_semantic(&self) -> bool {
        self.prompt().is_some()
    }

    /// Attribute written by this stage.
    pub fn produces(&self) -> Option<&str> {
        match &self.kind {
            StageKind::Set { attr, .. } => Some(attr),
            StageKind::Extend { out, .. } | StageKind::Aggregate { out, .. } => Some(out),
            _ => None,
        }
    }

    pub fn alias(&self) -> Option<&str> {
        match &self.kind {
            StageKind::Where { alias, .. } => alias.as_deref(),
            _ => None,
        }
    }

    pub fn annotation(&self) -> Annotation {
        match &self.kind {
            StageKind::Extend { annotation, .. } | StageKind::Aggregate { annotation, .. } => {
                *annotation
            }
            _ => Annotation::None,
        }
    }

    /// Attributes read from the input tuple.
    pub fn inputs(&self) -> Vec<String> {
        match &self.kind {
            StageKind::Scan { .. } => Vec::new(),
            StageKind::Set { value, .. } | StageKind::Extend { value, .. } => value.attributes(),
            StageKind::Where { predicate, .. } => predicate.attributes(),
            StageKind::Aggregate {
                prompt, group_by, ..
            } => {
                let mut v = prompt.inputs();
                for g in group_by {
                    if !v.contains(g) {
                        v.push(g.clone());
                    }
                }
                v
            }
            StageKind::Assert(c) => constraint_attributes(c),
        }
    }

    /// Stable key used by profiles and records to name an operator.
    pub fn key(&self, index: usize) -> String {
        match &self.kind {
            StageKind::Scan { table } => table.clone(),
            StageKind::Where { alias: Some(a), .. } => a.clone(),
            StageKind::Where { alias: None, .. } => format!("where{index}"),
            StageKind::Set { attr, .. } => attr.clone(),
            StageKind::Extend { out, .. } | StageKind::Aggregate { out, .. } => out.clone(),
            StageKind::Assert(c) => c.id.clone(),
        }
    }
}

/// Attributes a constraint reads.
pub fn constraint_attributes(c: &ConstraintDecl) -> Vec<String> {
    match &c.class {
        ConstraintClass::Domain { attr, expr, .. } => match expr {
            Some(e) => e.attributes(),
            None => vec![attr.clone()],
        },
        ConstraintClass::Assertion(e) => e.attributes(),
        _ => match &c.target {
            Target::Attr(a) => vec![a.clone()],
            Target::Operator(_) => Vec::new(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LogicalPlan {
    pub stages: Vec<Stage>,
}

impl LogicalPlan {
    pub fn constraints(&self) -> impl Iterator<Item = &ConstraintDecl> {
        self.stages.iter().flat_map(|s| {
            s.implicit
                .iter()
                .chain(s.constraint().into_iter())
        })
    }

    pub fn constraint(&self, id: &str) -> Option<&ConstraintDecl> {
        self.constraints().find(|c| c.id == id)
    }

    pub fn table(&self) -> Option<&str> {
        self.stages.first().and_then(|s| match &s.kind {
            StageKind::Scan { table } => Some(table.as_str()),
            _ => None,
        })
    }
}
