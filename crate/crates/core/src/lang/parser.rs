//! Recursive-descent parser producing unresolved stages.

use std::collections::HashSet;

use super::ast::*;
use super::lexer::{tokenize, Tok, Token};
use super::ParseError;

const RESERVED: &[&str] = &[
    "FROM",
    "SET",
    "EXTEND",
    "WHERE",
    "AGGREGATE",
    "ASSERT",
    "AS",
    "AND",
    "OR",
    "NOT",
    "RETRY",
    "CONTINUE",
    "IGNORE",
    "ABORT",
    "ON",
    "FAIL",
    "GROUNDED",
    "INCLUDES",
    "EXCLUDES",
    "SOUND",
    "RELEVANT",
    "EXTRACTIVE",
    "ABSTRACTIVE",
    "GROUP",
    "BY",
    "STRING",
    "INT",
    "FLOAT",
    "BOOL",
    "DATE",
    "TRUE",
    "FALSE",
    "NULL",
    "IN",
    "BETWEEN",
    "IS",
    "CURRENT_DATE",
];

fn is_reserved(word: &str) -> bool {
    RESERVED.iter().any(|k| k.eq_ignore_ascii_case(word))
}

/// One `|>` stage as written, before schema resolution. Asserts carry
/// their source position for error reporting.
#[derive(Debug, Clone)]
pub(crate) struct RawStage {
    pub kind: StageKind,
    pub line: usize,
    pub column: usize,
}

pub(crate) struct Parser {
    toks: Vec<Token>,
    pos: usize,
    aliases: HashSet<String>,
}

impl Parser {
    pub fn new(src: &str) -> Result<Self, ParseError> {
        Ok(Parser {
            toks: tokenize(src)?,
            pos: 0,
            aliases: HashSet::new(),
        })
    }

    pub fn with_aliases<S: AsRef<str>>(mut self, aliases: &[S]) -> Self {
        self.aliases
            .extend(aliases.iter().map(|a| a.as_ref().to_string()));
        self
    }

    pub fn at_end(&self) -> bool {
        self.peek().tok == Tok::Eof
    }

    pub fn expect_assert(&mut self) -> Result<(), ParseError> {
        self.expect_kw("ASSERT")
    }

    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn peek_at(&self, n: usize) -> &Tok {
        let i = (self.pos + n).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error_here(&self, msg: impl Into<String>) -> ParseError {
        let t = self.peek();
        ParseError::new(t.line, t.column, msg)
    }

    fn unexpected(&self, expected: &str) -> ParseError {
        self.error_here(format!(
            "expected {expected}, found {}",
            self.peek().tok.describe()
        ))
    }

    fn at_kw(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn kw_at(&self, n: usize, kw: &str) -> bool {
        matches!(self.peek_at(n), Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.at_kw(kw) {
            self.next();
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{kw}`")))
        }
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if &self.peek().tok == tok {
            self.next();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: Tok) -> Result<(), ParseError> {
        if self.eat(&tok) {
            Ok(())
        } else {
            Err(self.unexpected(&tok.describe()))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match &self.peek().tok {
            Tok::Ident(s) if !is_reserved(s) => {
                let s = s.clone();
                self.next();
                Ok(s)
            }
            _ => Err(self.unexpected("an identifier")),
        }
    }

    pub fn parse_query(&mut self) -> Result<Vec<RawStage>, ParseError> {
        let start = self.peek().clone();
        self.expect_kw("FROM")?;
        let table = self.ident()?;
        let mut stages = vec![RawStage {
            kind: StageKind::Scan { table },
            line: start.line,
            column: start.column,
        }];
        while self.eat(&Tok::Pipe) {
            let here = self.peek().clone();
            let kinds = self.parse_stage()?;
            stages.extend(kinds.into_iter().map(|kind| RawStage {
                kind,
                line: here.line,
                column: here.column,
            }));
        }
        if self.peek().tok != Tok::Eof {
            return Err(self.unexpected("`|>` or end of query"));
        }
        Ok(stages)
    }

    fn parse_stage(&mut self) -> Result<Vec<StageKind>, ParseError> {
        if self.eat_kw("SET") {
            let attr = self.ident()?;
            self.expect(Tok::Eq)?;
            let value = self.operand()?;
            Ok(vec![StageKind::Set { attr, value }])
        } else if self.eat_kw("EXTEND") {
            let annotation = self.annotation();
            let value = self.operand()?;
            self.expect_kw("AS")?;
            let out = self.ident()?;
            let ty = self.opt_type();
            Ok(vec![StageKind::Extend {
                value,
                annotation,
                out,
                ty,
            }])
        } else if self.eat_kw("WHERE") {
            let predicate = self.operand()?;
            let alias = if self.eat_kw("AS") {
                let a = self.ident()?;
                if !self.aliases.insert(a.clone()) {
                    return Err(self.error_here(format!("duplicate alias `{a}`")));
                }
                Some(a)
            } else {
                None
            };
            Ok(vec![StageKind::Where { predicate, alias }])
        } else if self.eat_kw("AGGREGATE") {
            let annotation = self.annotation();
            let prompt = match self.peek().tok.clone() {
                Tok::Prompt(p) => {
                    self.next();
                    p
                }
                _ => return Err(self.unexpected("a prompt string")),
            };
            self.expect_kw("AS")?;
            let out = self.ident()?;
            let ty = self.opt_type();
            let mut group_by = Vec::new();
            if self.eat_kw("GROUP") {
                self.expect_kw("BY")?;
                group_by.push(self.ident()?);
                while self.eat(&Tok::Comma) {
                    group_by.push(self.ident()?);
                }
            }
            Ok(vec![StageKind::Aggregate {
                prompt,
                annotation,
                out,
                ty,
                group_by,
            }])
        } else if self.eat_kw("ASSERT") {
            self.parse_assert()
        } else {
            Err(self.unexpected("SET, EXTEND, WHERE, AGGREGATE or ASSERT"))
        }
    }

    fn annotation(&mut self) -> Annotation {
        if self.eat_kw("EXTRACTIVE") {
            Annotation::Extractive
        } else if self.eat_kw("ABSTRACTIVE") {
            Annotation::Abstractive
        } else {
            Annotation::None
        }
    }

    fn opt_type(&mut self) -> Option<DataType> {
        if let Tok::Ident(s) = &self.peek().tok {
            if let Some(t) = DataType::from_keyword(s) {
                self.next();
                return Some(t);
            }
        }
        None
    }

    fn operand(&mut self) -> Result<Operand, ParseError> {
        if let Tok::Prompt(p) = &self.peek().tok {
            let p = p.clone();
            self.next();
            return Ok(Operand::Prompt(p));
        }
        Ok(Operand::Expr(self.expr()?))
    }

    /// Parses `pred (AND pred)* [RETRY n] [mode ON FAIL]` into one constraint per conjunct.
    pub fn parse_assert(&mut self) -> Result<Vec<StageKind>, ParseError> {
        let mut preds = vec![self.pred()?];
        while self.eat_kw("AND") {
            preds.push(self.pred()?);
        }
        let mut retry = None;
        if self.eat_kw("RETRY") {
            match self.peek().tok.clone() {
                Tok::Int(n) => {
                    self.next();
                    retry = Some(u32::try_from(n).map_err(|_| {
                        self.error_here(format!("retry threshold {n} out of range"))
                    })?);
                }
                Tok::Minus => {
                    return Err(self.error_here("retry threshold must be non-negative"));
                }
                _ => return Err(self.unexpected("a retry threshold")),
            }
        }
        let mut on_fail = None;
        for mode in [
            FailureMode::Continue,
            FailureMode::Ignore,
            FailureMode::Abort,
        ] {
            if self.eat_kw(mode.keyword()) {
                self.expect_kw("ON")?;
                self.expect_kw("FAIL")?;
                on_fail = Some(mode);
                break;
            }
        }
        Ok(preds
            .into_iter()
            .map(|(target, class)| {
                StageKind::Assert(ConstraintDecl {
                    id: String::new(),
                    target,
                    class,
                    retry,
                    on_fail,
                    origin: Origin::Declared,
                })
            })
            .collect())
    }

    fn target_for(&self, name: String) -> Target {
        if self.aliases.contains(&name) {
            Target::Operator(name)
        } else {
            Target::Attr(name)
        }
    }

    fn pred(&mut self) -> Result<(Target, ConstraintClass), ParseError> {
        if let Tok::Ident(name) = &self.peek().tok {
            if !is_reserved(name) {
                let name = name.clone();
                let special = ["GROUNDED", "INCLUDES", "EXCLUDES", "SOUND", "RELEVANT"]
                    .into_iter()
                    .find(|k| self.kw_at(1, k));
                if let Some(kw) = special {
                    let (line, column) = (self.peek().line, self.peek().column);
                    self.next();
                    self.next();
                    let target = self.target_for(name.clone());
                    let class = match kw {
                        "GROUNDED" => ConstraintClass::Grounded,
                        "SOUND" => {
                            if !matches!(target, Target::Operator(_)) {
                                return Err(ParseError::new(
                                    line,
                                    column,
                                    format!("SOUND requires an operator alias, `{name}` is not one"),
                                ));
                            }
                            ConstraintClass::Sound
                        }
                        "RELEVANT" => ConstraintClass::Relevant,
                        "INCLUDES" => ConstraintClass::Include(self.matcher()?),
                        _ => ConstraintClass::Exclude(self.matcher()?),
                    };
                    if matches!(
                        class,
                        ConstraintClass::Grounded
                            | ConstraintClass::Include(_)
                            | ConstraintClass::Exclude(_)
                    ) && matches!(target, Target::Operator(_))
                    {
                        return Err(ParseError::new(
                            line,
                            column,
                            format!("`{name}` names an operator; {kw} needs an attribute"),
                        ));
                    }
                    return Ok((target, class));
                }
            }
        }
        let (line, column) = (self.peek().line, self.peek().column);
        let expr = self.assert_expr()?;
        if let Expr::Attr(name) = &expr {
            return Err(self.error_here(format!(
                "expected GROUNDED, INCLUDES, EXCLUDES, SOUND, RELEVANT or a predicate after `{name}`, found {}",
                self.peek().tok.describe()
            )));
        }
        if expr.attributes().is_empty() {
            return Err(ParseError::new(
                line,
                column,
                "assertion must reference at least one attribute",
            ));
        }
        Ok(classify(expr))
    }

    fn matcher(&mut self) -> Result<Matcher, ParseError> {
        match self.peek().tok.clone() {
            Tok::Str(s) => {
                self.next();
                Ok(Matcher::Literal(s))
            }
            Tok::Regex(r) => {
                self.next();
                regex::Regex::new(&r)
                    .map_err(|e| self.error_here(format!("invalid regex: {e}")))?;
                Ok(Matcher::Regex(r))
            }
            Tok::Prompt(p) => {
                self.next();
                Ok(Matcher::Prompt(p))
            }
            Tok::LParen => {
                self.next();
                let mut items = Vec::new();
                loop {
                    match self.peek().tok.clone() {
                        Tok::Str(s) => {
                            self.next();
                            items.push(s);
                        }
                        _ => return Err(self.unexpected("a string literal")),
                    }
                    if !self.eat(&Tok::Comma) {
                        break;
                    }
                }
                self.expect(Tok::RParen)?;
                Ok(Matcher::LiteralSet(items))
            }
            _ => Err(self.unexpected("a string, regex, prompt or ( list )")),
        }
    }

    // Expression grammar, loosest to tightest:
    //   or  := and (OR and)*
    //   and := not (AND not)*
    //   not := NOT not | cmp
    //   cmp := concat [op concat | [NOT] IN (..) | [NOT] BETWEEN .. AND .. | IS [NOT] NULL]
    //   concat := add (|| add)*
    //   add := mul ((+|-) mul)*
    //   mul := unary ((*|/) unary)*
    //   unary := - unary | postfix
    //   postfix := primary (:: TYPE)*

    pub fn expr(&mut self) -> Result<Expr, ParseError> {
        self.or_expr(false)
    }

    /// Inside ASSERT a top-level AND separates conjuncts, so the operands of
    /// OR are parsed at NOT level; parentheses restore the full grammar.
    fn assert_expr(&mut self) -> Result<Expr, ParseError> {
        self.or_expr(true)
    }

    fn or_expr(&mut self, in_assert: bool) -> Result<Expr, ParseError> {
        let mut left = if in_assert {
            self.not_expr()?
        } else {
            self.and_expr()?
        };
        while self.eat_kw("OR") {
            let right = if in_assert {
                self.not_expr()?
            } else {
                self.and_expr()?
            };
            left = Expr::binary(BinaryOp::Or, left, right);
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.not_expr()?;
        while self.eat_kw("AND") {
            let right = self.not_expr()?;
            left = Expr::binary(BinaryOp::And, left, right);
        }
        Ok(left)
    }

    fn not_expr(&mut self) -> Result<Expr, ParseError> {
        if self.eat_kw("NOT") {
            let inner = self.not_expr()?;
            return Ok(Expr::Unary {
                op: UnaryOp::Not,
                expr: Box::new(inner),
            });
        }
        self.cmp_expr()
    }

    fn cmp_expr(&mut self) -> Result<Expr, ParseError> {
        let left = self.concat_expr()?;
        let op = match self.peek().tok {
            Tok::Eq => Some(BinaryOp::Eq),
            Tok::NotEq => Some(BinaryOp::NotEq),
            Tok::Lt => Some(BinaryOp::Lt),
            Tok::LtEq => Some(BinaryOp::LtEq),
            Tok::Gt => Some(BinaryOp::Gt),
            Tok::GtEq => Some(BinaryOp::GtEq),
            _ => None,
        };
        if let Some(op) = op {
            self.next();
            let right = self.concat_expr()?;
            return Ok(Expr::binary(op, left, right));
        }
        if self.eat_kw("IS") {
            let negated = self.eat_kw("NOT");
            self.expect_kw("NULL")?;
            return Ok(Expr::IsNull {
                expr: Box::new(left),
                negated,
            });
        }
        let negated = if self.at_kw("NOT") && (self.kw_at(1, "IN") || self.kw_at(1, "BETWEEN")) {
            self.next();
            true
        } else {
            false
        };
        if self.eat_kw("IN") {
            self.expect(Tok::LParen)?;
            let mut list = vec![self.literal()?];
            while self.eat(&Tok::Comma) {
                list.push(self.literal()?);
            }
            self.expect(Tok::RParen)?;
            return Ok(Expr::InList {
                expr: Box::new(left),
                list,
                negated,
            });
        }
        if self.eat_kw("BETWEEN") {
            let low = self.concat_expr()?;
            self.expect_kw("AND")?;
            let high = self.concat_expr()?;
            return Ok(Expr::Between {
                expr: Box::new(left),
                low: Box::new(low),
                high: Box::new(high),
                negated,
            });
        }
        Ok(left)
    }

    fn literal(&mut self) -> Result<Literal, ParseError> {
        let neg = self.eat(&Tok::Minus);
        let lit = match self.peek().tok.clone() {
            Tok::Int(i) => Literal::Int(if neg { -i } else { i }),
            Tok::Float(f) => Literal::Float(if neg { -f } else { f }),
            Tok::Str(s) if !neg => Literal::String(s),
            Tok::Ident(s) if !neg && s.eq_ignore_ascii_case("TRUE") => Literal::Bool(true),
            Tok::Ident(s) if !neg && s.eq_ignore_ascii_case("FALSE") => Literal::Bool(false),
            Tok::Ident(s) if !neg && s.eq_ignore_ascii_case("NULL") => Literal::Null,
            _ => return Err(self.unexpected("a literal")),
        };
        self.next();
        Ok(lit)
    }

    fn concat_expr(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.add_expr()?;
        while self.eat(&Tok::Concat) {
            let right = self.add_expr()?;
            left = Expr::binary(BinaryOp::Concat, left, right);
        }
        Ok(left)
    }

    fn add_expr(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.mul_expr()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinaryOp::Add,
                Tok::Minus => BinaryOp::Sub,
                _ => return Ok(left),
            };
            self.next();
            let right = self.mul_expr()?;
            left = Expr::binary(op, left, right);
        }
    }

    fn mul_expr(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.unary_expr()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinaryOp::Mul,
                Tok::Slash => BinaryOp::Div,
                _ => return Ok(left),
            };
            self.next();
            let right = self.unary_expr()?;
            left = Expr::binary(op, left, right);
        }
    }

    fn unary_expr(&mut self) -> Result<Expr, ParseError> {
        let mut e = if self.eat(&Tok::Minus) {
            // A minus directly before a number is part of the literal.
            match self.peek().tok {
                Tok::Int(i) => {
                    self.next();
                    Expr::Literal(Literal::Int(-i))
                }
                Tok::Float(f) => {
                    self.next();
                    Expr::Literal(Literal::Float(-f))
                }
                _ => {
                    let inner = self.unary_expr()?;
                    return Ok(Expr::Unary {
                        op: UnaryOp::Neg,
                        expr: Box::new(inner),
                    });
                }
            }
        } else {
            self.primary()?
        };
        while self.eat(&Tok::DoubleColon) {
            let ty = match &self.peek().tok {
                Tok::Ident(s) => DataType::from_keyword(s),
                _ => None,
            }
            .ok_or_else(|| self.unexpected("a type name"))?;
            self.next();
            e = Expr::Cast {
                expr: Box::new(e),
                ty,
            };
        }
        Ok(e)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Int(i) => {
                self.next();
                Ok(Expr::Literal(Literal::Int(i)))
            }
            Tok::Float(f) => {
                self.next();
                Ok(Expr::Literal(Literal::Float(f)))
            }
            Tok::Str(s) => {
                self.next();
                Ok(Expr::Literal(Literal::String(s)))
            }
            Tok::Regex(r) => {
                self.next();
                Ok(Expr::Literal(Literal::Regex(r)))
            }
            Tok::LParen => {
                self.next();
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Prompt(_) => Err(self.error_here("prompt strings cannot appear inside expressions")),
            Tok::Ident(name) => {
                if name.eq_ignore_ascii_case("TRUE") || name.eq_ignore_ascii_case("FALSE") {
                    self.next();
                    return Ok(Expr::Literal(Literal::Bool(name.eq_ignore_ascii_case("TRUE"))));
                }
                if name.eq_ignore_ascii_case("NULL") {
                    self.next();
                    return Ok(Expr::Literal(Literal::Null));
                }
                if name.eq_ignore_ascii_case("CURRENT_DATE") {
                    self.next();
                    return Ok(Expr::Call {
                        func: Func::CurrentDate,
                        args: Vec::new(),
                    });
                }
                if *self.peek_at(1) == Tok::LParen {
                    let func = Func::from_name(&name).ok_or_else(|| {
                        self.error_here(format!("unknown function `{name}`"))
                    })?;
                    self.next();
                    self.next();
                    let mut args = Vec::new();
                    if !self.eat(&Tok::RParen) {
                        args.push(self.expr()?);
                        while self.eat(&Tok::Comma) {
                            args.push(self.expr()?);
                        }
                        self.expect(Tok::RParen)?;
                    }
                    if args.len() != func.arity() {
                        return Err(ParseError::new(
                            t.line,
                            t.column,
                            format!(
                                "{} takes {} argument(s), got {}",
                                func.name(),
                                func.arity(),
                                args.len()
                            ),
                        ));
                    }
                    if func == Func::RegexpContains {
                        match &args[1] {
                            Expr::Literal(Literal::Regex(p)) | Expr::Literal(Literal::String(p)) => {
                                regex::Regex::new(p).map_err(|e| {
                                    ParseError::new(t.line, t.column, format!("invalid regex: {e}"))
                                })?;
                            }
                            _ => {
                                return Err(ParseError::new(
                                    t.line,
                                    t.column,
                                    "REGEXP_CONTAINS needs a regex literal as second argument",
                                ))
                            }
                        }
                    }
                    return Ok(Expr::Call { func, args });
                }
                let ident = self.ident()?;
                Ok(Expr::Attr(ident))
            }
            _ => Err(self.unexpected("an expression")),
        }
    }
}

/// Recognizes single-attribute domain shapes; everything else is an assertion.
pub(crate) fn classify(expr: Expr) -> (Target, ConstraintClass) {
    let domain = match &expr {
        Expr::Call {
            func: Func::RegexpContains,
            args,
        } => match (&args[0], &args[1]) {
            (Expr::Attr(a), Expr::Literal(Literal::Regex(p) | Literal::String(p))) => Some((
                a.clone(),
                DomainSpec::Regex {
                    pattern: p.clone(),
                },
            )),
            _ => None,
        },
        Expr::Binary {
            op: op @ (BinaryOp::Lt | BinaryOp::LtEq),
            left,
            right,
        } => match (left.as_ref(), right.as_ref()) {
            (
                Expr::Call {
                    func: Func::Length,
                    args,
                },
                Expr::Literal(Literal::Int(n)),
            ) if *n >= 0 => match &args[0] {
                Expr::Attr(a) => Some((
                    a.clone(),
                    DomainSpec::MaxLength {
                        limit: *n as usize + usize::from(*op == BinaryOp::LtEq),
                    },
                )),
                _ => None,
            },
            _ => None,
        },
        Expr::Between {
            expr: inner,
            low,
            high,
            negated: false,
        } => match (inner.as_ref(), number(low), number(high)) {
            (Expr::Attr(a), Some(lo), Some(hi)) if lo <= hi => {
                Some((a.clone(), DomainSpec::Range { lo, hi }))
            }
            _ => None,
        },
        Expr::InList {
            expr: inner,
            list,
            negated: false,
        } => match inner.as_ref() {
            Expr::Attr(a) if !list.iter().any(|l| matches!(l, Literal::Null)) => Some((
                a.clone(),
                DomainSpec::ValueSet {
                    values: list.iter().map(literal_text).collect(),
                },
            )),
            _ => None,
        },
        _ => None,
    };
    match domain {
        Some((attr, spec)) => (
            Target::Attr(attr.clone()),
            ConstraintClass::Domain {
                attr,
                spec,
                expr: Some(expr),
            },
        ),
        None => {
            // Resolution re-targets assertions at the latest-produced attribute.
            let first = expr.attributes().remove(0);
            (Target::Attr(first), ConstraintClass::Assertion(expr))
        }
    }
}

fn number(e: &Expr) -> Option<f64> {
    match e {
        Expr::Literal(Literal::Int(i)) => Some(*i as f64),
        Expr::Literal(Literal::Float(f)) => Some(*f),
        Expr::Unary {
            op: UnaryOp::Neg,
            expr,
        } => number(expr).map(|v| -v),
        _ => None,
    }
}

pub(crate) fn literal_text(l: &Literal) -> String {
    match l {
        Literal::Null => "NULL".into(),
        Literal::Bool(b) => b.to_string(),
        Literal::Int(i) => i.to_string(),
        Literal::Float(f) => f.to_string(),
        Literal::String(s) | Literal::Regex(s) => s.clone(),
    }
}
