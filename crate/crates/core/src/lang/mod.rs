//! The pipe-SQL dialect: lexing, parsing, resolution and printing.
//!
//! ```
//! let plan = sicql::lang::parse_query(
//!     "FROM notes |> EXTEND p'summarize {body}' AS s STRING |> ASSERT s GROUNDED",
//! ).unwrap();
//! assert_eq!(plan.stages.len(), 3);
//! assert_eq!(plan.constraint("c1").unwrap().target.name(), "s");
//! ```

pub mod ast;
pub mod format;
mod lexer;
mod parser;
mod resolve;

pub use ast::*;
pub use format::{constraint_sql, expr_sql, format_logical, predicate_sql};
pub use lexer::parse_prompt_string;
pub use resolve::{infer_type, Catalog, ExprType};

use parser::Parser;

/// A syntax or resolution error with a 1-based source position.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{line}:{column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, column: usize, message: impl Into<String>) -> Self {
        ParseError {
            line,
            column,
            message: message.into(),
        }
    }

    /// Shifts a position computed relative to an embedded string.
    pub fn offset(mut self, line: usize, column: usize) -> Self {
        if self.line == 1 {
            self.column += column.saturating_sub(1);
        }
        self.line += line.saturating_sub(1);
        self
    }
}

/// Parses a query whose source columns are inferred from use.
pub fn parse_query(src: &str) -> Result<LogicalPlan, ParseError> {
    let raw = Parser::new(src)?.parse_query()?;
    resolve::resolve(raw, None)
}

/// Parses a query against known table schemas.
pub fn parse_query_with_catalog(src: &str, catalog: &Catalog) -> Result<LogicalPlan, ParseError> {
    let raw = Parser::new(src)?.parse_query()?;
    resolve::resolve(raw, Some(catalog))
}

/// Parses a standalone `ASSERT ...` declaration into one constraint per
/// conjunct. Names in `aliases` are treated as operator targets.
pub fn parse_constraints<S: AsRef<str>>(
    text: &str,
    aliases: &[S],
) -> Result<Vec<ConstraintDecl>, ParseError> {
    let mut p = Parser::new(text)?.with_aliases(aliases);
    p.expect_assert()?;
    let kinds = p.parse_assert()?;
    if !p.at_end() {
        return Err(ParseError::new(1, 1, "trailing input after constraint"));
    }
    Ok(kinds
        .into_iter()
        .enumerate()
        .filter_map(|(i, k)| match k {
            StageKind::Assert(mut c) => {
                c.id = format!("c{}", i + 1);
                Some(c)
            }
            _ => None,
        })
        .collect())
}
