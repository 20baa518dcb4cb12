//! Plain-text chain-of-thought block returned by filters.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cot {
    pub premises: Vec<String>,
    pub steps: Vec<String>,
    pub answer: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed reasoning block: {0}")]
pub struct CotError(pub String);

impl Cot {
    pub fn render(&self) -> String {
        let mut out = String::from("PREMISES:\n");
        for p in &self.premises {
            out.push_str(&format!("- {p}\n"));
        }
        out.push_str("STEPS:\n");
        for s in &self.steps {
            out.push_str(&format!("- {s}\n"));
        }
        out.push_str(&format!("ANSWER: {}", self.answer));
        out
    }

    /// Parses `PREMISES:` / `STEPS:` bullet lists followed by `ANSWER:`.
    pub fn parse(text: &str) -> Result<Cot, CotError> {
        enum Section {
            None,
            Premises,
            Steps,
        }
        let mut section = Section::None;
        let (mut premises, mut steps) = (Vec::new(), Vec::new());
        let (mut saw_premises, mut saw_steps) = (false, false);
        let mut answer = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line.eq_ignore_ascii_case("PREMISES:") {
                section = Section::Premises;
                saw_premises = true;
            } else if line.eq_ignore_ascii_case("STEPS:") {
                if !saw_premises {
                    return Err(CotError("STEPS before PREMISES".into()));
                }
                section = Section::Steps;
                saw_steps = true;
            } else if let Some(rest) = strip_prefix_ci(line, "ANSWER:") {
                answer = Some(
                    crate::value::parse_bool(rest)
                        .ok_or_else(|| CotError(format!("answer `{}` is not true or false", rest.trim())))?,
                );
                break;
            } else if let Some(item) = line.strip_prefix("- ") {
                match section {
                    Section::Premises => premises.push(item.trim().to_string()),
                    Section::Steps => steps.push(item.trim().to_string()),
                    Section::None => return Err(CotError("bullet outside a section".into())),
                }
            } else {
                return Err(CotError(format!("unexpected line `{line}`")));
            }
        }
        if !saw_premises {
            return Err(CotError("missing PREMISES header".into()));
        }
        if !saw_steps {
            return Err(CotError("missing STEPS header".into()));
        }
        let answer = answer.ok_or_else(|| CotError("missing ANSWER".into()))?;
        Ok(Cot {
            premises,
            steps,
            answer,
        })
    }
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}
