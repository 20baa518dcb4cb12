//! Parser for the supported regex subset.
//!
//! Supported: literals, escapes, `.`, classes with ranges and negation,
//! `\d \w \s` and their negations (ASCII), groups, `|`, `* + ?`, counted
//! repetition, and `^`/`$` at the edges of top-level alternatives.

use super::dfa::RegexError;

pub const MAX_CHAR: char = char::MAX;

/// Sorted, non-overlapping, non-adjacent inclusive ranges.
pub type Ranges = Vec<(char, char)>;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Empty,
    Class(Ranges),
    Concat(Vec<Node>),
    Alt(Vec<Node>),
    Repeat {
        node: Box<Node>,
        min: u32,
        max: Option<u32>,
    },
}

/// One top-level alternative with its anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub anchored_start: bool,
    pub anchored_end: bool,
    pub node: Node,
}

pub(crate) fn succ(c: char) -> Option<char> {
    match c {
        '\u{D7FF}' => Some('\u{E000}'),
        MAX_CHAR => None,
        c => char::from_u32(c as u32 + 1),
    }
}

pub(crate) fn pred(c: char) -> Option<char> {
    match c {
        '\u{E000}' => Some('\u{D7FF}'),
        '\0' => None,
        c => char::from_u32(c as u32 - 1),
    }
}

pub(crate) fn normalize(mut r: Ranges) -> Ranges {
    r.sort();
    let mut out: Ranges = Vec::with_capacity(r.len());
    for (lo, hi) in r {
        if let Some(last) = out.last_mut() {
            if succ(last.1).is_none_or(|n| lo <= n) {
                if hi > last.1 {
                    last.1 = hi;
                }
                continue;
            }
        }
        out.push((lo, hi));
    }
    out
}

pub(crate) fn complement(r: &Ranges) -> Ranges {
    let mut out = Vec::new();
    let mut next = Some('\0');
    for &(lo, hi) in r {
        if let Some(n) = next {
            if n < lo {
                out.push((n, pred(lo).expect("lo > n >= 0")));
            }
        }
        next = succ(hi);
    }
    if let Some(n) = next {
        out.push((n, MAX_CHAR));
    }
    out
}

fn digit() -> Ranges {
    vec![('0', '9')]
}

fn word() -> Ranges {
    normalize(vec![('0', '9'), ('A', 'Z'), ('_', '_'), ('a', 'z')])
}

fn space() -> Ranges {
    normalize(vec![('\t', '\r'), (' ', ' ')])
}

pub(crate) fn any_but_newline() -> Ranges {
    complement(&vec![('\n', '\n')])
}

const MAX_REPEAT: u32 = 1000;

struct P<'a> {
    chars: Vec<char>,
    pos: usize,
    src: &'a str,
}

/// Parses a pattern into its top-level branches.
pub fn parse_regex(pattern: &str) -> Result<Vec<Branch>, RegexError> {
    let mut p = P {
        chars: pattern.chars().collect(),
        pos: 0,
        src: pattern,
    };
    let mut branches = Vec::new();
    loop {
        let anchored_start = p.eat('^');
        let (node, anchored_end) = p.concat(true)?;
        branches.push(Branch {
            anchored_start,
            anchored_end,
            node,
        });
        if p.eat('|') {
            continue;
        }
        if p.pos < p.chars.len() {
            return Err(p.err("unmatched `)`"));
        }
        return Ok(branches);
    }
}

impl P<'_> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn err(&self, msg: &str) -> RegexError {
        RegexError::Syntax {
            pattern: self.src.to_string(),
            position: self.pos,
            message: msg.to_string(),
        }
    }

    fn unsupported(&self, what: &str) -> RegexError {
        RegexError::Unsupported(format!("{what} in `{}`", self.src))
    }

    /// Parses until `|`, `)` or end. At top level a `$` is accepted only
    /// right before one of those.
    fn concat(&mut self, top: bool) -> Result<(Node, bool), RegexError> {
        let mut items = Vec::new();
        let mut anchored_end = false;
        while let Some(c) = self.peek() {
            match c {
                '|' | ')' => break,
                '$' => {
                    self.pos += 1;
                    if top && matches!(self.peek(), None | Some('|')) {
                        anchored_end = true;
                        break;
                    }
                    return Err(self.unsupported("`$` away from the end of a top-level alternative"));
                }
                '^' => {
                    return Err(
                        self.unsupported("`^` away from the start of a top-level alternative")
                    )
                }
                _ => {
                    let atom = self.atom()?;
                    let atom = self.quantifiers(atom)?;
                    items.push(atom);
                }
            }
        }
        let node = match items.len() {
            0 => Node::Empty,
            1 => items.pop().expect("one item"),
            _ => Node::Concat(items),
        };
        Ok((node, anchored_end))
    }

    fn alternation(&mut self) -> Result<Node, RegexError> {
        let mut alts = vec![self.concat(false)?.0];
        while self.eat('|') {
            alts.push(self.concat(false)?.0);
        }
        Ok(if alts.len() == 1 {
            alts.pop().expect("one alternative")
        } else {
            Node::Alt(alts)
        })
    }

    fn atom(&mut self) -> Result<Node, RegexError> {
        let c = self.peek().expect("caller checked");
        self.pos += 1;
        match c {
            '(' => {
                if self.eat('?') {
                    if !self.eat(':') {
                        return Err(self.unsupported("group flags"));
                    }
                }
                let inner = self.alternation()?;
                if !self.eat(')') {
                    return Err(self.err("unclosed group"));
                }
                Ok(inner)
            }
            '[' => self.class(),
            '.' => Ok(Node::Class(any_but_newline())),
            '\\' => Ok(Node::Class(self.escape(false)?)),
            '*' | '+' | '?' | '{' => {
                self.pos -= 1;
                Err(self.err("repetition operator without an operand"))
            }
            c => Ok(Node::Class(vec![(c, c)])),
        }
    }

    fn escape(&mut self, in_class: bool) -> Result<Ranges, RegexError> {
        let Some(c) = self.peek() else {
            return Err(self.err("trailing backslash"));
        };
        self.pos += 1;
        Ok(match c {
            'd' => digit(),
            'D' => complement(&digit()),
            'w' => word(),
            'W' => complement(&word()),
            's' => space(),
            'S' => complement(&space()),
            'n' => vec![('\n', '\n')],
            't' => vec![('\t', '\t')],
            'r' => vec![('\r', '\r')],
            '1'..='9' => return Err(self.unsupported("backreferences")),
            'b' | 'B' | 'A' | 'z' if !in_class => return Err(self.unsupported("assertions")),
            c if c.is_ascii_alphanumeric() => {
                return Err(self.unsupported(&format!("escape `\\{c}`")))
            }
            c => vec![(c, c)],
        })
    }

    fn class(&mut self) -> Result<Node, RegexError> {
        let negated = self.eat('^');
        let mut ranges: Ranges = Vec::new();
        let mut first = true;
        loop {
            let Some(c) = self.peek() else {
                return Err(self.err("unclosed character class"));
            };
            if c == ']' && !first {
                self.pos += 1;
                break;
            }
            first = false;
            if c == '[' {
                return Err(self.unsupported("nested classes"));
            }
            self.pos += 1;
            let lo = if c == '\\' {
                let r = self.escape(true)?;
                if r.len() != 1 || r[0].0 != r[0].1 {
                    ranges.extend(r);
                    continue;
                }
                r[0].0
            } else {
                c
            };
            if self.peek() == Some('-') && self.chars.get(self.pos + 1).is_some_and(|&n| n != ']')
            {
                self.pos += 1;
                let h = self.peek().expect("checked");
                self.pos += 1;
                let hi = if h == '\\' {
                    let r = self.escape(true)?;
                    if r.len() != 1 || r[0].0 != r[0].1 {
                        return Err(self.err("invalid range end"));
                    }
                    r[0].0
                } else {
                    h
                };
                if hi < lo {
                    return Err(self.err("invalid range"));
                }
                ranges.push((lo, hi));
            } else {
                ranges.push((lo, lo));
            }
        }
        let ranges = normalize(ranges);
        Ok(Node::Class(if negated {
            complement(&ranges)
        } else {
            ranges
        }))
    }

    fn number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return None;
        }
        self.chars[start..self.pos]
            .iter()
            .collect::<String>()
            .parse()
            .ok()
    }

    fn quantifiers(&mut self, mut node: Node) -> Result<Node, RegexError> {
        loop {
            let (min, max) = match self.peek() {
                Some('*') => (0, None),
                Some('+') => (1, None),
                Some('?') => (0, Some(1)),
                Some('{') => {
                    self.pos += 1;
                    let min = self.number().ok_or_else(|| self.err("expected a count"))?;
                    let max = if self.eat(',') {
                        if self.peek() == Some('}') {
                            None
                        } else {
                            Some(self.number().ok_or_else(|| self.err("expected a count"))?)
                        }
                    } else {
                        Some(min)
                    };
                    if self.peek() != Some('}') {
                        return Err(self.err("unclosed counted repetition"));
                    }
                    if max.is_some_and(|m| m < min) {
                        return Err(self.err("invalid repetition range"));
                    }
                    if min.max(max.unwrap_or(0)) > MAX_REPEAT {
                        return Err(RegexError::TooLarge);
                    }
                    (min, max)
                }
                _ => return Ok(node),
            };
            self.pos += 1;
            // Laziness does not change the language.
            self.eat('?');
            node = Node::Repeat {
                node: Box::new(node),
                min,
                max,
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_round_trips() {
        let r = normalize(vec![('a', 'c'), ('b', 'f'), ('x', 'x'), ('\u{D7FF}', '\u{D7FF}')]);
        assert_eq!(r, vec![('a', 'f'), ('x', 'x'), ('\u{D7FF}', '\u{D7FF}')]);
        assert_eq!(complement(&complement(&r)), r);
        let c = complement(&r);
        assert_eq!(c.last(), Some(&('\u{E000}', MAX_CHAR)));
    }

    #[test]
    fn anchors_only_at_branch_edges() {
        let b = parse_regex("^a|b$").unwrap();
        assert!(b[0].anchored_start && !b[0].anchored_end);
        assert!(!b[1].anchored_start && b[1].anchored_end);
        assert!(matches!(
            parse_regex("(^a)"),
            Err(RegexError::Unsupported(_))
        ));
        assert!(matches!(parse_regex("a$b"), Err(RegexError::Unsupported(_))));
    }

    #[test]
    fn rejects_backreferences_and_bad_syntax() {
        assert!(matches!(parse_regex(r"(a)\1"), Err(RegexError::Unsupported(_))));
        for bad in ["(a", "[a", "*a", "a{2", "a{3,1}", "a)", "\\"] {
            assert!(
                matches!(parse_regex(bad), Err(RegexError::Syntax { .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn class_edge_cases() {
        let b = parse_regex("[]a-c-]").unwrap();
        assert_eq!(
            b[0].node,
            Node::Class(vec![('-', '-'), (']', ']'), ('a', 'c')])
        );
    }
}
