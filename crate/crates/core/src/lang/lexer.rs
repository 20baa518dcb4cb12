use super::ast::PromptTemplate;
use super::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    Regex(String),
    Prompt(PromptTemplate),
    Pipe,
    LParen,
    RParen,
    Comma,
    Eq,
    NotEq,
    Lt,
    LtEq,
    Gt,
    GtEq,
    Plus,
    Minus,
    Star,
    Slash,
    Concat,
    DoubleColon,
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(i) => format!("`{i}`"),
            Tok::Float(f) => format!("`{f}`"),
            Tok::Str(_) => "string literal".into(),
            Tok::Regex(_) => "regex literal".into(),
            Tok::Prompt(_) => "prompt string".into(),
            Tok::Pipe => "`|>`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Eq => "`=`".into(),
            Tok::NotEq => "`<>`".into(),
            Tok::Lt => "`<`".into(),
            Tok::LtEq => "`<=`".into(),
            Tok::Gt => "`>`".into(),
            Tok::GtEq => "`>=`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Concat => "`||`".into(),
            Tok::DoubleColon => "`::`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub line: usize,
    pub column: usize,
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
    line: usize,
    column: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek2(&self) -> Option<char> {
        let mut it = self.src[self.pos..].chars();
        it.next();
        it.next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn err(&self, line: usize, column: usize, msg: impl Into<String>) -> ParseError {
        ParseError::new(line, column, msg)
    }
}

/// Reads a quoted body starting just after the opening `'`. `''` is an escaped quote
/// unless `raw` is set, in which case the first `'` terminates.
fn quoted(cur: &mut Cursor<'_>, raw: bool, line: usize, col: usize) -> Result<String, ParseError> {
    let mut out = String::new();
    loop {
        match cur.bump() {
            None => return Err(cur.err(line, col, "unterminated string literal")),
            Some('\'') => {
                if !raw && cur.peek() == Some('\'') {
                    cur.bump();
                    out.push('\'');
                } else {
                    return Ok(out);
                }
            }
            Some(c) => out.push(c),
        }
    }
}

pub fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    let mut cur = Cursor {
        src,
        pos: 0,
        line: 1,
        column: 1,
    };
    let mut out = Vec::new();
    loop {
        while let Some(c) = cur.peek() {
            if c.is_whitespace() {
                cur.bump();
            } else if c == '-' && cur.peek2() == Some('-') {
                while let Some(c) = cur.peek() {
                    if c == '\n' {
                        break;
                    }
                    cur.bump();
                }
            } else {
                break;
            }
        }
        let (line, column) = (cur.line, cur.column);
        let Some(c) = cur.peek() else {
            out.push(Token {
                tok: Tok::Eof,
                line,
                column,
            });
            return Ok(out);
        };
        let tok = match c {
            '|' => {
                cur.bump();
                match cur.bump() {
                    Some('>') => Tok::Pipe,
                    Some('|') => Tok::Concat,
                    _ => return Err(cur.err(line, column, "expected `|>` or `||`")),
                }
            }
            '(' => {
                cur.bump();
                Tok::LParen
            }
            ')' => {
                cur.bump();
                Tok::RParen
            }
            ',' => {
                cur.bump();
                Tok::Comma
            }
            '=' => {
                cur.bump();
                Tok::Eq
            }
            '+' => {
                cur.bump();
                Tok::Plus
            }
            '-' => {
                cur.bump();
                Tok::Minus
            }
            '*' => {
                cur.bump();
                Tok::Star
            }
            '/' => {
                cur.bump();
                Tok::Slash
            }
            '!' => {
                cur.bump();
                if cur.bump() == Some('=') {
                    Tok::NotEq
                } else {
                    return Err(cur.err(line, column, "expected `!=`"));
                }
            }
            '<' => {
                cur.bump();
                match cur.peek() {
                    Some('=') => {
                        cur.bump();
                        Tok::LtEq
                    }
                    Some('>') => {
                        cur.bump();
                        Tok::NotEq
                    }
                    _ => Tok::Lt,
                }
            }
            '>' => {
                cur.bump();
                if cur.peek() == Some('=') {
                    cur.bump();
                    Tok::GtEq
                } else {
                    Tok::Gt
                }
            }
            ':' => {
                cur.bump();
                if cur.bump() == Some(':') {
                    Tok::DoubleColon
                } else {
                    return Err(cur.err(line, column, "expected `::`"));
                }
            }
            '\'' => {
                cur.bump();
                Tok::Str(quoted(&mut cur, false, line, column)?)
            }
            c if c.is_ascii_digit() => {
                let start = cur.pos;
                while cur.peek().is_some_and(|c| c.is_ascii_digit()) {
                    cur.bump();
                }
                let mut is_float = false;
                if cur.peek() == Some('.') && cur.peek2().is_some_and(|c| c.is_ascii_digit()) {
                    is_float = true;
                    cur.bump();
                    while cur.peek().is_some_and(|c| c.is_ascii_digit()) {
                        cur.bump();
                    }
                }
                let text = &src[start..cur.pos];
                if is_float {
                    Tok::Float(text.parse().map_err(|_| {
                        cur.err(line, column, format!("invalid number `{text}`"))
                    })?)
                } else {
                    Tok::Int(text.parse().map_err(|_| {
                        cur.err(line, column, format!("integer `{text}` out of range"))
                    })?)
                }
            }
            c if c.is_alphabetic() || c == '_' => {
                if matches!(c, 'p' | 'r') && cur.peek2() == Some('\'') {
                    let start = cur.pos;
                    cur.bump();
                    cur.bump();
                    if c == 'p' {
                        quoted(&mut cur, false, line, column)?;
                        let template = parse_prompt_string(&src[start..cur.pos])
                            .map_err(|e| e.offset(line, column))?;
                        Tok::Prompt(template)
                    } else {
                        Tok::Regex(quoted(&mut cur, true, line, column)?)
                    }
                } else {
                    let start = cur.pos;
                    while cur
                        .peek()
                        .is_some_and(|c| c.is_alphanumeric() || c == '_')
                    {
                        cur.bump();
                    }
                    Tok::Ident(src[start..cur.pos].to_string())
                }
            }
            other => {
                return Err(cur.err(line, column, format!("unexpected character `{other}`")))
            }
        };
        out.push(Token { tok, line, column });
    }
}

/// Parses a complete `p'...'` literal into a template.
///
/// `''` inside the body unescapes to `'`; `{{` and `}}` are literal braces.
pub fn parse_prompt_string(text: &str) -> Result<PromptTemplate, ParseError> {
    let body = text
        .strip_prefix("p'")
        .or_else(|| text.strip_prefix("P'"))
        .ok_or_else(|| ParseError::new(1, 1, "prompt string must start with p'"))?;
    let mut raw = String::new();
    let mut chars = body.char_indices().peekable();
    let mut closed = false;
    while let Some((i, c)) = chars.next() {
        if c == '\'' {
            if chars.peek().map(|&(_, c)| c) == Some('\'') {
                chars.next();
                raw.push('\'');
            } else {
                if i + 1 != body.len() {
                    return Err(ParseError::new(
                        1,
                        i + 3,
                        "unexpected text after end of prompt string",
                    ));
                }
                closed = true;
                break;
            }
        } else {
            raw.push(c);
        }
    }
    if !closed {
        return Err(ParseError::new(1, 1, "unterminated prompt string"));
    }
    let placeholders = scan_placeholders(&raw)?;
    if raw.is_empty() {
        return Err(ParseError::new(1, 1, "prompt string must not be empty"));
    }
    Ok(PromptTemplate {
        raw_text: raw,
        placeholders,
        instructions: Vec::new(),
    })
}

fn scan_placeholders(raw: &str) -> Result<Vec<String>, ParseError> {
    let mut out = Vec::new();
    let mut chars = raw.chars().enumerate().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' if chars.peek().map(|&(_, c)| c) == Some('{') => {
                chars.next();
            }
            '}' if chars.peek().map(|&(_, c)| c) == Some('}') => {
                chars.next();
            }
            '{' => {
                let mut name = String::new();
                let mut closed = false;
                for (_, c) in chars.by_ref() {
                    if c == '}' {
                        closed = true;
                        break;
                    }
                    name.push(c);
                }
                if !closed {
                    return Err(ParseError::new(1, i + 3, "unclosed placeholder `{`"));
                }
                let name = name.trim();
                if name.is_empty() {
                    return Err(ParseError::new(1, i + 3, "empty placeholder `{}`"));
                }
                let valid = name
                    .chars()
                    .next()
                    .is_some_and(|c| c.is_alphabetic() || c == '_')
                    && name.chars().all(|c| c.is_alphanumeric() || c == '_');
                if !valid {
                    return Err(ParseError::new(
                        1,
                        i + 3,
                        format!("invalid placeholder name `{name}`"),
                    ));
                }
                out.push(name.to_string());
            }
            '}' => {
                return Err(ParseError::new(1, i + 3, "unmatched `}` in prompt string"));
            }
            _ => {}
        }
    }
    Ok(out)
}
