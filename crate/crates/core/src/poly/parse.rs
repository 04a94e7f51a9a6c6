//! Recursive-descent parser for polynomial expressions.
//!
//! ```text
//! expr   := ['+'|'-'] term (('+'|'-') term)*
//! term   := factor ('*' factor)*
//! factor := base ('^' uint)?
//! base   := number | identifier | '(' expr ')'
//! ```
//!
//! Identifiers resolve to declared variables first, then to named numeric
//! parameters. Positions in errors are byte offsets into the input.

use std::collections::BTreeMap;

use super::{PolyError, Polynomial};

/// Variable names (in order) plus optional named constants.
#[derive(Debug, Clone, Default)]
pub struct ParseContext {
    pub variables: Vec<String>,
    pub parameters: BTreeMap<String, f64>,
}

impl ParseContext {
    pub fn new<S: AsRef<str>>(variables: &[S]) -> Self {
        ParseContext {
            variables: variables.iter().map(|s| s.as_ref().to_string()).collect(),
            parameters: BTreeMap::new(),
        }
    }

    pub fn with_parameters(mut self, parameters: BTreeMap<String, f64>) -> Self {
        self.parameters = parameters;
        self
    }
}

pub fn parse_poly<S: AsRef<str>>(text: &str, vars: &[S]) -> Result<Polynomial, PolyError> {
    parse_poly_with(text, &ParseContext::new(vars))
}

pub fn parse_poly_with(text: &str, ctx: &ParseContext) -> Result<Polynomial, PolyError> {
    let tokens = tokenize(text)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        ctx,
        end: text.len(),
    };
    let out = p.expr()?;
    if let Some(t) = p.peek() {
        return Err(PolyError::Syntax {
            pos: t.pos,
            msg: format!("unexpected {}", t.kind.describe()),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Number(String),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
}

impl Kind {
    fn describe(&self) -> String {
        match self {
            Kind::Number(s) => format!("number `{s}`"),
            Kind::Ident(s) => format!("identifier `{s}`"),
            Kind::Plus => "`+`".into(),
            Kind::Minus => "`-`".into(),
            Kind::Star => "`*`".into(),
            Kind::Caret => "`^`".into(),
            Kind::LParen => "`(`".into(),
            Kind::RParen => "`)`".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Kind,
    pos: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, PolyError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => out.push(Token { kind: Kind::Plus, pos: i }),
            b'-' => out.push(Token { kind: Kind::Minus, pos: i }),
            b'*' => out.push(Token { kind: Kind::Star, pos: i }),
            b'^' => out.push(Token { kind: Kind::Caret, pos: i }),
            b'(' => out.push(Token { kind: Kind::LParen, pos: i }),
            b')' => out.push(Token { kind: Kind::RParen, pos: i }),
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                out.push(Token {
                    kind: Kind::Number(text[start..i].to_string()),
                    pos: start,
                });
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push(Token {
                    kind: Kind::Ident(text[start..i].to_string()),
                    pos: start,
                });
                continue;
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(PolyError::Syntax {
                    pos: i,
                    msg: format!("unexpected character `{ch}`"),
                });
            }
        }
        i += 1;
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    ctx: &'a ParseContext,
    end: usize,
}

impl Parser<'_> {
    fn nvars(&self) -> usize {
        self.ctx.variables.len()
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn here(&self) -> usize {
        self.peek().map(|t| t.pos).unwrap_or(self.end)
    }

    fn expr(&mut self) -> Result<Polynomial, PolyError> {
        let negate = match self.peek().map(|t| &t.kind) {
            Some(Kind::Minus) => {
                self.pos += 1;
                true
            }
            Some(Kind::Plus) => {
                self.pos += 1;
                false
            }
            _ => false,
        };
        let mut acc = self.term()?;
        if negate {
            acc = acc.scale(-1.0);
        }
        loop {
            match self.peek().map(|t| &t.kind) {
                Some(Kind::Plus) => {
                    self.pos += 1;
                    let t = self.term()?;
                    acc = &acc + &t;
                }
                Some(Kind::Minus) => {
                    self.pos += 1;
                    let t = self.term()?;
                    acc = &acc - &t;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.factor()?;
        while let Some(Kind::Star) = self.peek().map(|t| &t.kind) {
            self.pos += 1;
            let f = self.factor()?;
            acc = &acc * &f;
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Polynomial, PolyError> {
        let base = self.base()?;
        if let Some(Kind::Caret) = self.peek().map(|t| &t.kind) {
            self.pos += 1;
            let pos = self.here();
            match self.next() {
                Some(Token {
                    kind: Kind::Number(text),
                    ..
                }) => {
                    let k: u32 = if text.bytes().all(|b| b.is_ascii_digit()) {
                        text.parse().map_err(|_| PolyError::BadExponent {
                            text: text.clone(),
                            pos,
                        })?
                    } else {
                        return Err(PolyError::BadExponent { text, pos });
                    };
                    Ok(base.pow(k))
                }
                Some(Token { kind: Kind::Minus, .. }) => {
                    let rest = match self.peek().map(|t| &t.kind) {
                        Some(Kind::Number(s)) => s.clone(),
                        _ => String::new(),
                    };
                    Err(PolyError::BadExponent {
                        text: format!("-{rest}"),
                        pos,
                    })
                }
                Some(t) => Err(PolyError::BadExponent {
                    text: t.kind.describe(),
                    pos,
                }),
                None => Err(PolyError::Syntax {
                    pos,
                    msg: "expected exponent after `^`".into(),
                }),
            }
        } else {
            Ok(base)
        }
    }

    fn base(&mut self) -> Result<Polynomial, PolyError> {
        let pos = self.here();
        match self.next() {
            Some(Token {
                kind: Kind::Number(text),
                ..
            }) => {
                let v: f64 = text.parse().map_err(|_| PolyError::Syntax {
                    pos,
                    msg: format!("malformed number `{text}`"),
                })?;
                Ok(Polynomial::constant(self.nvars(), v))
            }
            Some(Token {
                kind: Kind::Ident(name),
                ..
            }) => {
                if let Some(i) = self.ctx.variables.iter().position(|v| *v == name) {
                    Ok(Polynomial::var(self.nvars(), i))
                } else if let Some(&v) = self.ctx.parameters.get(&name) {
                    Ok(Polynomial::constant(self.nvars(), v))
                } else {
                    Err(PolyError::UnknownVariable { name, pos })
                }
            }
            Some(Token {
                kind: Kind::LParen, ..
            }) => {
                let inner = self.expr()?;
                match self.next() {
                    Some(Token {
                        kind: Kind::RParen, ..
                    }) => Ok(inner),
                    _ => Err(PolyError::Syntax {
                        pos: self.tokens.get(self.pos - 1).map(|t| t.pos).unwrap_or(self.end),
                        msg: "expected `)`".into(),
                    }),
                }
            }
            Some(t) => Err(PolyError::Syntax {
                pos,
                msg: format!("unexpected {}", t.kind.describe()),
            }),
            None => Err(PolyError::Syntax {
                pos,
                msg: "unexpected end of expression".into(),
            }),
        }
    }
}
