//! Symbolic reference tokens.
//!
//! Tool arguments name case inputs, upstream node outputs and runtime values
//! through four token families:
//!
//! ```text
//! @seq.<field>(.<field>)*
//! @node.<id>.<field>(.<field>)*
//! @case.<field>(.<field>)*
//! @runtime.<field>(.<field>)*
//! ```
//!
//! Node ids match `[A-Za-z_][A-Za-z0-9_-]*`, fields match
//! `[A-Za-z_][A-Za-z0-9_]*`. There is no whitespace and no escaping.
//! Tokens may also be embedded in longer argument strings; see
//! [`scan_arguments`].

use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    Seq,
    Node,
    Case,
    Runtime,
}

impl TokenKind {
    pub fn keyword(self) -> &'static str {
        match self {
            TokenKind::Seq => "seq",
            TokenKind::Node => "node",
            TokenKind::Case => "case",
            TokenKind::Runtime => "runtime",
        }
    }

    fn from_keyword(word: &str) -> Option<Self> {
        match word {
            "seq" => Some(TokenKind::Seq),
            "node" => Some(TokenKind::Node),
            "case" => Some(TokenKind::Case),
            "runtime" => Some(TokenKind::Runtime),
            _ => None,
        }
    }
}

/// A parsed reference. Equality and hashing ignore `span`, so a token parsed
/// out of a larger string compares equal to the same token built by hand.
#[derive(Debug, Clone)]
pub struct SymbolicToken {
    pub kind: TokenKind,
    pub node_id: Option<String>,
    pub field_path: Vec<String>,
    /// Character offsets `(start, end)` in the text the token was parsed from.
    pub span: (usize, usize),
}

impl PartialEq for SymbolicToken {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.node_id == other.node_id && self.field_path == other.field_path
    }
}

impl Eq for SymbolicToken {}

impl Hash for SymbolicToken {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.kind.hash(state);
        self.node_id.hash(state);
        self.field_path.hash(state);
    }
}

impl SymbolicToken {
    pub fn node(node_id: impl Into<String>, field: impl Into<String>) -> Self {
        Self {
            kind: TokenKind::Node,
            node_id: Some(node_id.into()),
            field_path: vec![field.into()],
            span: (0, 0),
        }
    }

    pub fn case(fields: &[&str]) -> Self {
        Self::simple(TokenKind::Case, fields)
    }

    pub fn seq(fields: &[&str]) -> Self {
        Self::simple(TokenKind::Seq, fields)
    }

    pub fn runtime(fields: &[&str]) -> Self {
        Self::simple(TokenKind::Runtime, fields)
    }

    fn simple(kind: TokenKind, fields: &[&str]) -> Self {
        Self {
            kind,
            node_id: None,
            field_path: fields.iter().map(|f| f.to_string()).collect(),
            span: (0, 0),
        }
    }

    /// Dotted field path, e.g. `cine.kspace`.
    pub fn field_key(&self) -> String {
        self.field_path.join(".")
    }

    /// Checks the structural invariants; `render` assumes they hold.
    pub fn is_well_formed(&self) -> bool {
        let node_ok = match (self.kind, &self.node_id) {
            (TokenKind::Node, Some(id)) => is_node_id(id),
            (TokenKind::Node, None) => false,
            (_, Some(_)) => false,
            (_, None) => true,
        };
        node_ok && !self.field_path.is_empty() && self.field_path.iter().all(|f| is_field(f))
    }
}

impl fmt::Display for SymbolicToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_token(self))
    }
}

impl FromStr for SymbolicToken {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_token(s)
    }
}

impl Serialize for SymbolicToken {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&render_token(self))
    }
}

impl<'de> Deserialize<'de> for SymbolicToken {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_token(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    MalformedToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed token at {}..{}: {reason}", span.0, span.1)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub span: (usize, usize),
    pub reason: String,
}

fn malformed(span: (usize, usize), reason: impl Into<String>) -> ParseError {
    ParseError {
        kind: ParseErrorKind::MalformedToken,
        span,
        reason: reason.into(),
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_field_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn is_node_char(c: char) -> bool {
    is_field_char(c) || c == '-'
}

pub fn is_field(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if is_ident_start(c)) && chars.all(is_field_char)
}

pub fn is_node_id(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if is_ident_start(c)) && chars.all(is_node_char)
}

/// Greedy lexer over a char slice starting at an `@`. Returns the token and
/// the number of chars consumed, or `None` if no token starts here.
fn lex_at(chars: &[char], start: usize) -> Option<(SymbolicToken, usize)> {
    if chars.get(start) != Some(&'@') {
        return None;
    }
    let mut pos = start + 1;
    let word = take_while(chars, &mut pos, is_field_char);
    let kind = TokenKind::from_keyword(&word)?;

    let mut node_id = None;
    if kind == TokenKind::Node {
        node_id = Some(take_segment(chars, &mut pos, is_node_char)?);
    }
    let mut field_path = vec![take_segment(chars, &mut pos, is_field_char)?];
    loop {
        let mut probe = pos;
        match take_segment(chars, &mut probe, is_field_char) {
            Some(field) => {
                field_path.push(field);
                pos = probe;
            }
            None => break,
        }
    }
    let token = SymbolicToken {
        kind,
        node_id,
        field_path,
        span: (start, pos),
    };
    Some((token, pos - start))
}

fn take_while(chars: &[char], pos: &mut usize, pred: fn(char) -> bool) -> String {
    let begin = *pos;
    while *pos < chars.len() && pred(chars[*pos]) {
        *pos += 1;
    }
    chars[begin..*pos].iter().collect()
}

/// Consumes `.<segment>` where the segment starts with an identifier char.
fn take_segment(chars: &[char], pos: &mut usize, pred: fn(char) -> bool) -> Option<String> {
    if chars.get(*pos) != Some(&'.') {
        return None;
    }
    match chars.get(*pos + 1) {
        Some(&c) if is_ident_start(c) => {}
        _ => return None,
    }
    let mut p = *pos + 1;
    let seg = take_while(chars, &mut p, pred);
    *pos = p;
    Some(seg)
}

/// Parses a complete token. The whole of `text` must be one token.
pub fn parse_token(text: &str) -> Result<SymbolicToken, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let len = chars.len();
    if chars.first() != Some(&'@') {
        return Err(malformed((0, len.min(1)), "token must begin with '@'"));
    }
    let body: String = chars[1..].iter().collect();
    let mut parts = body.split('.');
    let family = parts.next().unwrap_or_default();
    let kind = TokenKind::from_keyword(family)
        .ok_or_else(|| malformed((0, 1 + family.chars().count()), format!("unknown token family '{family}'")))?;

    let mut offset = 1 + family.chars().count();
    let rest: Vec<&str> = parts.collect();
    let mut segments = rest.iter().map(|seg| {
        let span = (offset + 1, offset + 1 + seg.chars().count());
        offset = span.1;
        (*seg, span)
    });

    let node_id = if kind == TokenKind::Node {
        let (id, span) = segments.next().ok_or_else(|| malformed((0, len), "missing node id"))?;
        if id.is_empty() {
            return Err(malformed(span, "empty node id"));
        }
        if !is_node_id(id) {
            return Err(malformed(span, format!("invalid node id '{id}'")));
        }
        Some(id.to_string())
    } else {
        None
    };

    let mut field_path = Vec::new();
    for (seg, span) in segments {
        if seg.is_empty() {
            return Err(malformed(span, "empty field segment"));
        }
        if !is_field(seg) {
            return Err(malformed(span, format!("invalid field '{seg}'")));
        }
        field_path.push(seg.to_string());
    }
    if field_path.is_empty() {
        return Err(malformed((0, len), "missing field"));
    }
    Ok(SymbolicToken {
        kind,
        node_id,
        field_path,
        span: (0, len),
    })
}

pub fn render_token(token: &SymbolicToken) -> String {
    let mut out = String::from("@");
    out.push_str(token.kind.keyword());
    if let Some(id) = &token.node_id {
        out.push('.');
        out.push_str(id);
    }
    for field in &token.field_path {
        out.push('.');
        out.push_str(field);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Token(SymbolicToken),
}

/// An argument string split into literal text and embedded tokens, in
/// source order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenScan {
    pub segments: Vec<Segment>,
}

impl TokenScan {
    pub fn literal_segments(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Literal(text) => Some(text.as_str()),
                Segment::Token(_) => None,
            })
            .collect()
    }

    pub fn tokens(&self) -> Vec<&SymbolicToken> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Token(t) => Some(t),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    /// Concatenates literals and rendered tokens.
    pub fn reconstruct(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Literal(text) => text.clone(),
                Segment::Token(t) => render_token(t),
            })
            .collect()
    }

    /// True when the whole argument is exactly one token.
    pub fn as_single_token(&self) -> Option<&SymbolicToken> {
        match self.segments.as_slice() {
            [Segment::Token(t)] => Some(t),
            _ => None,
        }
    }
}

/// Finds every maximal well-formed token in `arg_text`. Anything else,
/// including `@` runs that do not form a token, stays literal.
pub fn scan_arguments(arg_text: &str) -> TokenScan {
    let chars: Vec<char> = arg_text.chars().collect();
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut pos = 0;
    while pos < chars.len() {
        if chars[pos] == '@' {
            if let Some((token, used)) = lex_at(&chars, pos) {
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Token(token));
                pos += used;
                continue;
            }
        }
        literal.push(chars[pos]);
        pos += 1;
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    TokenScan { segments }
}
