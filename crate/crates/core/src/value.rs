//! Argument values as they flow from sketches through binding into tools.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::registry::SemanticType;
use crate::token::{parse_token, SymbolicToken};

/// A plain literal as written in a sketch, contract or tool call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl Literal {
    pub fn text(s: impl Into<String>) -> Self {
        Literal::Text(s.into())
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Literal::Int(i) => Some(*i as f64),
            Literal::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Literal::Text(s) => Some(s),
            _ => None,
        }
    }

    /// Stable textual form used for digests and trace payloads.
    pub fn canonical(&self) -> String {
        match self {
            Literal::Bool(b) => format!("bool:{b}"),
            Literal::Int(i) => format!("int:{i}"),
            Literal::Float(f) => format!("float:{f:?}"),
            Literal::Text(s) => format!("text:{s}"),
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Bool(b) => write!(f, "{b}"),
            Literal::Int(i) => write!(f, "{i}"),
            Literal::Float(x) => write!(f, "{x}"),
            Literal::Text(s) => write!(f, "{s:?}"),
        }
    }
}

/// A node argument: a literal, or a whole-value token resolved at dispatch.
///
/// Serialized as its literal; a string that parses as a token reads back as
/// [`ArgValue::Token`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Literal", into = "Literal")]
pub enum ArgValue {
    Literal(Literal),
    Token(SymbolicToken),
}

impl From<Literal> for ArgValue {
    fn from(lit: Literal) -> Self {
        match &lit {
            Literal::Text(s) if s.starts_with('@') => match parse_token(s) {
                Ok(token) => ArgValue::Token(token),
                Err(_) => ArgValue::Literal(lit),
            },
            _ => ArgValue::Literal(lit),
        }
    }
}

impl From<ArgValue> for Literal {
    fn from(value: ArgValue) -> Self {
        match value {
            ArgValue::Literal(lit) => lit,
            ArgValue::Token(t) => Literal::Text(t.to_string()),
        }
    }
}

impl From<SymbolicToken> for ArgValue {
    fn from(t: SymbolicToken) -> Self {
        ArgValue::Token(t)
    }
}

impl fmt::Display for ArgValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgValue::Literal(lit) => write!(f, "{lit}"),
            ArgValue::Token(t) => write!(f, "{t}"),
        }
    }
}

/// Handle to a stored artifact. `location` is relative to the case scope.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub artifact_id: String,
    pub semantic_type: SemanticType,
    pub content_digest: String,
    pub location: PathBuf,
}

/// A concrete value after binding: what a tool actually receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "value_kind", content = "value")]
pub enum BoundValue {
    Literal(Literal),
    Artifact(ArtifactRef),
}

impl BoundValue {
    pub fn as_artifact(&self) -> Option<&ArtifactRef> {
        match self {
            BoundValue::Artifact(a) => Some(a),
            BoundValue::Literal(_) => None,
        }
    }

    /// Digest-stable rendering: artifacts by content digest, literals by value.
    pub fn canonical(&self) -> String {
        match self {
            BoundValue::Literal(lit) => lit.canonical(),
            BoundValue::Artifact(a) => format!("artifact:{}", a.content_digest),
        }
    }

    pub fn display_short(&self) -> String {
        match self {
            BoundValue::Literal(lit) => lit.to_string(),
            BoundValue::Artifact(a) => a.artifact_id.clone(),
        }
    }
}
