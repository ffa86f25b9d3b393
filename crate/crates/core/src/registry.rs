//! Tool interface contract: argument schemas, typed outputs and the shared
//! set of normalized error codes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token::scan_arguments;
use crate::value::{ArgValue, BoundValue, Literal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticType {
    VolumeRef,
    MaskRef,
    KSpaceRef,
    MeasurementTable,
    Label,
    ReportDoc,
    Scalar,
    Text,
    FrameIndex,
}

impl SemanticType {
    pub const ALL: [SemanticType; 9] = [
        SemanticType::VolumeRef,
        SemanticType::MaskRef,
        SemanticType::KSpaceRef,
        SemanticType::MeasurementTable,
        SemanticType::Label,
        SemanticType::ReportDoc,
        SemanticType::Scalar,
        SemanticType::Text,
        SemanticType::FrameIndex,
    ];

    /// Types whose values live in the artifact store.
    pub fn is_artifact(self) -> bool {
        matches!(
            self,
            SemanticType::VolumeRef
                | SemanticType::MaskRef
                | SemanticType::KSpaceRef
                | SemanticType::MeasurementTable
                | SemanticType::Label
                | SemanticType::ReportDoc
        )
    }

    /// Whether a literal can stand for a value of this type. Artifact types
    /// accept a text path, which is resolved (or not) at invocation time.
    pub fn accepts_literal(self, lit: &Literal) -> bool {
        match self {
            SemanticType::Scalar => matches!(lit, Literal::Int(_) | Literal::Float(_)),
            SemanticType::FrameIndex => matches!(lit, Literal::Int(i) if *i >= 0),
            SemanticType::Text => matches!(lit, Literal::Text(_)),
            _ => matches!(lit, Literal::Text(_)),
        }
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorCode {
    SchemaMismatch,
    UnknownTool,
    BadReference,
    ScopeViolation,
    MissingInput,
    ToolTransientFailure,
    ToolHardFailure,
    InvalidOverride,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SideEffect {
    Pure,
    WritesArtifact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArgSpec {
    #[serde(rename = "type")]
    pub semantic_type: SemanticType,
    #[serde(default)]
    pub required: bool,
    #[serde(default)]
    pub default: Option<Literal>,
    #[serde(default)]
    pub accepts_reference: bool,
    /// Optional argument with no default that the compiler may link.
    #[serde(default)]
    pub compiler_fillable: bool,
    /// Inclusive bounds for scalar values; outside them the tool raises
    /// `InvalidOverride`.
    #[serde(default)]
    pub range: Option<(f64, f64)>,
    /// Enumerated safe values the repair stage may substitute.
    #[serde(default)]
    pub alternatives: Vec<Literal>,
}

impl ArgSpec {
    pub fn required(semantic_type: SemanticType) -> Self {
        Self {
            semantic_type,
            required: true,
            default: None,
            accepts_reference: semantic_type.is_artifact(),
            compiler_fillable: false,
            range: None,
            alternatives: Vec::new(),
        }
    }

    pub fn optional(semantic_type: SemanticType, default: Literal) -> Self {
        Self {
            required: false,
            default: Some(default),
            ..Self::required(semantic_type)
        }
    }

    pub fn fillable(semantic_type: SemanticType) -> Self {
        Self {
            required: false,
            compiler_fillable: true,
            ..Self::required(semantic_type)
        }
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = Some((lo, hi));
        self
    }

    pub fn with_reference(mut self, accepts: bool) -> Self {
        self.accepts_reference = accepts;
        self
    }

    pub fn in_range(&self, lit: &Literal) -> bool {
        match (self.range, lit.as_f64()) {
            (Some((lo, hi)), Some(x)) => x >= lo && x <= hi,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    pub name: String,
    #[serde(default)]
    pub args: BTreeMap<String, ArgSpec>,
    #[serde(default)]
    pub outputs: BTreeMap<String, SemanticType>,
    #[serde(default)]
    pub error_codes: BTreeSet<ErrorCode>,
    pub side_effect: SideEffect,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("tool '{tool}': required argument '{arg}' carries a default")]
    RequiredWithDefault { tool: String, arg: String },
    #[error("tool '{tool}': optional argument '{arg}' has neither a default nor compiler_fillable")]
    OptionalWithoutDefault { tool: String, arg: String },
    #[error("tool '{tool}': default for '{arg}' does not match type {expected}")]
    DefaultTypeMismatch { tool: String, arg: String, expected: SemanticType },
    #[error("tool '{tool}': name '{name}' used as both argument and output")]
    NameClash { tool: String, name: String },
    #[error("tool name '{0}' is not an identifier")]
    BadName(String),
}

impl ToolSpec {
    pub fn check(&self) -> Result<(), SpecError> {
        if !crate::token::is_field(&self.name) {
            return Err(SpecError::BadName(self.name.clone()));
        }
        for (name, arg) in &self.args {
            let err_ctx = || (self.name.clone(), name.clone());
            if arg.required && arg.default.is_some() {
                let (tool, arg) = err_ctx();
                return Err(SpecError::RequiredWithDefault { tool, arg });
            }
            if !arg.required && arg.default.is_none() && !arg.compiler_fillable {
                let (tool, arg) = err_ctx();
                return Err(SpecError::OptionalWithoutDefault { tool, arg });
            }
            if let Some(default) = &arg.default {
                if !arg.semantic_type.accepts_literal(default) {
                    let (tool, arg_name) = err_ctx();
                    return Err(SpecError::DefaultTypeMismatch {
                        tool,
                        arg: arg_name,
                        expected: arg.semantic_type,
                    });
                }
            }
            if self.outputs.contains_key(name) {
                return Err(SpecError::NameClash {
                    tool: self.name.clone(),
                    name: name.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn writes_artifacts(&self) -> bool {
        self.side_effect == SideEffect::WritesArtifact
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("tool '{0}' is already registered")]
    DuplicateName(String),
    #[error(transparent)]
    InvalidSpec(#[from] SpecError),
    #[error("tool spec file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    tools: BTreeMap<String, ToolSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: ToolSpec) -> Result<(), RegistryError> {
        spec.check()?;
        if self.tools.contains_key(&spec.name) {
            return Err(RegistryError::DuplicateName(spec.name));
        }
        self.tools.insert(spec.name.clone(), spec);
        Ok(())
    }

    pub fn from_specs(specs: impl IntoIterator<Item = ToolSpec>) -> Result<Self, RegistryError> {
        let mut registry = Self::new();
        for spec in specs {
            registry.register(spec)?;
        }
        Ok(registry)
    }

    /// Loads `[[tool]]` tables from a TOML document.
    pub fn from_toml(text: &str) -> Result<Self, RegistryError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            tool: Vec<ToolSpec>,
        }
        let file: File = toml::from_str(text).map_err(|e| RegistryError::Format(e.to_string()))?;
        Self::from_specs(file.tool)
    }

    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct File<'a> {
            tool: Vec<&'a ToolSpec>,
        }
        toml::to_string(&File {
            tool: self.tools.values().collect(),
        })
        .expect("tool specs serialize")
    }

    pub fn lookup(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    pub fn specs(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.values()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }
}

/// One problem found by [`validate_call`] or the tool-side argument check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallIssue {
    pub code: ErrorCode,
    pub arg: String,
    pub reason: String,
}

impl fmt::Display for CallIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}): {}", self.code, self.arg, self.reason)
    }
}

fn schema_issue(arg: &str, reason: impl Into<String>) -> CallIssue {
    CallIssue {
        code: ErrorCode::SchemaMismatch,
        arg: arg.to_string(),
        reason: reason.into(),
    }
}

/// Structural check of a call before binding. Never dispatches anything.
pub fn validate_call(spec: &ToolSpec, args: &BTreeMap<String, ArgValue>) -> Result<(), Vec<CallIssue>> {
    let mut issues = Vec::new();
    for (name, arg) in &spec.args {
        if arg.required && !args.contains_key(name) {
            issues.push(schema_issue(name, "required argument missing"));
        }
    }
    for (name, value) in args {
        let Some(arg) = spec.args.get(name) else {
            issues.push(schema_issue(name, "argument not declared by tool"));
            continue;
        };
        match value {
            ArgValue::Token(_) if !arg.accepts_reference => {
                issues.push(schema_issue(name, "argument does not accept references"));
            }
            ArgValue::Token(_) => {}
            ArgValue::Literal(lit) => {
                if !arg.semantic_type.accepts_literal(lit) {
                    issues.push(schema_issue(name, format!("literal {lit} is not a {}", arg.semantic_type)));
                } else if !arg.accepts_reference && has_embedded_tokens(lit) {
                    issues.push(schema_issue(name, "embedded tokens in an argument that does not accept references"));
                }
            }
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}

fn has_embedded_tokens(lit: &Literal) -> bool {
    lit.as_text().is_some_and(|s| !scan_arguments(s).tokens().is_empty())
}

/// Tool-side check of concrete arguments, applied at invocation.
pub fn check_bound_args(spec: &ToolSpec, args: &BTreeMap<String, BoundValue>) -> Result<(), CallIssue> {
    for (name, arg) in &spec.args {
        if arg.required && !args.contains_key(name) {
            return Err(schema_issue(name, "required argument missing"));
        }
    }
    for (name, value) in args {
        let Some(arg) = spec.args.get(name) else {
            return Err(schema_issue(name, "argument not declared by tool"));
        };
        match value {
            BoundValue::Literal(lit) => {
                if !arg.semantic_type.accepts_literal(lit) {
                    return Err(schema_issue(name, format!("literal {lit} is not a {}", arg.semantic_type)));
                }
                if !arg.in_range(lit) {
                    return Err(CallIssue {
                        code: ErrorCode::InvalidOverride,
                        arg: name.clone(),
                        reason: format!("value {lit} outside permitted range"),
                    });
                }
            }
            BoundValue::Artifact(a) => {
                if a.semantic_type != arg.semantic_type {
                    return Err(schema_issue(
                        name,
                        format!("artifact {} is {}, expected {}", a.artifact_id, a.semantic_type, arg.semantic_type),
                    ));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::SymbolicToken;

    fn denoise() -> ToolSpec {
        ToolSpec {
            name: "denoise_volume".into(),
            args: BTreeMap::from([
                ("input".to_string(), ArgSpec::required(SemanticType::VolumeRef)),
                (
                    "strength".to_string(),
                    ArgSpec::optional(SemanticType::Scalar, Literal::Float(0.5)).with_range(0.0, 1.0),
                ),
            ]),
            outputs: BTreeMap::from([("volume".to_string(), SemanticType::VolumeRef)]),
            error_codes: BTreeSet::new(),
            side_effect: SideEffect::WritesArtifact,
        }
    }

    #[test]
    fn register_and_lookup() {
        let mut reg = Registry::new();
        reg.register(denoise()).unwrap();
        assert_eq!(reg.lookup("denoise_volume"), Some(&denoise()));
        assert_eq!(reg.register(denoise()), Err(RegistryError::DuplicateName("denoise_volume".into())));
    }

    #[test]
    fn spec_invariants_enforced() {
        let mut spec = denoise();
        spec.args.get_mut("input").unwrap().default = Some(Literal::text("x"));
        assert!(matches!(spec.check(), Err(SpecError::RequiredWithDefault { .. })));

        let mut spec = denoise();
        spec.args.get_mut("strength").unwrap().default = None;
        assert!(matches!(spec.check(), Err(SpecError::OptionalWithoutDefault { .. })));

        let mut spec = denoise();
        spec.args.get_mut("strength").unwrap().default = Some(Literal::text("high"));
        assert!(matches!(spec.check(), Err(SpecError::DefaultTypeMismatch { .. })));
    }

    #[test]
    fn validate_accepts_token() {
        let args = BTreeMap::from([("input".to_string(), ArgValue::Token(SymbolicToken::case(&["input"])))]);
        assert_eq!(validate_call(&denoise(), &args), Ok(()));
    }

    #[test]
    fn validate_flags_type_mismatch() {
        let args = BTreeMap::from([("input".to_string(), ArgValue::Literal(Literal::Int(42)))]);
        let issues = validate_call(&denoise(), &args).unwrap_err();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].code, ErrorCode::SchemaMismatch);
        assert_eq!(issues[0].arg, "input");
    }

    #[test]
    fn validate_flags_missing_and_tokens_in_plain_args() {
        let args = BTreeMap::from([("strength".to_string(), ArgValue::Token(SymbolicToken::runtime(&["seed"])))]);
        let issues = validate_call(&denoise(), &args).unwrap_err();
        let names: Vec<_> = issues.iter().map(|i| i.arg.as_str()).collect();
        assert_eq!(names, vec!["input", "strength"]);
    }

    #[test]
    fn toml_round_trip() {
        let reg = Registry::from_specs([denoise()]).unwrap();
        let text = reg.to_toml();
        let back = Registry::from_toml(&text).unwrap();
        assert_eq!(back.lookup("denoise_volume"), Some(&denoise()));
        assert!(Registry::from_toml("[[tool]]\nname = \"x\"\nside_effect = \"Pure\"\nbogus = 1\n").is_err());
    }
}
