//! Case-scoped artifact storage, token binding and sandbox enforcement.
//!
//! Layout under a working directory:
//!
//! ```text
//! <workdir>/cases/<case_id>/
//!     artifacts/<artifact_id>            payload bytes
//!     artifacts/<artifact_id>.meta.json  sidecar metadata
//!     state.record                       JSON snapshot of CaseState
//!     trace.log                          line-delimited trace events
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::registry::{ErrorCode, SemanticType, ToolSpec};
use crate::token::{scan_arguments, Segment, SymbolicToken, TokenKind};
use crate::value::{ArgValue, ArtifactRef, BoundValue, Literal};

pub const ARTIFACT_DIR: &str = "artifacts";
pub const STATE_RECORD: &str = "state.record";
pub const TRACE_FILE: &str = "trace.log";
const META_SUFFIX: &str = ".meta.json";

pub fn case_scope(workdir: &Path, case_id: &str) -> PathBuf {
    workdir.join("cases").join(case_id)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("location {location} escapes case scope {scope}")]
pub struct ScopeViolation {
    pub location: PathBuf,
    pub scope: PathBuf,
}

fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for comp in path.components() {
        match comp {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// Lexically resolves `location` against `scope` and checks containment.
/// Relative locations are taken relative to the scope. Returns the
/// normalized absolute path.
pub fn check_scope(location: &Path, scope: &Path) -> Result<PathBuf, ScopeViolation> {
    let scope_norm = normalize(scope);
    let joined = if location.is_absolute() {
        location.to_path_buf()
    } else {
        scope.join(location)
    };
    let resolved = normalize(&joined);
    if resolved.starts_with(&scope_norm) && resolved != scope_norm {
        Ok(resolved)
    } else {
        Err(ScopeViolation {
            location: location.to_path_buf(),
            scope: scope.to_path_buf(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub artifact_id: String,
    pub semantic_type: SemanticType,
    pub content_digest: String,
    pub payload_sha256: String,
    /// Producing node id, or `case-input`.
    pub produced_by: String,
    pub case_id: String,
    pub location: PathBuf,
}

impl ArtifactMeta {
    pub fn to_ref(&self) -> ArtifactRef {
        ArtifactRef {
            artifact_id: self.artifact_id.clone(),
            semantic_type: self.semantic_type,
            content_digest: self.content_digest.clone(),
            location: self.location.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Scope(#[from] ScopeViolation),
    #[error("artifact at {0} not found")]
    Missing(String),
    #[error("artifact belongs to case {found}, not {expected}")]
    ForeignCase { expected: String, found: String },
    #[error("artifact store I/O: {0}")]
    Io(#[from] io::Error),
}

impl StoreError {
    pub fn code(&self) -> ErrorCode {
        match self {
            StoreError::Scope(_) | StoreError::ForeignCase { .. } => ErrorCode::ScopeViolation,
            StoreError::Missing(_) => ErrorCode::MissingInput,
            StoreError::Io(_) => ErrorCode::ToolHardFailure,
        }
    }
}

/// Per-case artifact storage rooted at the case scope. Every path touched
/// is recorded in `access_log`; rejected escapes go to `escape_attempts`.
#[derive(Debug, Clone, Default)]
pub struct ArtifactStore {
    pub case_id: String,
    pub scope: PathBuf,
    index: BTreeMap<String, ArtifactMeta>,
    pub access_log: Vec<PathBuf>,
    pub escape_attempts: Vec<PathBuf>,
}

impl ArtifactStore {
    pub fn create(scope: &Path, case_id: &str) -> io::Result<Self> {
        fs::create_dir_all(scope.join(ARTIFACT_DIR))?;
        Ok(Self {
            case_id: case_id.to_string(),
            scope: scope.to_path_buf(),
            ..Self::default()
        })
    }

    /// Rebuilds the index from sidecar files on disk.
    pub fn open(scope: &Path, case_id: &str) -> io::Result<Self> {
        let mut store = Self {
            case_id: case_id.to_string(),
            scope: scope.to_path_buf(),
            ..Self::default()
        };
        let dir = scope.join(ARTIFACT_DIR);
        if dir.is_dir() {
            for entry in fs::read_dir(&dir)? {
                let path = entry?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                if name.ends_with(META_SUFFIX) {
                    let meta: ArtifactMeta = serde_json::from_slice(&fs::read(&path)?)
                        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                    store.index.insert(meta.artifact_id.clone(), meta);
                }
            }
        }
        Ok(store)
    }

    fn guard(&mut self, location: &Path) -> Result<PathBuf, ScopeViolation> {
        match check_scope(location, &self.scope) {
            Ok(path) => {
                self.access_log.push(path.clone());
                Ok(path)
            }
            Err(v) => {
                self.escape_attempts.push(location.to_path_buf());
                Err(v)
            }
        }
    }

    pub fn default_location(artifact_id: &str) -> PathBuf {
        Path::new(ARTIFACT_DIR).join(artifact_id)
    }

    /// Writes payload plus sidecar at `location` (relative to scope).
    pub fn write(
        &mut self,
        artifact_id: &str,
        semantic_type: SemanticType,
        content_digest: &str,
        produced_by: &str,
        payload: &[u8],
        location: &Path,
    ) -> Result<ArtifactRef, StoreError> {
        let abs = self.guard(location)?;
        let rel = abs.strip_prefix(normalize(&self.scope)).map(Path::to_path_buf).unwrap_or_else(|_| location.to_path_buf());
        if let Some(parent) = abs.parent() {
            fs::create_dir_all(parent)?;
        }
        let meta = ArtifactMeta {
            artifact_id: artifact_id.to_string(),
            semantic_type,
            content_digest: content_digest.to_string(),
            payload_sha256: sha256_hex(&[payload]),
            produced_by: produced_by.to_string(),
            case_id: self.case_id.clone(),
            location: rel,
        };
        fs::write(&abs, payload)?;
        let meta_path = sidecar_path(&abs);
        fs::write(&meta_path, serde_json::to_vec_pretty(&meta).expect("meta serializes"))?;
        let artifact = meta.to_ref();
        self.index.insert(artifact_id.to_string(), meta);
        Ok(artifact)
    }

    pub fn meta(&self, artifact_id: &str) -> Option<&ArtifactMeta> {
        self.index.get(artifact_id)
    }

    pub fn metas(&self) -> impl Iterator<Item = &ArtifactMeta> {
        self.index.values()
    }

    /// Payload presence check (metadata alone is not enough).
    pub fn exists(&mut self, artifact: &ArtifactRef) -> bool {
        match self.guard(&artifact.location) {
            Ok(path) => path.is_file() && self.index.contains_key(&artifact.artifact_id),
            Err(_) => false,
        }
    }

    pub fn read_payload(&mut self, artifact: &ArtifactRef) -> Result<Vec<u8>, StoreError> {
        let path = self.guard(&artifact.location)?;
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::Missing(artifact.artifact_id.clone()),
            _ => StoreError::Io(e),
        })
    }

    /// Payload bytes hash to the value recorded in the sidecar.
    pub fn verify_digest(&mut self, artifact: &ArtifactRef) -> bool {
        let Some(expected) = self.index.get(&artifact.artifact_id).map(|m| m.payload_sha256.clone()) else {
            return false;
        };
        match self.read_payload(artifact) {
            Ok(bytes) => sha256_hex(&[&bytes]) == expected,
            Err(_) => false,
        }
    }

    /// Resolves a literal path string to an indexed artifact. This is how
    /// unbound (reactive) calls reach artifacts.
    pub fn resolve_path(&mut self, path_text: &str) -> Result<ArtifactRef, StoreError> {
        let abs = self.guard(Path::new(path_text))?;
        let scope = normalize(&self.scope);
        let rel = abs.strip_prefix(&scope).map(Path::to_path_buf).unwrap_or_default();
        let meta = self
            .index
            .values()
            .find(|m| m.location == rel)
            .ok_or_else(|| StoreError::Missing(path_text.to_string()))?;
        if meta.case_id != self.case_id {
            return Err(StoreError::ForeignCase {
                expected: self.case_id.clone(),
                found: meta.case_id.clone(),
            });
        }
        let artifact = meta.to_ref();
        if !abs.is_file() {
            return Err(StoreError::Missing(path_text.to_string()));
        }
        Ok(artifact)
    }

    /// Absolute path string of an artifact, as a reactive policy would see it.
    pub fn display_path(&self, artifact: &ArtifactRef) -> String {
        self.scope.join(&artifact.location).to_string_lossy().into_owned()
    }

    /// Deletes an artifact's payload bytes, leaving metadata in place.
    /// Used to simulate external corruption.
    pub fn corrupt_remove_payload(&mut self, artifact_id: &str) -> io::Result<()> {
        if let Some(meta) = self.index.get(artifact_id) {
            fs::remove_file(self.scope.join(&meta.location))?;
        }
        Ok(())
    }
}

fn sidecar_path(payload: &Path) -> PathBuf {
    let mut name = payload.file_name().unwrap_or_default().to_os_string();
    name.push(META_SUFFIX);
    payload.with_file_name(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeStatus {
    Pending,
    Ready,
    Running,
    Succeeded,
    Failed(ErrorCode),
    Repaired(u32),
    Abandoned,
}

impl NodeStatus {
    /// Allowed status transitions. `Succeeded -> Repaired` covers
    /// re-execution of a producer whose artifact went missing.
    pub fn can_transition(self, to: NodeStatus) -> bool {
        use NodeStatus::*;
        matches!(
            (self, to),
            (Pending, Ready)
                | (Ready, Running)
                | (Running, Succeeded)
                | (Running, Failed(_))
                | (Failed(_), Repaired(_))
                | (Repaired(_), Running)
                | (Failed(_), Abandoned)
                | (Succeeded, Repaired(_))
        )
    }

    pub fn is_succeeded(self) -> bool {
        self == NodeStatus::Succeeded
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairUsage {
    pub deterministic: u32,
    pub pluggable: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BadRefKind {
    UnknownField,
    UnknownNode,
    ProducerNotSucceeded,
    ArtifactMissing,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("bad reference {token}: {kind:?}")]
pub struct BindError {
    pub kind: BadRefKind,
    pub token: SymbolicToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("argument '{arg}': {error}")]
pub struct BindFailure {
    pub arg: String,
    pub error: BindError,
}

/// Per-case state: inputs (the volume and metadata of the case), node
/// outputs, runtime values and node statuses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseState {
    pub case_id: String,
    pub case_scope: PathBuf,
    pub inputs: BTreeMap<String, BoundValue>,
    pub sequences: BTreeMap<String, BTreeMap<String, BoundValue>>,
    pub node_outputs: BTreeMap<String, BTreeMap<String, BoundValue>>,
    pub runtime_values: BTreeMap<String, Literal>,
    pub status: BTreeMap<String, NodeStatus>,
    pub dispatch_counts: BTreeMap<String, u32>,
    pub repair_usage: BTreeMap<String, RepairUsage>,
    #[serde(skip)]
    pub store: ArtifactStore,
}

impl CaseState {
    /// Creates the case scope on disk and seeds the runtime namespace.
    pub fn create(workdir: &Path, case_id: &str, seed: u64) -> io::Result<Self> {
        let scope = case_scope(workdir, case_id);
        if scope.exists() {
            fs::remove_dir_all(&scope)?;
        }
        let store = ArtifactStore::create(&scope, case_id)?;
        let start_time = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or_default();
        let runtime_values = BTreeMap::from([
            ("seed".to_string(), Literal::Int(seed as i64)),
            ("case_id".to_string(), Literal::text(case_id)),
            ("start_time".to_string(), Literal::Int(start_time)),
        ]);
        Ok(Self {
            case_id: case_id.to_string(),
            case_scope: scope,
            inputs: BTreeMap::new(),
            sequences: BTreeMap::new(),
            node_outputs: BTreeMap::new(),
            runtime_values,
            status: BTreeMap::new(),
            dispatch_counts: BTreeMap::new(),
            repair_usage: BTreeMap::new(),
            store,
        })
    }

    pub fn status_of(&self, node_id: &str) -> Option<NodeStatus> {
        self.status.get(node_id).copied()
    }

    pub fn set_status(&mut self, node_id: &str, to: NodeStatus) {
        let from = self.status.get(node_id).copied();
        if let Some(from) = from {
            debug_assert!(from.can_transition(to), "illegal transition {from:?} -> {to:?} for {node_id}");
        }
        // outputs exist only for succeeded nodes
        if !to.is_succeeded() {
            self.node_outputs.remove(node_id);
        }
        self.status.insert(node_id.to_string(), to);
    }

    pub fn add_input(&mut self, name: &str, value: BoundValue) {
        self.inputs.insert(name.to_string(), value);
    }

    pub fn record_outputs(&mut self, node_id: &str, outputs: BTreeMap<String, BoundValue>) {
        self.node_outputs.insert(node_id.to_string(), outputs);
    }

    pub fn save_record(&self) -> io::Result<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        fs::write(self.case_scope.join(STATE_RECORD), bytes)
    }

    /// Reloads a snapshot written by [`CaseState::save_record`].
    pub fn load_record(scope: &Path) -> io::Result<Self> {
        let bytes = fs::read(scope.join(STATE_RECORD))?;
        let mut state: CaseState =
            serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        state.case_scope = scope.to_path_buf();
        state.store = ArtifactStore::open(scope, &state.case_id)?;
        Ok(state)
    }

    /// All artifacts of `ty` currently bindable: case inputs, sequence
    /// inputs, and outputs of succeeded nodes. Returned as tokens.
    pub fn producers_of(&self, ty: SemanticType, include_inputs: bool) -> Vec<SymbolicToken> {
        let mut out = Vec::new();
        let matches = |v: &BoundValue| v.as_artifact().is_some_and(|a| a.semantic_type == ty);
        if include_inputs {
            for (name, v) in &self.inputs {
                if matches(v) {
                    let fields: Vec<&str> = name.split('.').collect();
                    out.push(SymbolicToken::case(&fields));
                }
            }
            for (seq, fields) in &self.sequences {
                for (field, v) in fields {
                    if matches(v) {
                        out.push(SymbolicToken::seq(&[seq.as_str(), field.as_str()]));
                    }
                }
            }
        }
        for (node, fields) in &self.node_outputs {
            if self.status_of(node) != Some(NodeStatus::Succeeded) {
                continue;
            }
            for (field, v) in fields {
                if matches(v) {
                    out.push(SymbolicToken::node(node.clone(), field.clone()));
                }
            }
        }
        out
    }
}

fn lookup_err(kind: BadRefKind, token: &SymbolicToken) -> BindError {
    BindError {
        kind,
        token: token.clone(),
    }
}

/// Resolves one token against the case state. Artifacts are checked for
/// payload presence before being returned.
pub fn bind(token: &SymbolicToken, state: &mut CaseState) -> Result<BoundValue, BindError> {
    let value = match token.kind {
        TokenKind::Case => state
            .inputs
            .get(&token.field_key())
            .cloned()
            .ok_or_else(|| lookup_err(BadRefKind::UnknownField, token))?,
        TokenKind::Seq => {
            let (seq, rest) = token.field_path.split_first().expect("non-empty field path");
            state
                .sequences
                .get(seq)
                .and_then(|fields| fields.get(&rest.join(".")))
                .cloned()
                .ok_or_else(|| lookup_err(BadRefKind::UnknownField, token))?
        }
        TokenKind::Runtime => state
            .runtime_values
            .get(&token.field_key())
            .cloned()
            .map(BoundValue::Literal)
            .ok_or_else(|| lookup_err(BadRefKind::UnknownField, token))?,
        TokenKind::Node => {
            let node = token.node_id.as_deref().unwrap_or_default();
            match state.status_of(node) {
                None => return Err(lookup_err(BadRefKind::UnknownNode, token)),
                Some(NodeStatus::Succeeded) => {}
                Some(_) => return Err(lookup_err(BadRefKind::ProducerNotSucceeded, token)),
            }
            state
                .node_outputs
                .get(node)
                .and_then(|fields| fields.get(&token.field_key()))
                .cloned()
                .ok_or_else(|| lookup_err(BadRefKind::UnknownField, token))?
        }
    };
    if let BoundValue::Artifact(a) = &value {
        if !state.store.exists(a) {
            return Err(lookup_err(BadRefKind::ArtifactMissing, token));
        }
    }
    Ok(value)
}

fn interpolate(text: &str, state: &mut CaseState) -> Result<String, BindError> {
    let scan = scan_arguments(text);
    let mut out = String::new();
    for seg in &scan.segments {
        match seg {
            Segment::Literal(s) => out.push_str(s),
            Segment::Token(t) => match bind(t, state)? {
                BoundValue::Literal(Literal::Text(s)) => out.push_str(&s),
                BoundValue::Literal(lit) => out.push_str(&lit.to_string()),
                BoundValue::Artifact(a) => out.push_str(&a.artifact_id),
            },
        }
    }
    Ok(out)
}

/// Replaces every token in `args` (whole-value and embedded) with its bound
/// value. Literals without tokens pass through unchanged. Embedded tokens
/// are only interpolated in arguments that accept references.
pub fn bind_all(
    spec: &ToolSpec,
    args: &BTreeMap<String, ArgValue>,
    state: &mut CaseState,
) -> Result<BTreeMap<String, BoundValue>, BindFailure> {
    let mut bound = BTreeMap::new();
    for (name, value) in args {
        let fail = |error| BindFailure {
            arg: name.clone(),
            error,
        };
        let concrete = match value {
            ArgValue::Token(t) => bind(t, state).map_err(fail)?,
            ArgValue::Literal(Literal::Text(s))
                if spec.args.get(name).is_some_and(|a| a.accepts_reference) && s.contains('@') =>
            {
                BoundValue::Literal(Literal::Text(interpolate(s, state).map_err(fail)?))
            }
            ArgValue::Literal(lit) => BoundValue::Literal(lit.clone()),
        };
        bound.insert(name.clone(), concrete);
    }
    Ok(bound)
}
