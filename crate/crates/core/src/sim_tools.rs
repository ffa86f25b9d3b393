//! Deterministic simulated MRI tool library.
//!
//! Tools do not touch pixels. Each output is identified by a content digest
//! computed from the tool name, output field and canonical argument values
//! (artifacts contribute their own digests), so dataflow correctness is
//! checkable byte for byte. Quantification tools emit measurement tables,
//! classifiers apply fixed threshold rules to them, and the report tool
//! cites the measurement artifacts it used.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::digest::{derived_rng, sha256_str, unit_from_digest};
use crate::registry::{check_bound_args, ArgSpec, ErrorCode, Registry, SemanticType, SideEffect, ToolSpec};
use crate::store::{ArtifactStore, StoreError};
use crate::token::SymbolicToken;
use crate::value::{ArtifactRef, BoundValue, Literal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    Denoise,
    SuperRes,
    Segment,
    Recon,
    Register,
    BrainGrade,
    ProstateRpt,
    CardiacRpt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainClass {
    Short,
    Long,
}

impl TaskId {
    pub const ALL: [TaskId; 8] = [
        TaskId::Denoise,
        TaskId::SuperRes,
        TaskId::Segment,
        TaskId::Recon,
        TaskId::Register,
        TaskId::BrainGrade,
        TaskId::ProstateRpt,
        TaskId::CardiacRpt,
    ];

    pub fn chain_class(self) -> ChainClass {
        match self {
            TaskId::BrainGrade | TaskId::ProstateRpt | TaskId::CardiacRpt => ChainClass::Long,
            _ => ChainClass::Short,
        }
    }

    pub fn is_long(self) -> bool {
        self.chain_class() == ChainClass::Long
    }

    /// Row label used in result tables.
    pub fn row_label(self) -> &'static str {
        match self {
            TaskId::Denoise => "Denoise",
            TaskId::SuperRes => "Super-resolution",
            TaskId::Segment => "Segmentation",
            TaskId::Recon => "Reconstruction",
            TaskId::Register => "Registration",
            TaskId::BrainGrade => "Brain grading",
            TaskId::ProstateRpt => "Prostate report",
            TaskId::CardiacRpt => "Cardiac report",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            TaskId::Denoise => "denoise",
            TaskId::SuperRes => "superres",
            TaskId::Segment => "segment",
            TaskId::Recon => "recon",
            TaskId::Register => "register",
            TaskId::BrainGrade => "braingrade",
            TaskId::ProstateRpt => "prostaterpt",
            TaskId::CardiacRpt => "cardiacrpt",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown task '{0}'")]
pub struct UnknownTask(pub String);

impl FromStr for TaskId {
    type Err = UnknownTask;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_ascii_lowercase();
        TaskId::ALL
            .into_iter()
            .find(|t| t.to_string().eq_ignore_ascii_case(s) || t.slug() == norm)
            .ok_or_else(|| UnknownTask(s.to_string()))
    }
}

const COMMON_CODES: [ErrorCode; 5] = [
    ErrorCode::SchemaMismatch,
    ErrorCode::MissingInput,
    ErrorCode::ScopeViolation,
    ErrorCode::ToolTransientFailure,
    ErrorCode::ToolHardFailure,
];

fn tool(name: &str, args: Vec<(&str, ArgSpec)>, outputs: Vec<(&str, SemanticType)>) -> ToolSpec {
    let mut error_codes: BTreeSet<ErrorCode> = COMMON_CODES.into_iter().collect();
    if args.iter().any(|(_, a)| a.range.is_some()) {
        error_codes.insert(ErrorCode::InvalidOverride);
    }
    let side_effect = if outputs.iter().all(|(_, t)| !t.is_artifact()) {
        SideEffect::Pure
    } else {
        SideEffect::WritesArtifact
    };
    ToolSpec {
        name: name.to_string(),
        args: args.into_iter().map(|(n, a)| (n.to_string(), a)).collect(),
        outputs: outputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
        error_codes,
        side_effect,
    }
}

fn scalar(default: f64, lo: f64, hi: f64) -> ArgSpec {
    ArgSpec::optional(SemanticType::Scalar, Literal::Float(default)).with_range(lo, hi)
}

use SemanticType as T;

/// Every tool the simulated library offers.
pub fn tool_library() -> Vec<ToolSpec> {
    let req = ArgSpec::required;
    vec![
        tool("load_volume", vec![("source", req(T::VolumeRef))], vec![("volume", T::VolumeRef)]),
        tool("load_kspace", vec![("source", req(T::KSpaceRef))], vec![("kspace", T::KSpaceRef)]),
        tool("identify_sequence", vec![("source", req(T::KSpaceRef))], vec![("kspace", T::KSpaceRef)]),
        tool(
            "denoise_volume",
            vec![("input", req(T::VolumeRef)), ("strength", scalar(0.5, 0.0, 1.0))],
            vec![("volume", T::VolumeRef)],
        ),
        tool(
            "upsample_volume",
            vec![("input", req(T::VolumeRef)), ("factor", scalar(2.0, 1.0, 8.0))],
            vec![("volume", T::VolumeRef)],
        ),
        tool(
            "resample_volume",
            vec![("input", req(T::VolumeRef)), ("spacing", scalar(1.0, 0.1, 5.0))],
            vec![("volume", T::VolumeRef)],
        ),
        tool("normalize_intensity", vec![("input", req(T::VolumeRef))], vec![("volume", T::VolumeRef)]),
        tool(
            "segment_brain",
            vec![("input", req(T::VolumeRef)), ("threshold", scalar(0.5, 0.0, 1.0))],
            vec![("mask", T::MaskRef)],
        ),
        tool(
            "segment_tumor",
            vec![("input", req(T::VolumeRef)), ("threshold", scalar(0.5, 0.0, 1.0))],
            vec![("mask", T::MaskRef)],
        ),
        tool(
            "segment_prostate",
            vec![("input", req(T::VolumeRef)), ("threshold", scalar(0.5, 0.0, 1.0))],
            vec![("mask", T::MaskRef)],
        ),
        tool(
            "segment_heart",
            vec![("input", req(T::VolumeRef)), ("threshold", scalar(0.5, 0.0, 1.0))],
            vec![("mask", T::MaskRef)],
        ),
        tool(
            "reconstruct_image",
            vec![("kspace", req(T::KSpaceRef)), ("iterations", scalar(10.0, 1.0, 100.0))],
            vec![("volume", T::VolumeRef)],
        ),
        tool(
            "register_volume",
            vec![
                ("moving", req(T::VolumeRef)),
                ("fixed", req(T::VolumeRef)),
                ("smoothness", scalar(0.3, 0.0, 1.0)),
            ],
            vec![("volume", T::VolumeRef)],
        ),
        tool(
            "detect_lesions",
            vec![
                ("input", req(T::VolumeRef)),
                ("mask", req(T::MaskRef)),
                ("sensitivity", scalar(0.5, 0.0, 1.0)),
            ],
            vec![("lesions", T::MaskRef)],
        ),
        tool(
            "extract_features",
            vec![("mask", req(T::MaskRef)), ("volume", ArgSpec::fillable(T::VolumeRef))],
            vec![("measurements", T::MeasurementTable)],
        ),
        tool(
            "classify_grade",
            vec![("measurements", req(T::MeasurementTable)), ("cutoff", scalar(0.5, 0.0, 1.0))],
            vec![("label", T::Label)],
        ),
        tool("classify_pirads", vec![("measurements", req(T::MeasurementTable))], vec![("label", T::Label)]),
        tool(
            "classify_phenotype",
            vec![("measurements", req(T::MeasurementTable)), ("ef_cutoff", scalar(0.45, 0.0, 1.0))],
            vec![("label", T::Label)],
        ),
        tool(
            "synthesize_report",
            vec![
                ("findings", req(T::Label)),
                ("measurements", ArgSpec::fillable(T::MeasurementTable)),
                (
                    "title",
                    ArgSpec::optional(T::Text, Literal::text("MRI report")).with_reference(true),
                ),
            ],
            vec![("report", T::ReportDoc)],
        ),
        tool("frame_select", vec![("volume", req(T::VolumeRef))], vec![("ed_frame", T::FrameIndex), ("es_frame", T::FrameIndex)]),
    ]
}

pub fn library_registry() -> Registry {
    Registry::from_specs(tool_library()).expect("library specs are valid")
}

/// Where a reference-chain argument gets its value.
#[derive(Debug, Clone, PartialEq)]
pub enum Wire {
    /// A case, sequence or runtime token.
    Input(SymbolicToken),
    /// Output `field` of the (1-based) reference step.
    Step(usize, String),
    Lit(Literal),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStep {
    pub tool: String,
    pub args: Vec<(String, Wire)>,
}

impl ReferenceStep {
    fn new(tool: &str, args: Vec<(&str, Wire)>) -> Self {
        Self {
            tool: tool.to_string(),
            args: args.into_iter().map(|(n, w)| (n.to_string(), w)).collect(),
        }
    }
}

/// Canonical id of the k-th (1-based) reference step.
pub fn step_id(k: usize) -> String {
    format!("step{k}")
}

fn case(field: &str) -> Wire {
    Wire::Input(SymbolicToken::case(&[field]))
}

fn from(k: usize, field: &str) -> Wire {
    Wire::Step(k, field.to_string())
}

fn lit(x: f64) -> Wire {
    Wire::Lit(Literal::Float(x))
}

/// The canonical, correctly wired tool chain for a task.
pub fn reference_chain(task: TaskId) -> Vec<ReferenceStep> {
    let s = ReferenceStep::new;
    match task {
        TaskId::Denoise => vec![
            s("load_volume", vec![("source", case("input"))]),
            s("denoise_volume", vec![("input", from(1, "volume")), ("strength", lit(0.5))]),
        ],
        TaskId::SuperRes => vec![
            s("load_volume", vec![("source", case("input"))]),
            s("upsample_volume", vec![("input", from(1, "volume")), ("factor", lit(2.0))]),
            s("resample_volume", vec![("input", from(2, "volume")), ("spacing", lit(1.0))]),
        ],
        TaskId::Segment => vec![
            s("load_volume", vec![("source", case("input"))]),
            s("normalize_intensity", vec![("input", from(1, "volume"))]),
            s("segment_brain", vec![("input", from(2, "volume")), ("threshold", lit(0.5))]),
        ],
        TaskId::Recon => vec![
            s("load_kspace", vec![("source", case("input"))]),
            s("reconstruct_image", vec![("kspace", from(1, "kspace")), ("iterations", lit(10.0))]),
        ],
        TaskId::Register => vec![
            s("load_volume", vec![("source", case("input"))]),
            s(
                "register_volume",
                vec![("moving", from(1, "volume")), ("fixed", case("reference")), ("smoothness", lit(0.3))],
            ),
        ],
        TaskId::BrainGrade => vec![
            s("load_volume", vec![("source", case("input"))]),
            s("denoise_volume", vec![("input", from(1, "volume")), ("strength", lit(0.5))]),
            s("segment_tumor", vec![("input", from(2, "volume")), ("threshold", lit(0.5))]),
            s("extract_features", vec![("mask", from(3, "mask")), ("volume", from(2, "volume"))]),
            s("classify_grade", vec![("measurements", from(4, "measurements")), ("cutoff", lit(0.5))]),
        ],
        TaskId::ProstateRpt => vec![
            s("load_volume", vec![("source", case("input"))]),
            s(
                "register_volume",
                vec![("moving", from(1, "volume")), ("fixed", case("reference")), ("smoothness", lit(0.3))],
            ),
            s("segment_prostate", vec![("input", from(2, "volume")), ("threshold", lit(0.5))]),
            s(
                "detect_lesions",
                vec![("input", from(2, "volume")), ("mask", from(3, "mask")), ("sensitivity", lit(0.5))],
            ),
            s("extract_features", vec![("mask", from(4, "lesions")), ("volume", from(2, "volume"))]),
            s("classify_pirads", vec![("measurements", from(5, "measurements"))]),
            s(
                "synthesize_report",
                vec![
                    ("findings", from(6, "label")),
                    ("measurements", from(5, "measurements")),
                    ("title", Wire::Lit(Literal::text("Prostate MRI report for @runtime.case_id"))),
                ],
            ),
        ],
        TaskId::CardiacRpt => vec![
            s("identify_sequence", vec![("source", Wire::Input(SymbolicToken::seq(&["cine", "kspace"])))]),
            s("reconstruct_image", vec![("kspace", from(1, "kspace")), ("iterations", lit(10.0))]),
            s("segment_heart", vec![("input", from(2, "volume")), ("threshold", lit(0.5))]),
            s("extract_features", vec![("mask", from(3, "mask"))]),
            s("classify_phenotype", vec![("measurements", from(4, "measurements")), ("ef_cutoff", lit(0.45))]),
            s(
                "synthesize_report",
                vec![
                    ("findings", from(5, "label")),
                    ("title", Wire::Lit(Literal::text("Cardiac MRI report for @runtime.case_id"))),
                ],
            ),
        ],
    }
}

/// Extra tools a task may use beyond its reference chain.
fn auxiliary_tools(task: TaskId) -> &'static [&'static str] {
    match task {
        TaskId::CardiacRpt => &["frame_select"],
        _ => &[],
    }
}

/// Allowed toolset and reference chain (ordered tool names) for a task.
pub fn build_task_toolset(task: TaskId) -> (Vec<ToolSpec>, Vec<String>) {
    let chain: Vec<String> = reference_chain(task).into_iter().map(|s| s.tool).collect();
    let wanted: BTreeSet<&str> = chain.iter().map(String::as_str).chain(auxiliary_tools(task).iter().copied()).collect();
    let tools = tool_library().into_iter().filter(|t| wanted.contains(t.name.as_str())).collect();
    (tools, chain)
}

/// Named case inputs a task's contract provides, with their types.
/// Sequence inputs are keyed `seq.<name>.<field>`.
pub fn task_inputs(task: TaskId) -> Vec<(&'static str, SemanticType)> {
    match task {
        TaskId::Recon => vec![("input", T::KSpaceRef)],
        TaskId::Register | TaskId::ProstateRpt => vec![("input", T::VolumeRef), ("reference", T::VolumeRef)],
        TaskId::CardiacRpt => vec![("seq.cine.kspace", T::KSpaceRef)],
        _ => vec![("input", T::VolumeRef)],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSite {
    pub task: TaskId,
    /// 1-based position of the node in plan order.
    pub position: usize,
}

/// Tool-level fault injection. Every draw is keyed by (seed, task, node,
/// attempt), so the fault stream does not depend on which controller runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultConfig {
    pub transient_failure_prob: f64,
    pub transient_error_code: ErrorCode,
    pub max_transient_per_node: u32,
    pub hard_failure_nodes: BTreeSet<FaultSite>,
    /// Nodes that fail transiently on their first `max_transient_per_node`
    /// attempts regardless of the probability.
    pub transient_failure_nodes: BTreeSet<FaultSite>,
    /// Probability that an artifact-writing tool tries to write outside its
    /// case scope on a given attempt.
    pub scope_escape_prob: f64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self {
            transient_failure_prob: 0.0,
            transient_error_code: ErrorCode::ToolTransientFailure,
            max_transient_per_node: 2,
            hard_failure_nodes: BTreeSet::new(),
            transient_failure_nodes: BTreeSet::new(),
            scope_escape_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("fault config: {0}")]
pub struct FaultConfigError(pub String);

impl FaultConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), FaultConfigError> {
        for (name, p) in [
            ("transient_failure_prob", self.transient_failure_prob),
            ("scope_escape_prob", self.scope_escape_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FaultConfigError(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Identifies one invocation for fault keying and artifact naming.
#[derive(Debug, Clone)]
pub struct InvokeContext<'a> {
    pub task: TaskId,
    pub node_id: &'a str,
    pub position: usize,
    /// Number of earlier dispatches of this node.
    pub attempt: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub outputs: BTreeMap<String, BoundValue>,
    pub runtime_writes: BTreeMap<String, Literal>,
    /// Canonical argument rendering (defaults applied) the digests derive from.
    pub canonical_inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{code}{}: {message}", arg.as_ref().map(|a| format!("({a})")).unwrap_or_default())]
pub struct ToolFailure {
    pub code: ErrorCode,
    pub arg: Option<String>,
    pub message: String,
}

impl ToolFailure {
    pub fn new(code: ErrorCode, arg: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            code,
            arg: arg.map(str::to_string),
            message: message.into(),
        }
    }
}

/// Digest of output `field` of `tool` given canonical inputs.
pub fn output_digest(tool: &str, field: &str, canonical_inputs: &BTreeMap<String, String>) -> String {
    let mut parts = vec!["tool", tool, "field", field];
    for (k, v) in canonical_inputs {
        parts.push(k);
        parts.push(v);
    }
    sha256_str(&parts)
}

/// Creates a synthetic case input artifact.
pub fn materialize_input(
    store: &mut ArtifactStore,
    name: &str,
    semantic_type: SemanticType,
    volume_seed: u64,
    seed: u64,
) -> Result<ArtifactRef, StoreError> {
    let digest = sha256_str(&["case-input", name, &semantic_type.to_string(), &volume_seed.to_string(), &seed.to_string()]);
    let id = format!("input.{name}");
    let payload = format!("SIM-INPUT|{semantic_type}|{digest}");
    store.write(&id, semantic_type, &digest, "case-input", payload.as_bytes(), &ArtifactStore::default_location(&id))
}

fn draw(seed: u64, labels: &[&str]) -> f64 {
    derived_rng(seed, labels).gen::<f64>()
}

/// Runs one simulated tool call. Arguments must be concrete; artifact-typed
/// text literals are treated as paths and resolved through the store.
pub fn invoke(
    spec: &ToolSpec,
    bound_args: &BTreeMap<String, BoundValue>,
    store: &mut ArtifactStore,
    faults: &FaultConfig,
    ctx: &InvokeContext<'_>,
) -> Result<ToolResult, ToolFailure> {
    let site = FaultSite {
        task: ctx.task,
        position: ctx.position,
    };
    let task = ctx.task.to_string();
    let attempt = ctx.attempt.to_string();
    if faults.hard_failure_nodes.contains(&site) {
        return Err(ToolFailure::new(ErrorCode::ToolHardFailure, None, "injected hard failure"));
    }
    if ctx.attempt < faults.max_transient_per_node {
        let forced = faults.transient_failure_nodes.contains(&site);
        let drawn = faults.transient_failure_prob > 0.0
            && draw(ctx.seed, &["transient", &task, ctx.node_id, &attempt]) < faults.transient_failure_prob;
        if forced || drawn {
            return Err(ToolFailure::new(faults.transient_error_code, None, "injected transient failure"));
        }
    }

    check_bound_args(spec, bound_args).map_err(|issue| ToolFailure::new(issue.code, Some(&issue.arg), issue.reason))?;

    // Resolve artifact arguments and fill defaults.
    let mut resolved: BTreeMap<String, BoundValue> = BTreeMap::new();
    for (name, arg) in &spec.args {
        let value = match bound_args.get(name) {
            Some(v) => v.clone(),
            None => match &arg.default {
                Some(d) => BoundValue::Literal(d.clone()),
                None => continue,
            },
        };
        let value = match (&value, arg.semantic_type.is_artifact()) {
            (BoundValue::Literal(Literal::Text(path)), true) => {
                let artifact = store.resolve_path(path).map_err(|e| ToolFailure::new(e.code(), Some(name), e.to_string()))?;
                if artifact.semantic_type != arg.semantic_type {
                    return Err(ToolFailure::new(
                        ErrorCode::SchemaMismatch,
                        Some(name),
                        format!("{} is {}, expected {}", artifact.artifact_id, artifact.semantic_type, arg.semantic_type),
                    ));
                }
                BoundValue::Artifact(artifact)
            }
            (BoundValue::Artifact(a), _) => {
                if !store.exists(a) {
                    return Err(ToolFailure::new(ErrorCode::MissingInput, Some(name), format!("{} is missing", a.artifact_id)));
                }
                value
            }
            _ => value,
        };
        resolved.insert(name.clone(), value);
    }
    let canonical_inputs: BTreeMap<String, String> = resolved.iter().map(|(k, v)| (k.clone(), v.canonical())).collect();

    let mut outputs = BTreeMap::new();
    let mut runtime_writes = BTreeMap::new();
    for (field, ty) in &spec.outputs {
        let digest = output_digest(&spec.name, field, &canonical_inputs);
        if !ty.is_artifact() {
            let value = Literal::Int((unit_from_digest(&digest, 0) * 20.0) as i64);
            if spec.name == "frame_select" {
                runtime_writes.insert(field.clone(), value.clone());
            }
            outputs.insert(field.clone(), BoundValue::Literal(value));
            continue;
        }
        let payload = build_payload(spec, *ty, &digest, &resolved, store).map_err(|e| ToolFailure::new(e.code(), None, e.to_string()))?;
        let artifact_id = format!("{}.{field}", ctx.node_id);
        let escape = faults.scope_escape_prob > 0.0
            && draw(ctx.seed, &["escape", &task, ctx.node_id, &attempt, field]) < faults.scope_escape_prob;
        let location: PathBuf = if escape {
            Path::new("..").join("escaped").join(&artifact_id)
        } else {
            ArtifactStore::default_location(&artifact_id)
        };
        let artifact = store
            .write(&artifact_id, *ty, &digest, ctx.node_id, &payload, &location)
            .map_err(|e| ToolFailure::new(e.code(), None, e.to_string()))?;
        outputs.insert(field.clone(), BoundValue::Artifact(artifact));
    }
    Ok(ToolResult {
        outputs,
        runtime_writes,
        canonical_inputs,
    })
}

const MEASUREMENT_FIELDS: [&str; 4] = ["volume_ml", "mean_intensity", "ejection_fraction", "wall_thickness"];

fn scalar_arg(args: &BTreeMap<String, BoundValue>, name: &str) -> f64 {
    match args.get(name) {
        Some(BoundValue::Literal(lit)) => lit.as_f64().unwrap_or_default(),
        _ => 0.0,
    }
}

fn read_json(store: &mut ArtifactStore, artifact: &ArtifactRef) -> Result<serde_json::Value, StoreError> {
    let bytes = store.read_payload(artifact)?;
    Ok(serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
}

fn build_payload(
    spec: &ToolSpec,
    ty: SemanticType,
    digest: &str,
    args: &BTreeMap<String, BoundValue>,
    store: &mut ArtifactStore,
) -> Result<Vec<u8>, StoreError> {
    let doc = match ty {
        T::MeasurementTable => {
            let fields: serde_json::Map<String, serde_json::Value> = MEASUREMENT_FIELDS
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let u = unit_from_digest(digest, i + 1);
                    let v = if *f == "volume_ml" { 20.0 + 200.0 * u } else { u };
                    (f.to_string(), json!((v * 1000.0).round() / 1000.0))
                })
                .collect();
            json!({ "digest": digest, "fields": fields })
        }
        T::Label => {
            let table = args.get("measurements").and_then(BoundValue::as_artifact).cloned();
            let (fields, table_id) = match &table {
                Some(t) => (read_json(store, t)?["fields"].clone(), t.artifact_id.clone()),
                None => (serde_json::Value::Null, String::new()),
            };
            let f = |name: &str| fields[name].as_f64().unwrap_or_default();
            let (label, rule) = match spec.name.as_str() {
                "classify_grade" => {
                    let cutoff = scalar_arg(args, "cutoff");
                    let label = if f("mean_intensity") > cutoff { "HGG" } else { "LGG" };
                    (label.to_string(), format!("mean_intensity > {cutoff} => HGG"))
                }
                "classify_pirads" => {
                    let score = 1 + ((f("volume_ml") - 20.0) / 200.0 * 5.0).clamp(0.0, 4.0) as i64;
                    (format!("PI-RADS {score}"), "score = 1 + floor(5 * (volume_ml - 20) / 200)".to_string())
                }
                _ => {
                    let ef_cutoff = scalar_arg(args, "ef_cutoff");
                    let label = if f("ejection_fraction") < ef_cutoff {
                        "DCM"
                    } else if f("wall_thickness") > 0.8 {
                        "HCM"
                    } else {
                        "NOR"
                    };
                    (label.to_string(), format!("ejection_fraction < {ef_cutoff} => DCM; wall_thickness > 0.8 => HCM"))
                }
            };
            json!({
                "digest": digest,
                "label": label,
                "rule": rule,
                "evidence": { "measurement_artifact": table_id, "fields": fields },
            })
        }
        T::ReportDoc => {
            let findings = args.get("findings").and_then(BoundValue::as_artifact).cloned();
            let label_doc = match &findings {
                Some(a) => read_json(store, a)?,
                None => serde_json::Value::Null,
            };
            let (table_id, fields) = match args.get("measurements").and_then(BoundValue::as_artifact).cloned() {
                Some(t) => (t.artifact_id.clone(), read_json(store, &t)?["fields"].clone()),
                None => (
                    label_doc["evidence"]["measurement_artifact"].as_str().unwrap_or_default().to_string(),
                    label_doc["evidence"]["fields"].clone(),
                ),
            };
            let claims: Vec<serde_json::Value> = fields
                .as_object()
                .map(|m| {
                    m.iter()
                        .map(|(k, v)| json!({ "field": k, "value": v, "measurement_artifact": table_id }))
                        .collect()
                })
                .unwrap_or_default();
            let title = match args.get("title") {
                Some(BoundValue::Literal(Literal::Text(t))) => t.clone(),
                _ => String::new(),
            };
            json!({
                "digest": digest,
                "title": title,
                "finding": label_doc["label"],
                "label_artifact": findings.map(|a| a.artifact_id).unwrap_or_default(),
                "claims": claims,
            })
        }
        _ => return Ok(format!("SIM|{ty}|{}|{digest}", spec.name).into_bytes()),
    };
    Ok(serde_json::to_vec_pretty(&doc).expect("payload serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (tempfile::TempDir, ArtifactStore, ArtifactRef) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ArtifactStore::create(&dir.path().join("cases/c1"), "c1").unwrap();
        let input = materialize_input(&mut store, "input", T::VolumeRef, 3, 1).unwrap();
        (dir, store, input)
    }

    fn ctx(node: &str, attempt: u32) -> InvokeContext<'_> {
        InvokeContext {
            task: TaskId::Denoise,
            node_id: node,
            position: 2,
            attempt,
            seed: 11,
        }
    }

    fn lookup(name: &str) -> ToolSpec {
        tool_library().into_iter().find(|t| t.name == name).unwrap()
    }

    #[test]
    fn library_specs_valid() {
        let reg = library_registry();
        assert_eq!(reg.len(), tool_library().len());
    }

    #[test]
    fn chain_lengths() {
        for task in TaskId::ALL {
            let (tools, chain) = build_task_toolset(task);
            let names: BTreeSet<_> = tools.iter().map(|t| t.name.clone()).collect();
            assert!(chain.iter().all(|c| names.contains(c)));
            match task.chain_class() {
                ChainClass::Short => assert!((1..=3).contains(&chain.len()), "{task}"),
                ChainClass::Long => assert!((5..=7).contains(&chain.len()), "{task}"),
            }
        }
        assert_eq!(build_task_toolset(TaskId::Denoise).1, vec!["load_volume", "denoise_volume"]);
        let cardiac = build_task_toolset(TaskId::CardiacRpt).1;
        assert_eq!(cardiac.len(), 6);
        assert_eq!(cardiac.last().unwrap(), "synthesize_report");
        let outputs_of = |name: &str| lookup(name).outputs.values().copied().collect::<Vec<_>>();
        assert_eq!(outputs_of(build_task_toolset(TaskId::BrainGrade).1.last().unwrap()), vec![T::Label]);
        assert_eq!(outputs_of(cardiac.last().unwrap()), vec![T::ReportDoc]);
    }

    #[test]
    fn task_parse() {
        assert_eq!("CardiacRpt".parse::<TaskId>().unwrap(), TaskId::CardiacRpt);
        assert_eq!("superres".parse::<TaskId>().unwrap(), TaskId::SuperRes);
        assert!("Knee".parse::<TaskId>().is_err());
    }

    #[test]
    fn invoke_is_deterministic() {
        let (_d, mut store, input) = setup();
        let spec = lookup("denoise_volume");
        let args = BTreeMap::from([("input".to_string(), BoundValue::Artifact(input))]);
        let a = invoke(&spec, &args, &mut store, &FaultConfig::none(), &ctx("n1", 0)).unwrap();
        let b = invoke(&spec, &args, &mut store, &FaultConfig::none(), &ctx("n1", 0)).unwrap();
        assert_eq!(a.outputs, b.outputs);
        // explicit default == omitted
        let mut with_default = args.clone();
        with_default.insert("strength".into(), BoundValue::Literal(Literal::Float(0.5)));
        let c = invoke(&spec, &with_default, &mut store, &FaultConfig::none(), &ctx("n1", 0)).unwrap();
        assert_eq!(a.outputs, c.outputs);
    }

    #[test]
    fn forced_transient_then_success() {
        let (_d, mut store, input) = setup();
        let spec = lookup("denoise_volume");
        let args = BTreeMap::from([("input".to_string(), BoundValue::Artifact(input))]);
        let faults = FaultConfig {
            transient_failure_prob: 1.0,
            max_transient_per_node: 1,
            ..FaultConfig::none()
        };
        let err = invoke(&spec, &args, &mut store, &faults, &ctx("n1", 0)).unwrap_err();
        assert_eq!(err.code, ErrorCode::ToolTransientFailure);
        assert!(invoke(&spec, &args, &mut store, &faults, &ctx("n1", 1)).is_ok());
    }

    #[test]
    fn hard_failure_never_succeeds() {
        let (_d, mut store, input) = setup();
        let spec = lookup("denoise_volume");
        let args = BTreeMap::from([("input".to_string(), BoundValue::Artifact(input))]);
        let faults = FaultConfig {
            hard_failure_nodes: BTreeSet::from([FaultSite { task: TaskId::Denoise, position: 2 }]),
            ..FaultConfig::none()
        };
        for attempt in 0..5 {
            let err = invoke(&spec, &args, &mut store, &faults, &ctx("n1", attempt)).unwrap_err();
            assert_eq!(err.code, ErrorCode::ToolHardFailure);
        }
    }

    #[test]
    fn downstream_digest_tracks_upstream() {
        let (_d, mut store, input) = setup();
        let denoise = lookup("denoise_volume");
        let segment = lookup("segment_brain");
        let run_chain = |store: &mut ArtifactStore, strength: f64, tag: &str| {
            let args = BTreeMap::from([
                ("input".to_string(), BoundValue::Artifact(input.clone())),
                ("strength".to_string(), BoundValue::Literal(Literal::Float(strength))),
            ]);
            let d = invoke(&denoise, &args, store, &FaultConfig::none(), &ctx(&format!("d{tag}"), 0)).unwrap();
            let seg_args = BTreeMap::from([("input".to_string(), d.outputs["volume"].clone())]);
            let s = invoke(&segment, &seg_args, store, &FaultConfig::none(), &ctx(&format!("s{tag}"), 0)).unwrap();
            s.outputs["mask"].as_artifact().unwrap().content_digest.clone()
        };
        let a = run_chain(&mut store, 0.5, "a");
        let b = run_chain(&mut store, 0.5, "b");
        let c = run_chain(&mut store, 0.7, "c");
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn literal_paths_resolve_or_fail() {
        let (_d, mut store, input) = setup();
        let spec = lookup("denoise_volume");
        let path = store.display_path(&input);
        let ok = BTreeMap::from([("input".to_string(), BoundValue::Literal(Literal::Text(path)))]);
        assert!(invoke(&spec, &ok, &mut store, &FaultConfig::none(), &ctx("n1", 0)).is_ok());

        let inside = format!("{}/artifacts/made_up.nii.gz", store.scope.display());
        let bad = BTreeMap::from([("input".to_string(), BoundValue::Literal(Literal::Text(inside)))]);
        let err = invoke(&spec, &bad, &mut store, &FaultConfig::none(), &ctx("n1", 0)).unwrap_err();
        assert_eq!(err.code, ErrorCode::MissingInput);

        let escape = BTreeMap::from([("input".to_string(), BoundValue::Literal(Literal::text("../c2/artifacts/x")))]);
        let err = invoke(&spec, &escape, &mut store, &FaultConfig::none(), &ctx("n1", 0)).unwrap_err();
        assert_eq!(err.code, ErrorCode::ScopeViolation);
    }

    #[test]
    fn schema_and_range_errors() {
        let (_d, mut store, input) = setup();
        let spec = lookup("denoise_volume");
        let mut args = BTreeMap::from([("input".to_string(), BoundValue::Artifact(input))]);
        args.insert("strength".into(), BoundValue::Literal(Literal::text("high")));
        let err = invoke(&spec, &args, &mut store, &FaultConfig::none(), &ctx("n1", 0)).unwrap_err();
        assert_eq!((err.code, err.arg.as_deref()), (ErrorCode::SchemaMismatch, Some("strength")));
        args.insert("strength".into(), BoundValue::Literal(Literal::Float(7.0)));
        let err = invoke(&spec, &args, &mut store, &FaultConfig::none(), &ctx("n1", 0)).unwrap_err();
        assert_eq!(err.code, ErrorCode::InvalidOverride);
    }

    #[test]
    fn escape_writes_are_rejected() {
        let (_d, mut store, input) = setup();
        let spec = lookup("denoise_volume");
        let args = BTreeMap::from([("input".to_string(), BoundValue::Artifact(input))]);
        let faults = FaultConfig {
            scope_escape_prob: 1.0,
            ..FaultConfig::none()
        };
        let err = invoke(&spec, &args, &mut store, &faults, &ctx("n1", 0)).unwrap_err();
        assert_eq!(err.code, ErrorCode::ScopeViolation);
        assert_eq!(store.escape_attempts.len(), 1);
        assert!(!store.scope.parent().unwrap().join("escaped").exists());
    }

    #[test]
    fn frame_select_writes_runtime() {
        let (_d, mut store, input) = setup();
        let spec = lookup("frame_select");
        let args = BTreeMap::from([("volume".to_string(), BoundValue::Artifact(input))]);
        let out = invoke(&spec, &args, &mut store, &FaultConfig::none(), &ctx("fs", 0)).unwrap();
        assert!(out.runtime_writes.contains_key("ed_frame"));
        assert!(matches!(out.outputs["es_frame"], BoundValue::Literal(Literal::Int(_))));
    }
}
