//! Task contracts, milestone validation and case scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::registry::SemanticType;
use crate::sim_tools::{self, library_registry, materialize_input, output_digest, reference_chain, TaskId, Wire};
use crate::store::{CaseState, NodeStatus, StoreError};
use crate::token::{scan_arguments, Segment, TokenKind};
use crate::trace::{EventBody, TraceEvent};
use crate::value::{BoundValue, Literal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Predicate {
    ArtifactExists,
    DigestMatchesRecomputation,
    LabelInAllowedSet,
    ReportContainsEvidenceLinks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestone {
    pub id: String,
    /// Tool whose output satisfies this milestone.
    pub tool: String,
    /// Output field of `tool`.
    pub output: String,
    #[serde(rename = "type")]
    pub semantic_type: SemanticType,
    pub predicate: Predicate,
    #[serde(default)]
    pub deliverable: bool,
    /// Allowed labels for [`Predicate::LabelInAllowedSet`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub allowed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseInput {
    pub volume_seed: u64,
    /// Named input artifacts, exposed as `@case.<name>`.
    #[serde(default)]
    pub artifacts: BTreeMap<String, SemanticType>,
    /// Scalar metadata, exposed as `@case.<name>`.
    #[serde(default)]
    pub metadata: BTreeMap<String, Literal>,
    /// Per-sequence artifacts, exposed as `@seq.<sequence>.<field>`.
    #[serde(default)]
    pub sequences: BTreeMap<String, BTreeMap<String, SemanticType>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskContract {
    pub task: TaskId,
    pub goal: String,
    pub input: CaseInput,
    pub allowed_tools: BTreeSet<String>,
    pub milestones: Vec<Milestone>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ContractError {
    pub message: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
}

impl fmt::Display for ContractError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    (line, column)
}

/// First line mentioning `needle`, for pointing semantic errors at source.
fn line_of(text: &str, needle: &str) -> Option<usize> {
    text.lines().position(|l| l.contains(needle)).map(|i| i + 1)
}

impl TaskContract {
    pub fn deliverables(&self) -> impl Iterator<Item = &Milestone> {
        self.milestones.iter().filter(|m| m.deliverable)
    }

    pub fn milestone_tools(&self) -> BTreeSet<&str> {
        self.milestones.iter().map(|m| m.tool.as_str()).collect()
    }

    /// Checks contract invariants. Errors carry the offending key for line lookup.
    pub fn check(&self) -> Result<(), (String, String)> {
        let registry = library_registry();
        if self.milestones.is_empty() {
            return Err(("milestones".into(), "contract declares no milestones".into()));
        }
        if self.deliverables().next().is_none() {
            return Err(("milestones".into(), "no milestone is flagged as a deliverable".into()));
        }
        for tool in &self.allowed_tools {
            if registry.lookup(tool).is_none() {
                return Err((tool.clone(), format!("allowed tool '{tool}' is not in the tool library")));
            }
        }
        let chain = reference_chain(self.task);
        for step in &chain {
            if !self.allowed_tools.contains(&step.tool) {
                return Err((
                    "allowed_tools".into(),
                    format!("allowed_tools omits '{}' from the {} reference chain", step.tool, self.task),
                ));
            }
        }
        let mut seen = BTreeSet::new();
        for m in &self.milestones {
            if !seen.insert(m.id.as_str()) {
                return Err((m.id.clone(), format!("duplicate milestone id '{}'", m.id)));
            }
            if !self.allowed_tools.contains(&m.tool) {
                return Err((m.id.clone(), format!("milestone '{}' uses tool '{}' outside allowed_tools", m.id, m.tool)));
            }
            if !chain.iter().any(|s| s.tool == m.tool) {
                return Err((m.id.clone(), format!("milestone '{}' names '{}', which is not in the reference chain", m.id, m.tool)));
            }
            let spec = registry.lookup(&m.tool).expect("checked above");
            if spec.outputs.get(&m.output) != Some(&m.semantic_type) {
                return Err((m.id.clone(), format!("tool '{}' has no {} output '{}'", m.tool, m.semantic_type, m.output)));
            }
            let needs_allowed = m.predicate == Predicate::LabelInAllowedSet;
            if needs_allowed && (m.allowed.is_empty() || m.semantic_type != SemanticType::Label) {
                return Err((m.id.clone(), format!("milestone '{}' needs a Label output and a non-empty allowed set", m.id)));
            }
            if m.predicate == Predicate::ReportContainsEvidenceLinks && m.semantic_type != SemanticType::ReportDoc {
                return Err((m.id.clone(), format!("milestone '{}' checks evidence links on a non-report output", m.id)));
            }
        }
        for (name, value) in &self.input.metadata {
            if value.as_f64().is_none() {
                return Err((name.clone(), format!("metadata '{name}' must be numeric")));
            }
        }
        for step in &chain {
            for (_, wire) in &step.args {
                let Wire::Input(token) = wire else { continue };
                let declared = match token.kind {
                    TokenKind::Case => self.input.artifacts.contains_key(&token.field_key()),
                    TokenKind::Seq => {
                        let (seq, rest) = token.field_path.split_first().expect("non-empty");
                        self.input.sequences.get(seq).is_some_and(|f| f.contains_key(&rest.join(".")))
                    }
                    _ => true,
                };
                if !declared {
                    return Err(("[input".into(), format!("input does not provide {token}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("contract serializes")
    }
}

/// Parses and validates a contract. Errors carry line positions.
pub fn parse_contract(text: &str) -> Result<TaskContract, ContractError> {
    let contract: TaskContract = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map(|s| line_col(text, s.start)).unzip();
        ContractError {
            message: e.message().to_string(),
            line,
            column,
        }
    })?;
    contract.check().map_err(|(key, message)| ContractError {
        message,
        line: line_of(text, &key),
        column: None,
    })?;
    Ok(contract)
}

pub fn load_contract(path: &Path) -> Result<TaskContract, ContractError> {
    let text = std::fs::read_to_string(path).map_err(|e| ContractError {
        message: format!("{}: {e}", path.display()),
        line: None,
        column: None,
    })?;
    parse_contract(&text).map_err(|e| ContractError {
        message: format!("{}: {}", path.display(), e.message),
        ..e
    })
}

const SHIPPED: [(&str, &str); 8] = [
    ("denoise.toml", include_str!("../contracts/denoise.toml")),
    ("superres.toml", include_str!("../contracts/superres.toml")),
    ("segment.toml", include_str!("../contracts/segment.toml")),
    ("recon.toml", include_str!("../contracts/recon.toml")),
    ("register.toml", include_str!("../contracts/register.toml")),
    ("braingrade.toml", include_str!("../contracts/braingrade.toml")),
    ("prostaterpt.toml", include_str!("../contracts/prostaterpt.toml")),
    ("cardiacrpt.toml", include_str!("../contracts/cardiacrpt.toml")),
];

/// The built-in contract set, one per task, as (file name, source text).
pub fn shipped_contract_sources() -> &'static [(&'static str, &'static str)] {
    &SHIPPED
}

pub fn shipped_contracts() -> Vec<TaskContract> {
    SHIPPED
        .iter()
        .map(|(name, text)| parse_contract(text).unwrap_or_else(|e| panic!("shipped contract {name}: {e}")))
        .collect()
}

pub fn shipped_contract(task: TaskId) -> TaskContract {
    shipped_contracts().into_iter().find(|c| c.task == task).expect("every task ships a contract")
}

/// Creates the case inputs in the store and registers them in `state`.
pub fn materialize_inputs(contract: &TaskContract, state: &mut CaseState, seed: u64) -> Result<(), StoreError> {
    let vseed = contract.input.volume_seed;
    for (name, ty) in &contract.input.artifacts {
        let a = materialize_input(&mut state.store, name, *ty, vseed, seed)?;
        state.add_input(name, BoundValue::Artifact(a));
    }
    for (name, value) in &contract.input.metadata {
        state.add_input(name, BoundValue::Literal(value.clone()));
    }
    for (seq, fields) in &contract.input.sequences {
        for (field, ty) in fields {
            let a = materialize_input(&mut state.store, &format!("seq.{seq}.{field}"), *ty, vseed, seed)?;
            state.sequences.entry(seq.clone()).or_default().insert(field.clone(), BoundValue::Artifact(a));
        }
    }
    Ok(())
}

fn interpolate_runtime(text: &str, state: &CaseState) -> String {
    scan_arguments(text)
        .segments
        .iter()
        .map(|seg| match seg {
            Segment::Literal(s) => s.clone(),
            Segment::Token(t) if t.kind == TokenKind::Runtime => match state.runtime_values.get(&t.field_key()) {
                Some(Literal::Text(s)) => s.clone(),
                Some(lit) => lit.to_string(),
                None => t.to_string(),
            },
            Segment::Token(t) => t.to_string(),
        })
        .collect()
}

/// Output digests the faithful reference chain produces for this case,
/// indexed by chain position (0-based) and output field.
pub fn reference_digests(task: TaskId, state: &CaseState) -> Vec<BTreeMap<String, String>> {
    let registry = library_registry();
    let mut out: Vec<BTreeMap<String, String>> = Vec::new();
    for step in reference_chain(task) {
        let spec = registry.lookup(&step.tool).expect("reference tools are registered");
        let wired: BTreeMap<&str, &Wire> = step.args.iter().map(|(n, w)| (n.as_str(), w)).collect();
        let mut canonical = BTreeMap::new();
        for (name, arg) in &spec.args {
            let value = match wired.get(name.as_str()) {
                Some(Wire::Input(token)) => {
                    let bound = match token.kind {
                        TokenKind::Seq => {
                            let (seq, rest) = token.field_path.split_first().expect("non-empty");
                            state.sequences.get(seq).and_then(|f| f.get(&rest.join(".")))
                        }
                        _ => state.inputs.get(&token.field_key()),
                    };
                    bound.map(BoundValue::canonical).unwrap_or_default()
                }
                Some(Wire::Step(k, field)) => format!("artifact:{}", out[k - 1].get(field).cloned().unwrap_or_default()),
                Some(Wire::Lit(Literal::Text(s))) => Literal::text(interpolate_runtime(s, state)).canonical(),
                Some(Wire::Lit(lit)) => lit.canonical(),
                None => match &arg.default {
                    Some(d) => d.canonical(),
                    None => continue,
                },
            };
            canonical.insert(name.clone(), value);
        }
        out.push(spec.outputs.keys().map(|f| (f.clone(), output_digest(&spec.name, f, &canonical))).collect());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilestoneResult {
    pub milestone_id: String,
    pub validated: bool,
    /// Trace events and artifacts substantiating the verdict.
    pub evidence: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

struct Produced<'a> {
    event: &'a TraceEvent,
    node_id: &'a str,
    artifact: &'a crate::value::ArtifactRef,
}

/// Latest successful production of `tool.output` in the trace.
fn latest_production<'a>(trace: &'a [TraceEvent], tool: &str, output: &str) -> Option<Produced<'a>> {
    trace.iter().rev().find_map(|ev| match &ev.body {
        EventBody::NodeSucceeded { tool: t, outputs, .. } if t == tool => {
            outputs.get(output).and_then(BoundValue::as_artifact).map(|artifact| Produced {
                event: ev,
                node_id: ev.node_id.as_deref().unwrap_or_default(),
                artifact,
            })
        }
        _ => None,
    })
}

fn produced_in_trace<'a>(trace: &'a [TraceEvent], artifact_id: &str, ty: SemanticType) -> Option<&'a TraceEvent> {
    trace.iter().find(|ev| match &ev.body {
        EventBody::NodeSucceeded { outputs, .. } => outputs
            .values()
            .filter_map(BoundValue::as_artifact)
            .any(|a| a.artifact_id == artifact_id && a.semantic_type == ty),
        _ => false,
    })
}

fn chain_position(task: TaskId, tool: &str) -> Option<usize> {
    reference_chain(task).iter().position(|s| s.tool == tool)
}

fn read_doc(state: &mut CaseState, artifact: &crate::value::ArtifactRef) -> Json {
    state
        .store
        .read_payload(artifact)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or(Json::Null)
}

/// Evaluates one milestone predicate against the final state and trace.
pub fn validate_milestone(
    m: &Milestone,
    contract: &TaskContract,
    state: &mut CaseState,
    trace: &[TraceEvent],
    expected: &[BTreeMap<String, String>],
) -> MilestoneResult {
    let mut evidence = Vec::new();
    let fail = |evidence: Vec<String>, reason: String| MilestoneResult {
        milestone_id: m.id.clone(),
        validated: false,
        evidence,
        reason: Some(reason),
    };
    let Some(p) = latest_production(trace, &m.tool, &m.output) else {
        return fail(evidence, format!("no {} event produced {}", m.tool, m.output));
    };
    evidence.push(format!("event#{}:NodeSucceeded:{}", p.event.seq_no, p.node_id));
    evidence.push(format!("artifact:{}@{}", p.artifact.artifact_id, &p.artifact.content_digest[..12.min(p.artifact.content_digest.len())]));
    if p.artifact.semantic_type != m.semantic_type {
        return fail(evidence, format!("{} is {}, expected {}", p.artifact.artifact_id, p.artifact.semantic_type, m.semantic_type));
    }
    let current = state.status_of(p.node_id) == Some(NodeStatus::Succeeded)
        && state.node_outputs.get(p.node_id).and_then(|o| o.get(&m.output)).and_then(BoundValue::as_artifact) == Some(p.artifact);
    if !current {
        return fail(evidence, format!("{} is no longer the current output of {}", p.artifact.artifact_id, p.node_id));
    }
    if !state.store.verify_digest(p.artifact) {
        return fail(evidence, format!("{} is missing or does not match its recorded digest", p.artifact.artifact_id));
    }
    let expected_digest = |tool: &str, field: &str| {
        chain_position(contract.task, tool).and_then(|i| expected.get(i)).and_then(|d| d.get(field)).cloned()
    };
    let digest_ok = |artifact: &crate::value::ArtifactRef, tool: &str, field: &str| {
        expected_digest(tool, field).as_deref() == Some(artifact.content_digest.as_str())
    };
    match m.predicate {
        Predicate::ArtifactExists => {}
        Predicate::DigestMatchesRecomputation => {
            if !digest_ok(p.artifact, &m.tool, &m.output) {
                return fail(evidence, "digest differs from the reference recomputation".into());
            }
            evidence.push("recomputed-digest:match".into());
        }
        Predicate::LabelInAllowedSet => {
            if !digest_ok(p.artifact, &m.tool, &m.output) {
                return fail(evidence, "label digest differs from the reference recomputation".into());
            }
            let doc = read_doc(state, p.artifact);
            let label = doc["label"].as_str().unwrap_or_default().to_string();
            if !m.allowed.contains(&label) {
                return fail(evidence, format!("label '{label}' not in allowed set"));
            }
            evidence.push(format!("label:{label}"));
            if let Some(rule) = doc["rule"].as_str() {
                evidence.push(format!("rule:{rule}"));
            }
            if let Some(table) = doc["evidence"]["measurement_artifact"].as_str() {
                evidence.push(format!("measurements:{table}"));
            }
        }
        Predicate::ReportContainsEvidenceLinks => {
            let doc = read_doc(state, p.artifact);
            let label_id = doc["label_artifact"].as_str().unwrap_or_default();
            let Some(label_event) = produced_in_trace(trace, label_id, SemanticType::Label) else {
                return fail(evidence, format!("report cites label '{label_id}' with no producing event"));
            };
            let label_ok = latest_label(trace, label_id).is_some_and(|(tool, a)| digest_ok(a, tool, "label"));
            if !label_ok {
                return fail(evidence, format!("cited label '{label_id}' differs from the reference recomputation"));
            }
            evidence.push(format!("label:{label_id}<-event#{}", label_event.seq_no));
            let claims = doc["claims"].as_array().cloned().unwrap_or_default();
            if claims.is_empty() {
                return fail(evidence, "report makes no measurement claims".into());
            }
            let mut linked = BTreeSet::new();
            for claim in &claims {
                let table = claim["measurement_artifact"].as_str().unwrap_or_default();
                match produced_in_trace(trace, table, SemanticType::MeasurementTable) {
                    Some(ev) => {
                        if linked.insert(table.to_string()) {
                            evidence.push(format!("measurements:{table}<-event#{}", ev.seq_no));
                        }
                    }
                    None => {
                        let field = claim["field"].as_str().unwrap_or("?");
                        return fail(evidence, format!("claim '{field}' cites '{table}', which no trace event produced"));
                    }
                }
            }
        }
    }
    MilestoneResult {
        milestone_id: m.id.clone(),
        validated: true,
        evidence,
        reason: None,
    }
}

fn latest_label<'a>(trace: &'a [TraceEvent], artifact_id: &str) -> Option<(&'a str, &'a crate::value::ArtifactRef)> {
    trace.iter().rev().find_map(|ev| match &ev.body {
        EventBody::NodeSucceeded { tool, outputs, .. } => outputs
            .values()
            .filter_map(BoundValue::as_artifact)
            .find(|a| a.artifact_id == artifact_id)
            .map(|a| (tool.as_str(), a)),
        _ => None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub sr: u8,
    pub tcr: f64,
    pub validated_milestones: BTreeSet<String>,
    pub milestone_count: usize,
}

impl CaseScore {
    pub fn from_validated(validated: BTreeSet<String>, milestone_count: usize) -> Self {
        let tcr = if milestone_count == 0 {
            0.0
        } else {
            validated.len() as f64 / milestone_count as f64
        };
        Self {
            sr: u8::from(milestone_count > 0 && validated.len() == milestone_count),
            tcr,
            validated_milestones: validated,
            milestone_count,
        }
    }

    pub fn failed(milestone_count: usize) -> Self {
        Self::from_validated(BTreeSet::new(), milestone_count)
    }
}

/// Scores a finished case. Pure in (contract, state, trace).
pub fn score_case(contract: &TaskContract, state: &mut CaseState, trace: &[TraceEvent]) -> (CaseScore, Vec<MilestoneResult>) {
    let expected = reference_digests(contract.task, state);
    let results: Vec<MilestoneResult> = contract
        .milestones
        .iter()
        .map(|m| validate_milestone(m, contract, state, trace, &expected))
        .collect();
    let validated = results.iter().filter(|r| r.validated).map(|r| r.milestone_id.clone()).collect();
    (CaseScore::from_validated(validated, contract.milestones.len()), results)
}

/// Contract for a task built from its reference chain, one milestone per step.
pub fn default_contract(task: TaskId) -> TaskContract {
    let registry = library_registry();
    let chain = reference_chain(task);
    let n = chain.len();
    let milestones = chain
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let spec = registry.lookup(&step.tool).expect("registered");
            let (field, ty) = spec.outputs.iter().next().map(|(f, t)| (f.clone(), *t)).expect("tools have outputs");
            let predicate = match ty {
                SemanticType::Label => Predicate::LabelInAllowedSet,
                SemanticType::ReportDoc => Predicate::ReportContainsEvidenceLinks,
                _ if i == 0 => Predicate::ArtifactExists,
                _ => Predicate::DigestMatchesRecomputation,
            };
            Milestone {
                id: format!("{}_{field}", step.tool),
                tool: step.tool.clone(),
                output: field,
                semantic_type: ty,
                predicate,
                deliverable: i + 1 == n,
                allowed: if ty == SemanticType::Label { allowed_labels(&step.tool) } else { Vec::new() },
            }
        })
        .collect();
    let (tools, _) = sim_tools::build_task_toolset(task);
    let mut input = CaseInput {
        volume_seed: 1000 + TaskId::ALL.iter().position(|t| *t == task).unwrap_or_default() as u64,
        ..CaseInput::default()
    };
    for (name, ty) in sim_tools::task_inputs(task) {
        match name.strip_prefix("seq.").and_then(|r| r.split_once('.')) {
            Some((seq, field)) => {
                input.sequences.entry(seq.to_string()).or_default().insert(field.to_string(), ty);
            }
            None => {
                input.artifacts.insert(name.to_string(), ty);
            }
        }
    }
    TaskContract {
        task,
        goal: format!("{} for the supplied case", task.row_label()),
        input,
        allowed_tools: tools.into_iter().map(|t| t.name).collect(),
        milestones,
    }
}

pub fn allowed_labels(tool: &str) -> Vec<String> {
    let labels: &[&str] = match tool {
        "classify_grade" => &["LGG", "HGG"],
        "classify_pirads" => &["PI-RADS 1", "PI-RADS 2", "PI-RADS 3", "PI-RADS 4", "PI-RADS 5"],
        "classify_phenotype" => &["NOR", "DCM", "HCM", "MINF", "RV"],
        _ => &[],
    };
    labels.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_contracts_load() {
        let all = shipped_contracts();
        assert_eq!(all.len(), 8);
        let tasks: BTreeSet<TaskId> = all.iter().map(|c| c.task).collect();
        assert_eq!(tasks.len(), 8);
        assert_eq!(shipped_contract(TaskId::Denoise).milestones.len(), 2);
    }

    #[test]
    fn missing_chain_tool_rejected() {
        let text = shipped_contract_sources()[0].1.replace("\"denoise_volume\"", "\"normalize_intensity\"");
        let err = parse_contract(&text).unwrap_err();
        assert!(err.message.contains("denoise_volume"), "{err}");
        assert!(err.line.is_some());
    }

    #[test]
    fn unknown_field_rejected_with_position() {
        let text = format!("{}\nflavour = \"x\"\n", shipped_contract_sources()[0].1);
        let err = parse_contract(&text).unwrap_err();
        assert!(err.line.is_some(), "{err}");
    }

    #[test]
    fn shipped_match_generated_defaults() {
        for c in shipped_contracts() {
            let d = default_contract(c.task);
            assert_eq!(c.allowed_tools, d.allowed_tools, "{}", c.task);
            let shape = |ms: &[Milestone]| {
                ms.iter()
                    .map(|m| (m.tool.clone(), m.output.clone(), m.semantic_type, m.predicate, m.deliverable, m.allowed.clone()))
                    .collect::<Vec<_>>()
            };
            assert_eq!(shape(&c.milestones), shape(&d.milestones), "{}", c.task);
        }
    }

    #[test]
    fn toml_round_trip() {
        for c in shipped_contracts() {
            let back = parse_contract(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn score_arithmetic() {
        let ids = |n: usize| (0..n).map(|i| i.to_string()).collect::<BTreeSet<_>>();
        let s = CaseScore::from_validated(ids(3), 4);
        assert_eq!((s.sr, s.tcr), (0, 0.75));
        let s = CaseScore::from_validated(ids(4), 4);
        assert_eq!((s.sr, s.tcr), (1, 1.0));
        let s = CaseScore::from_validated(ids(0), 4);
        assert_eq!((s.sr, s.tcr), (0, 0.0));
    }
}
