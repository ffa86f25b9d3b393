//! Bounded local repair of failed nodes.
//!
//! Deterministic rules are tried first; a pluggable hook is consulted only
//! when no rule applies or the deterministic budget is spent. Patches edit
//! the failed node's arguments only, and re-execution is limited to the
//! failed node plus producers whose artifacts went missing.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compiler::{RetryBudget, WorkflowGraph, WorkflowNode};
use crate::digest::derived_rng;
use crate::executor::{BindMode, CaseSession, DispatchOutcome, NodeFailure};
use crate::registry::{validate_call, ErrorCode, SemanticType};
use crate::store::{BadRefKind, CaseState, NodeStatus, RepairUsage};
use crate::token::{SymbolicToken, TokenKind};
use crate::trace::EventBody;
use crate::value::{ArgValue, Literal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepairStage {
    Deterministic,
    Pluggable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "edit")]
pub enum ArgEdit {
    ReplaceToken { arg: String, old: ArgValue, new: SymbolicToken },
    RemoveOverride { arg: String },
    AdjustArg { arg: String, old: ArgValue, new: Literal },
    RetryAsIs,
}

impl ArgEdit {
    pub fn arg(&self) -> Option<&str> {
        match self {
            ArgEdit::ReplaceToken { arg, .. } | ArgEdit::RemoveOverride { arg } | ArgEdit::AdjustArg { arg, .. } => Some(arg),
            ArgEdit::RetryAsIs => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairPatch {
    pub target_node: String,
    pub edits: Vec<ArgEdit>,
    pub stage: RepairStage,
}

impl RepairPatch {
    fn single(target: &str, edit: ArgEdit, stage: RepairStage) -> Self {
        Self {
            target_node: target.to_string(),
            edits: vec![edit],
            stage,
        }
    }

    /// Arguments after the patch's edits.
    pub fn apply(&self, args: &BTreeMap<String, ArgValue>) -> BTreeMap<String, ArgValue> {
        let mut out = args.clone();
        for edit in &self.edits {
            match edit {
                ArgEdit::ReplaceToken { arg, new, .. } => {
                    out.insert(arg.clone(), ArgValue::Token(new.clone()));
                }
                ArgEdit::RemoveOverride { arg } => {
                    out.remove(arg);
                }
                ArgEdit::AdjustArg { arg, new, .. } => {
                    out.insert(arg.clone(), ArgValue::Literal(new.clone()));
                }
                ArgEdit::RetryAsIs => {}
            }
        }
        out
    }
}

/// Read-only view handed to a repair hook.
pub struct RepairView<'a> {
    pub node: &'a WorkflowNode,
    pub failure: &'a NodeFailure,
    /// Succeeded producers in execution order, oldest first.
    pub producers: Vec<(SymbolicToken, SemanticType)>,
    pub seed: u64,
    /// Hook consultations so far for this node.
    pub attempt: u32,
}

/// Pluggable second-stage repairer.
pub trait RepairHook: Send + Sync {
    fn propose(&self, view: &RepairView<'_>) -> Option<RepairPatch>;
}

/// Scripted stand-in for a constrained model-based repairer: with
/// probability `success_prob` it proposes a plausible patch, otherwise an
/// inadmissible one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRepairer {
    pub success_prob: f64,
}

impl Default for ScriptedRepairer {
    fn default() -> Self {
        Self { success_prob: 0.5 }
    }
}

impl RepairHook for ScriptedRepairer {
    fn propose(&self, view: &RepairView<'_>) -> Option<RepairPatch> {
        let node = view.node;
        let mut rng = derived_rng(view.seed, &["repair-hook", &node.node_id, &view.attempt.to_string()]);
        let target = node.node_id.as_str();
        if rng.gen::<f64>() >= self.success_prob {
            // An edit to an argument the tool does not declare.
            return Some(RepairPatch::single(
                target,
                ArgEdit::AdjustArg {
                    arg: "hook_guess".into(),
                    old: ArgValue::Literal(Literal::Bool(false)),
                    new: Literal::Bool(true),
                },
                RepairStage::Pluggable,
            ));
        }
        let edit = match view.failure.arg.as_deref().and_then(|a| node.tool.args.get(a).map(|s| (a, s))) {
            Some((arg, spec)) if spec.accepts_reference && spec.semantic_type.is_artifact() => {
                match view.producers.iter().rev().find(|(_, ty)| *ty == spec.semantic_type) {
                    Some((token, _)) => ArgEdit::ReplaceToken {
                        arg: arg.to_string(),
                        old: node.args.get(arg).cloned().unwrap_or(ArgValue::Literal(Literal::text(""))),
                        new: token.clone(),
                    },
                    None => ArgEdit::RetryAsIs,
                }
            }
            Some((arg, spec)) if !spec.required => ArgEdit::RemoveOverride { arg: arg.to_string() },
            _ => ArgEdit::RetryAsIs,
        };
        Some(RepairPatch::single(target, edit, RepairStage::Pluggable))
    }
}

/// Reflector configuration: per-node budget and optional hook.
pub struct Reflector {
    pub budget: RetryBudget,
    pub hook: Option<Box<dyn RepairHook>>,
}

impl Default for Reflector {
    fn default() -> Self {
        Self {
            budget: RetryBudget::default(),
            hook: Some(Box::new(ScriptedRepairer::default())),
        }
    }
}

impl Reflector {
    pub fn deterministic_only(budget: RetryBudget) -> Self {
        Self { budget, hook: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Patch { patch: RepairPatch, affected: BTreeSet<String> },
    /// A hook patch failed admissibility; it still consumes pluggable budget.
    Rejected { reason: String },
    GiveUp { reason: String },
}

/// Succeeded node outputs of type `ty` in execution order, falling back to
/// case inputs when no node produces the type.
fn candidates(graph: &WorkflowGraph, state: &CaseState, ty: SemanticType, exclude: &str) -> Vec<SymbolicToken> {
    let from_nodes = producers_in_order(graph, state)
        .into_iter()
        .filter(|(t, pty)| *pty == ty && t.node_id.as_deref() != Some(exclude))
        .map(|(t, _)| t)
        .collect::<Vec<_>>();
    if !from_nodes.is_empty() {
        return from_nodes;
    }
    state
        .producers_of(ty, true)
        .into_iter()
        .filter(|t| t.kind != TokenKind::Node)
        .collect()
}

fn producers_in_order(graph: &WorkflowGraph, state: &CaseState) -> Vec<(SymbolicToken, SemanticType)> {
    let mut out = Vec::new();
    for id in &graph.execution_order {
        if state.status_of(id) != Some(NodeStatus::Succeeded) {
            continue;
        }
        if let Some(outputs) = state.node_outputs.get(id) {
            for (field, v) in outputs {
                if let Some(a) = v.as_artifact() {
                    out.push((SymbolicToken::node(id.clone(), field.clone()), a.semantic_type));
                }
            }
        }
    }
    out
}

fn unique(mut c: Vec<SymbolicToken>) -> Option<SymbolicToken> {
    (c.len() == 1).then(|| c.remove(0))
}

/// Stage-one rule table. Returns the patch and any extra nodes to re-run.
fn deterministic_rule(
    node: &WorkflowNode,
    failure: &NodeFailure,
    graph: &WorkflowGraph,
    state: &CaseState,
) -> Option<(ArgEdit, BTreeSet<String>)> {
    let id = node.node_id.as_str();
    let arg = failure.arg.as_deref();
    let spec = arg.and_then(|a| node.tool.args.get(a));
    let current = |a: &str| node.args.get(a).cloned().unwrap_or(ArgValue::Literal(Literal::text("")));
    let replace = |a: &str, ty: SemanticType| {
        unique(candidates(graph, state, ty, id)).map(|new| ArgEdit::ReplaceToken {
            arg: a.to_string(),
            old: current(a),
            new,
        })
    };
    let none = BTreeSet::new();
    match failure.code {
        ErrorCode::ToolTransientFailure => Some((ArgEdit::RetryAsIs, none)),
        ErrorCode::BadReference => {
            let bad = failure.bad_ref.as_ref()?;
            if bad.kind == BadRefKind::ArtifactMissing {
                let producer = bad.token.node_id.clone().filter(|_| bad.token.kind == TokenKind::Node)?;
                if !graph.nodes.contains_key(&producer) {
                    return None;
                }
                return Some((ArgEdit::RetryAsIs, BTreeSet::from([producer])));
            }
            let (a, s) = (arg?, spec?);
            replace(a, s.semantic_type).map(|e| (e, none))
        }
        ErrorCode::InvalidOverride => {
            let (a, s) = (arg?, spec?);
            if !s.required {
                Some((ArgEdit::RemoveOverride { arg: a.to_string() }, none))
            } else {
                let alt = s.alternatives.iter().find(|l| s.in_range(l) && Some(&ArgValue::Literal((*l).clone())) != node.args.get(a))?;
                Some((
                    ArgEdit::AdjustArg {
                        arg: a.to_string(),
                        old: current(a),
                        new: alt.clone(),
                    },
                    none,
                ))
            }
        }
        ErrorCode::MissingInput => {
            let (a, s) = (arg?, spec?);
            let literal = matches!(node.args.get(a), Some(ArgValue::Literal(_)));
            if literal && s.accepts_reference && s.semantic_type.is_artifact() {
                replace(a, s.semantic_type).map(|e| (e, none))
            } else {
                None
            }
        }
        ErrorCode::SchemaMismatch => {
            let (a, s) = (arg?, spec?);
            if !s.required && node.args.contains_key(a) {
                Some((ArgEdit::RemoveOverride { arg: a.to_string() }, none))
            } else if s.required && s.accepts_reference && s.semantic_type.is_artifact() {
                replace(a, s.semantic_type).map(|e| (e, none))
            } else {
                None
            }
        }
        _ => None,
    }
}

/// Checks a patch against the repair invariants and the tool schema.
pub fn admissible(patch: &RepairPatch, node: &WorkflowNode, state: &CaseState) -> Result<(), String> {
    if patch.target_node != node.node_id {
        return Err(format!("patch targets {}, not {}", patch.target_node, node.node_id));
    }
    if state.status_of(&node.node_id) == Some(NodeStatus::Succeeded) {
        return Err("patch edits a succeeded node".into());
    }
    if patch.edits.is_empty() {
        return Err("patch has no edits".into());
    }
    for edit in &patch.edits {
        if let Some(a) = edit.arg() {
            if !node.tool.args.contains_key(a) {
                return Err(format!("'{}' has no argument '{a}'", node.tool.name));
            }
        }
        if let ArgEdit::AdjustArg { arg, new, .. } = edit {
            let spec = &node.tool.args[arg];
            let allowed = spec.default.as_ref() == Some(new) || spec.alternatives.contains(new);
            if !allowed {
                return Err(format!("adjusted value {new} for '{arg}' is not drawn from its spec"));
            }
        }
    }
    validate_call(&node.tool, &patch.apply(&node.args))
        .map_err(|issues| issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
}

/// Nodes to re-execute: the target, producers flagged by the patch, and any
/// succeeded dependents of those producers whose inputs would change.
pub fn affected_subworkflow(graph: &WorkflowGraph, failed: &str, rerun_producers: &BTreeSet<String>) -> BTreeSet<String> {
    let mut out = BTreeSet::from([failed.to_string()]);
    out.extend(rerun_producers.iter().cloned());
    // Producers re-run deterministically with unchanged inputs, so their
    // dependents' inputs keep the same digests; nothing further is stale.
    out.retain(|id| graph.nodes.contains_key(id));
    out
}

/// Proposes a repair for a failed node within its remaining budget.
pub fn propose_repair(
    node: &WorkflowNode,
    failure: &NodeFailure,
    graph: &WorkflowGraph,
    state: &CaseState,
    reflector: &Reflector,
    seed: u64,
) -> Proposal {
    let usage = state.repair_usage.get(&node.node_id).copied().unwrap_or_default();
    let budget = reflector.budget;
    if usage.deterministic < budget.deterministic_attempts {
        if let Some((edit, rerun)) = deterministic_rule(node, failure, graph, state) {
            let patch = RepairPatch::single(&node.node_id, edit, RepairStage::Deterministic);
            if admissible(&patch, node, state).is_ok() {
                let affected = affected_subworkflow(graph, &node.node_id, &rerun);
                return Proposal::Patch { patch, affected };
            }
        }
    }
    if usage.pluggable < budget.pluggable_attempts {
        if let Some(hook) = &reflector.hook {
            let view = RepairView {
                node,
                failure,
                producers: producers_in_order(graph, state),
                seed,
                attempt: usage.pluggable,
            };
            return match hook.propose(&view) {
                None => Proposal::Rejected {
                    reason: "hook proposed nothing".into(),
                },
                Some(mut patch) => {
                    patch.stage = RepairStage::Pluggable;
                    match admissible(&patch, node, state) {
                        Ok(()) => Proposal::Patch {
                            affected: affected_subworkflow(graph, &node.node_id, &BTreeSet::new()),
                            patch,
                        },
                        Err(reason) => Proposal::Rejected { reason },
                    }
                }
            };
        }
    }
    Proposal::GiveUp {
        reason: format!(
            "no admissible repair for {} (used {}/{} deterministic, {}/{} pluggable)",
            failure.code, usage.deterministic, budget.deterministic_attempts, usage.pluggable, budget.pluggable_attempts
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recovery {
    Recovered,
    Abandoned,
    /// The global run budget ran out mid-repair.
    Halted,
}

fn charge(state: &mut CaseState, node: &str, stage: RepairStage) {
    let usage: &mut RepairUsage = state.repair_usage.entry(node.to_string()).or_default();
    match stage {
        RepairStage::Deterministic => usage.deterministic += 1,
        RepairStage::Pluggable => usage.pluggable += 1,
    }
}

/// Repair loop for one failed node: propose, apply, re-run affected nodes,
/// until the node succeeds or its budget is exhausted.
pub fn recover(
    graph: &mut WorkflowGraph,
    session: &mut CaseSession<'_>,
    reflector: &Reflector,
    failed: &str,
    failure: NodeFailure,
    mode: BindMode,
) -> Recovery {
    let mut target = failed.to_string();
    let mut failure = failure;
    'repair: loop {
        if !session.healthy() {
            return Recovery::Halted;
        }
        let node = graph.nodes[&target].clone();
        match propose_repair(&node, &failure, graph, &session.state, reflector, session.seed) {
            Proposal::GiveUp { reason } => {
                session.state.set_status(&target, NodeStatus::Abandoned);
                session.emit(Some(&target), EventBody::NodeAbandoned { reason });
                return Recovery::Abandoned;
            }
            Proposal::Rejected { reason } => {
                charge(&mut session.state, &target, RepairStage::Pluggable);
                session.emit(
                    Some(&target),
                    EventBody::RepairRejected {
                        stage: RepairStage::Pluggable,
                        reason,
                    },
                );
            }
            Proposal::Patch { patch, affected } => {
                let order: Vec<String> = graph.execution_order.iter().filter(|id| affected.contains(*id)).cloned().collect();
                session.emit(
                    Some(&target),
                    EventBody::RepairProposed {
                        patch: patch.clone(),
                        affected: order.clone(),
                    },
                );
                charge(&mut session.state, &target, patch.stage);
                graph.set_args(&target, patch.apply(&node.args));
                let mut preserved = session.succeeded_digests();
                preserved.retain(|id, _| !affected.contains(id));
                session.mark_repaired(&order);
                session.emit(
                    Some(&target),
                    EventBody::RepairApplied {
                        stage: patch.stage,
                        patch,
                        affected: order.clone(),
                        preserved: preserved.clone(),
                    },
                );
                for id in &order {
                    let n = graph.nodes[id].clone();
                    match session.dispatch(&n, mode) {
                        DispatchOutcome::Succeeded => {}
                        DispatchOutcome::BudgetExhausted => return Recovery::Halted,
                        DispatchOutcome::Failed(f) => {
                            target = id.clone();
                            failure = f;
                            continue 'repair;
                        }
                    }
                }
                let after = session.succeeded_digests();
                debug_assert!(preserved.iter().all(|(id, d)| after.get(id) == Some(d)), "repair disturbed upstream outputs");
                return Recovery::Recovered;
            }
        }
    }
}
