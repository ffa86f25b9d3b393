//! The four controller arms. All of them consume the same planner draws,
//! tool faults and contracts; they differ only in control structure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{compile, RetryBudget, WorkflowGraph, WorkflowNode};
use crate::contract::TaskContract;
use crate::executor::{run_graph, BindMode, CaseOutcome, CaseSession, DispatchOutcome, RunConstraints};
use crate::reflector::{recover, Recovery, Reflector, ScriptedRepairer};
use crate::registry::Registry;
use crate::sim_tools::{library_registry, step_id, FaultConfig, Wire};
use crate::sketch::{
    fabricated_path, ghost_token, mistyped_literal, plan_for_case, replan, sketch_from_plan, PlannedCase, PlannerPolicy,
    StepPlan,
};
use crate::store::{ArtifactStore, CaseState, NodeStatus};
use crate::token::{scan_arguments, Segment, SymbolicToken, TokenKind};
use crate::trace::EventBody;
use crate::value::{ArgValue, BoundValue, Literal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ControllerKind {
    React,
    ReactBind,
    ReactBindRef,
    Bcer,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [
        ControllerKind::React,
        ControllerKind::ReactBind,
        ControllerKind::ReactBindRef,
        ControllerKind::Bcer,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::React => "ReAct",
            ControllerKind::ReactBind => "ReAct+Bind",
            ControllerKind::ReactBindRef => "ReAct+Bind+Ref",
            ControllerKind::Bcer => "BCER",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            ControllerKind::React => "react",
            ControllerKind::ReactBind => "react-bind",
            ControllerKind::ReactBindRef => "react-bind-ref",
            ControllerKind::Bcer => "bcer",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown controller '{0}' (expected react, react-bind, react-bind-ref or bcer)")]
pub struct UnknownController(pub String);

impl FromStr for ControllerKind {
    type Err = UnknownController;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace(['+', '_'], "-");
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.slug() == norm || k.label().eq_ignore_ascii_case(s) || format!("{k:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownController(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepairConfig {
    pub deterministic_attempts: u32,
    pub pluggable_attempts: u32,
    pub hook_success_prob: f64,
    /// Re-planning rounds after a failed compile.
    pub sketch_retry_budget: u32,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            deterministic_attempts: 2,
            pluggable_attempts: 1,
            hook_success_prob: 0.5,
            sketch_retry_budget: 2,
        }
    }
}

/// Everything besides the contract and seed that shapes a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub planner: PlannerPolicy,
    pub faults: FaultConfig,
    pub constraints: RunConstraints,
    pub repair: RepairConfig,
}

#[derive(Debug, Error)]
#[error("run config: {0}")]
pub struct ConfigError(pub String);

pub const TURN_LIMIT_FACTOR: usize = 3;

impl RunConfig {
    pub fn zero_fault() -> Self {
        Self::default()
    }

    pub fn default_faults() -> Self {
        Self {
            planner: PlannerPolicy::default_faults(),
            faults: FaultConfig {
                transient_failure_prob: 0.05,
                ..FaultConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.planner.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.faults.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.constraints.max_total_node_executions == 0 {
            return Err(ConfigError("max_total_node_executions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.repair.hook_success_prob) {
            return Err(ConfigError("hook_success_prob must be a probability".into()));
        }
        Ok(())
    }

    pub fn budget(&self) -> RetryBudget {
        RetryBudget {
            deterministic_attempts: self.repair.deterministic_attempts,
            pluggable_attempts: self.repair.pluggable_attempts,
        }
    }

    pub fn reflector(&self) -> Reflector {
        Reflector {
            budget: self.budget(),
            hook: Some(Box::new(ScriptedRepairer {
                success_prob: self.repair.hook_success_prob,
            })),
        }
    }
}

/// Case id used for a (task, seed) pair in every arm.
pub fn case_id_for(contract: &TaskContract, seed: u64) -> String {
    format!("{}-s{seed:05}", contract.task.slug())
}

/// Runs one case under `kind` in `workdir`.
pub fn run_controller(
    kind: ControllerKind,
    contract: &TaskContract,
    config: &RunConfig,
    workdir: &Path,
    seed: u64,
) -> io::Result<CaseOutcome> {
    let workdir = std::path::absolute(workdir)?;
    let case_id = case_id_for(contract, seed);
    match kind {
        ControllerKind::Bcer => run_bcer(contract, config, &workdir, &case_id, seed),
        _ => run_reactive(kind, contract, config, &workdir, &case_id, seed),
    }
}

fn interpolate_runtime(text: &str, state: &CaseState) -> String {
    scan_arguments(text)
        .segments
        .iter()
        .map(|seg| match seg {
            Segment::Token(t) if t.kind == TokenKind::Runtime => match state.runtime_values.get(&t.field_key()) {
                Some(Literal::Text(s)) => s.clone(),
                Some(lit) => lit.to_string(),
                None => t.to_string(),
            },
            Segment::Token(t) => t.to_string(),
            Segment::Literal(s) => s.clone(),
        })
        .collect()
}

fn input_value(state: &CaseState, token: &SymbolicToken) -> Option<BoundValue> {
    match token.kind {
        TokenKind::Seq => {
            let (seq, rest) = token.field_path.split_first()?;
            state.sequences.get(seq)?.get(&rest.join(".")).cloned()
        }
        _ => state.inputs.get(&token.field_key()).cloned(),
    }
}

/// Path text a reactive policy would type for an artifact it has seen, or
/// its best guess when it has not seen one.
fn observed_path(state: &CaseState, node: &str, field: &str) -> String {
    match state.node_outputs.get(node).and_then(|o| o.get(field)).and_then(BoundValue::as_artifact) {
        Some(a) => state.store.display_path(a),
        None => state
            .case_scope
            .join(ArtifactStore::default_location(&format!("{node}.{field}")))
            .to_string_lossy()
            .into_owned(),
    }
}

/// Unbound turn: every argument is literal text.
fn react_args(plan: &StepPlan, state: &CaseState) -> BTreeMap<String, ArgValue> {
    let mut args = BTreeMap::new();
    for (name, wire) in &plan.step.args {
        let lit = match wire {
            Wire::Input(t) => match input_value(state, t) {
                Some(BoundValue::Artifact(a)) => Literal::Text(state.store.display_path(&a)),
                Some(BoundValue::Literal(l)) => l,
                None => Literal::Text(t.to_string()),
            },
            Wire::Step(k, field) => Literal::Text(observed_path(state, &step_id(*k), field)),
            Wire::Lit(Literal::Text(s)) => Literal::Text(interpolate_runtime(s, state)),
            Wire::Lit(l) => l.clone(),
        };
        args.insert(name.clone(), ArgValue::Literal(lit));
    }
    if let Some(arg) = &plan.wrong_arg {
        let ty = plan_arg_type(plan, arg);
        args.insert(arg.clone(), ArgValue::Literal(mistyped_literal(ty)));
    }
    if let Some(arg) = &plan.dangling {
        let ghost = ghost_token(plan, arg);
        let path = observed_path(state, ghost.node_id.as_deref().unwrap_or_default(), &ghost.field_key());
        args.insert(arg.clone(), ArgValue::Literal(Literal::Text(path)));
    }
    if let Some((arg, form)) = &plan.hallucinated {
        args.insert(arg.clone(), ArgValue::Literal(Literal::Text(fabricated_path(*form, plan, arg))));
    }
    args
}

fn plan_arg_type(plan: &StepPlan, arg: &str) -> crate::registry::SemanticType {
    library_registry()
        .lookup(&plan.step.tool)
        .and_then(|s| s.args.get(arg).map(|a| a.semantic_type))
        .unwrap_or(crate::registry::SemanticType::Scalar)
}

/// Bound turn: artifact references are emitted as tokens. A fabricated path
/// never reaches the tool because the binder works from the intended token.
/// Tokens naming nodes that have not succeeded are corrected to the unique
/// succeeded producer of the right type, when there is one.
fn bind_args(plan: &StepPlan, state: &CaseState, registry: &Registry) -> BTreeMap<String, ArgValue> {
    let mut args = BTreeMap::new();
    for (name, wire) in &plan.step.args {
        let v = match wire {
            Wire::Input(t) => ArgValue::Token(t.clone()),
            Wire::Step(k, field) => ArgValue::Token(SymbolicToken::node(step_id(*k), field.clone())),
            Wire::Lit(l) => ArgValue::Literal(l.clone()),
        };
        args.insert(name.clone(), v);
    }
    if let Some(arg) = &plan.wrong_arg {
        args.insert(arg.clone(), ArgValue::Literal(mistyped_literal(plan_arg_type(plan, arg))));
    }
    if let Some(arg) = &plan.dangling {
        args.insert(arg.clone(), ArgValue::Token(ghost_token(plan, arg)));
    }
    let Some(spec) = registry.lookup(&plan.step.tool) else { return args };
    for (name, value) in args.iter_mut() {
        let ArgValue::Token(t) = value else { continue };
        if t.kind != TokenKind::Node {
            continue;
        }
        let producer = t.node_id.as_deref().unwrap_or_default();
        if state.status_of(producer) == Some(NodeStatus::Succeeded) {
            continue;
        }
        let Some(ty) = spec.args.get(name).map(|a| a.semantic_type) else { continue };
        let candidates: Vec<SymbolicToken> = state.producers_of(ty, false);
        if let [only] = candidates.as_slice() {
            *value = ArgValue::Token(only.clone());
        }
    }
    args
}

fn run_reactive(
    kind: ControllerKind,
    contract: &TaskContract,
    config: &RunConfig,
    workdir: &Path,
    case_id: &str,
    seed: u64,
) -> io::Result<CaseOutcome> {
    let planned = plan_for_case(contract, &config.planner, seed);
    let turn_limit = (TURN_LIMIT_FACTOR * planned.steps.len()) as u32;
    let constraints = RunConstraints {
        max_total_node_executions: config.constraints.max_total_node_executions.min(turn_limit),
        ..config.constraints
    };
    let mut session = CaseSession::start(workdir, case_id, contract, kind.label(), seed, &config.faults, constraints)?;
    let registry = library_registry();
    let reflector = (kind == ControllerKind::ReactBindRef).then(|| config.reflector());
    let mode = if kind == ControllerKind::React { BindMode::Literal } else { BindMode::Bound };
    let mut graph = WorkflowGraph::default();

    for plan in planned.steps.iter().filter(|p| !p.omitted) {
        if !session.budget_left() || !session.healthy() {
            break;
        }
        let Some(spec) = registry.lookup(&plan.step.tool) else { continue };
        let args = match kind {
            ControllerKind::React => react_args(plan, &session.state),
            _ => bind_args(plan, &session.state, &registry),
        };
        let node = WorkflowNode {
            node_id: plan.id(),
            tool: spec.clone(),
            args,
            required: true,
            retry_budget: config.budget(),
            position: plan.position,
        };
        let id = node.node_id.clone();
        graph.push_node(node);
        session.state.set_status(&id, NodeStatus::Pending);
        let node = graph.nodes[&id].clone();
        match session.dispatch(&node, mode) {
            DispatchOutcome::Succeeded => {}
            DispatchOutcome::BudgetExhausted => break,
            DispatchOutcome::Failed(failure) => {
                if let Some(reflector) = &reflector {
                    match recover(&mut graph, &mut session, reflector, &id, failure, mode) {
                        Recovery::Recovered => {}
                        Recovery::Abandoned | Recovery::Halted => break,
                    }
                }
            }
        }
    }
    Ok(session.finish(contract))
}

/// Step ids named by compile diagnostics.
fn flagged_steps(errors: &[crate::compiler::CompileError]) -> BTreeSet<String> {
    errors.iter().filter_map(|e| e.step.clone()).collect()
}

fn run_bcer(contract: &TaskContract, config: &RunConfig, workdir: &Path, case_id: &str, seed: u64) -> io::Result<CaseOutcome> {
    let planned: PlannedCase = plan_for_case(contract, &config.planner, seed);
    let registry = library_registry();
    let mut session = CaseSession::start(
        workdir,
        case_id,
        contract,
        ControllerKind::Bcer.label(),
        seed,
        &config.faults,
        config.constraints,
    )?;
    let mut sketch = sketch_from_plan(&planned, &registry);
    let mut attempt = 0;
    loop {
        session.emit(
            None,
            EventBody::SketchProduced {
                attempt,
                sketch: sketch.clone(),
            },
        );
        match compile(&sketch, &registry, contract) {
            Ok(mut graph) => {
                for node in graph.nodes.values_mut() {
                    node.retry_budget = config.budget();
                }
                session.emit(
                    None,
                    EventBody::Compiled {
                        execution_order: graph.execution_order.clone(),
                        edges: graph.edges.iter().cloned().collect(),
                        required: graph.nodes.values().filter(|n| n.required).map(|n| n.node_id.clone()).collect(),
                    },
                );
                let reflector = config.reflector();
                run_graph(&mut graph, &mut session, Some(&reflector));
                break;
            }
            Err(errors) => {
                let flagged = flagged_steps(&errors);
                session.emit(None, EventBody::CompileFailed { attempt, errors });
                if attempt >= config.repair.sketch_retry_budget {
                    break;
                }
                attempt += 1;
                sketch = replan(&sketch, &planned, &flagged, &config.planner, seed, attempt, &registry);
            }
        }
    }
    Ok(session.finish(contract))
}
