//! Dispatch loop for compiled graphs and the per-case session shared by
//! every controller.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::compiler::{WorkflowGraph, WorkflowNode};
use crate::contract::{materialize_inputs, score_case, CaseScore, MilestoneResult, TaskContract};
use crate::reflector::{recover, Reflector, Recovery};
use crate::registry::{validate_call, ErrorCode};
use crate::sim_tools::{invoke, FaultConfig, InvokeContext, TaskId};
use crate::store::{bind_all, case_scope, BindError, CaseState, NodeStatus, TRACE_FILE};
use crate::trace::{EventBody, Trace, TraceEvent};
use crate::value::{ArgValue, BoundValue, Literal};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConstraints {
    pub max_total_node_executions: u32,
    #[serde(with = "secs")]
    pub wall_clock_limit: Duration,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        if v.is_nan() || v <= 0.0 {
            return Err(serde::de::Error::custom("wall_clock_limit must be positive"));
        }
        Ok(Duration::from_secs_f64(v))
    }
}

impl Default for RunConstraints {
    fn default() -> Self {
        Self {
            max_total_node_executions: 100,
            wall_clock_limit: Duration::from_secs(60),
        }
    }
}

/// How a node's arguments reach the tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Tokens are resolved through the case state.
    Bound,
    /// Everything is passed through as literal text.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFailure {
    pub code: ErrorCode,
    pub arg: Option<String>,
    pub message: String,
    pub bad_ref: Option<BindError>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DispatchOutcome {
    Succeeded,
    Failed(NodeFailure),
    /// Global dispatch budget or wall clock exhausted; nothing was dispatched.
    BudgetExhausted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    pub task: TaskId,
    pub controller: String,
    pub seed: u64,
    pub final_statuses: BTreeMap<String, NodeStatus>,
    pub score: CaseScore,
    pub milestones: Vec<MilestoneResult>,
    pub dispatches: u32,
    pub case_scope: PathBuf,
    pub engine_error: Option<String>,
    /// Out-of-scope paths the store refused during the case.
    #[serde(default)]
    pub escape_attempts: Vec<PathBuf>,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

impl CaseOutcome {
    pub fn trace_path(&self) -> PathBuf {
        self.case_scope.join(TRACE_FILE)
    }
}

/// Mutable state of one running case: store, trace and budgets.
pub struct CaseSession<'a> {
    pub task: TaskId,
    pub controller: String,
    pub seed: u64,
    pub state: CaseState,
    pub trace: Trace,
    pub faults: &'a FaultConfig,
    pub constraints: RunConstraints,
    pub dispatches: u32,
    pub engine_error: Option<String>,
    repairs: BTreeMap<String, u32>,
    started: Instant,
}

impl<'a> CaseSession<'a> {
    /// Creates the case scope, materializes inputs and opens the trace.
    pub fn start(
        workdir: &Path,
        case_id: &str,
        contract: &TaskContract,
        controller: &str,
        seed: u64,
        faults: &'a FaultConfig,
        constraints: RunConstraints,
    ) -> io::Result<Self> {
        let scope = case_scope(workdir, case_id);
        if scope.exists() {
            std::fs::remove_dir_all(&scope)?;
        }
        let mut state = CaseState::create(workdir, case_id, seed)?;
        materialize_inputs(contract, &mut state, seed).map_err(|e| io::Error::other(e.to_string()))?;
        let trace = Trace::create(&scope.join(TRACE_FILE), case_id)?;
        let mut session = Self {
            task: contract.task,
            controller: controller.to_string(),
            seed,
            state,
            trace,
            faults,
            constraints,
            dispatches: 0,
            engine_error: None,
            repairs: BTreeMap::new(),
            started: Instant::now(),
        };
        session.emit(
            None,
            EventBody::CaseStarted {
                controller: controller.to_string(),
                seed,
                contract: contract.clone(),
            },
        );
        Ok(session)
    }

    /// Appends an event; a storage failure marks the case as an engine error.
    pub fn emit(&mut self, node_id: Option<&str>, body: EventBody) {
        if let Err(e) = self.trace.append(node_id, body) {
            self.engine_error.get_or_insert(format!("trace append failed: {e}"));
        }
    }

    pub fn healthy(&self) -> bool {
        self.engine_error.is_none()
    }

    pub fn budget_left(&self) -> bool {
        self.dispatches < self.constraints.max_total_node_executions && self.started.elapsed() < self.constraints.wall_clock_limit
    }

    /// Marks `ids` as under repair, bumping their repair counters.
    pub fn mark_repaired(&mut self, ids: &[String]) {
        for id in ids {
            let n = self.repairs.entry(id.clone()).or_default();
            *n += 1;
            let n = *n;
            self.state.set_status(id, NodeStatus::Repaired(n));
        }
    }

    /// Output digests of every succeeded node.
    pub fn succeeded_digests(&self) -> BTreeMap<String, Vec<String>> {
        self.state
            .node_outputs
            .iter()
            .filter(|(id, _)| self.state.status_of(id) == Some(NodeStatus::Succeeded))
            .map(|(id, out)| (id.clone(), out.values().map(output_fingerprint).collect()))
            .collect()
    }

    fn fail(&mut self, node: &WorkflowNode, failure: NodeFailure) -> DispatchOutcome {
        self.state.set_status(&node.node_id, NodeStatus::Failed(failure.code));
        match &failure.bad_ref {
            Some(bad) => self.emit(
                Some(&node.node_id),
                EventBody::BindFailed {
                    arg: failure.arg.clone().unwrap_or_default(),
                    token: bad.token.to_string(),
                    reason: bad.kind,
                    code: failure.code,
                },
            ),
            None => self.emit(
                Some(&node.node_id),
                EventBody::NodeFailed {
                    tool: node.tool.name.clone(),
                    code: failure.code,
                    arg: failure.arg.clone(),
                    message: failure.message.clone(),
                },
            ),
        }
        DispatchOutcome::Failed(failure)
    }

    /// Dispatches one node: validate, bind, invoke, record.
    pub fn dispatch(&mut self, node: &WorkflowNode, mode: BindMode) -> DispatchOutcome {
        if !self.budget_left() || !self.healthy() {
            return DispatchOutcome::BudgetExhausted;
        }
        let id = node.node_id.as_str();
        match self.state.status_of(id) {
            None | Some(NodeStatus::Pending) => self.state.set_status(id, NodeStatus::Ready),
            _ => {}
        }
        let attempt = self.state.dispatch_counts.get(id).copied().unwrap_or_default();
        self.state.dispatch_counts.insert(id.to_string(), attempt + 1);
        self.dispatches += 1;
        self.emit(
            Some(id),
            EventBody::NodeDispatched {
                tool: node.tool.name.clone(),
                attempt,
                args: node.args.clone(),
            },
        );
        self.state.set_status(id, NodeStatus::Running);

        if let Err(issues) = validate_call(&node.tool, &node.args) {
            let issue = &issues[0];
            return self.fail(
                node,
                NodeFailure {
                    code: issue.code,
                    arg: Some(issue.arg.clone()),
                    message: issue.reason.clone(),
                    bad_ref: None,
                },
            );
        }
        let bound = match mode {
            BindMode::Bound => match bind_all(&node.tool, &node.args, &mut self.state) {
                Ok(b) => b,
                Err(f) => {
                    let message = format!("{:?} for {}", f.error.kind, f.error.token);
                    return self.fail(
                        node,
                        NodeFailure {
                            code: ErrorCode::BadReference,
                            arg: Some(f.arg),
                            message,
                            bad_ref: Some(f.error),
                        },
                    );
                }
            },
            BindMode::Literal => node
                .args
                .iter()
                .map(|(k, v)| {
                    let lit = match v {
                        ArgValue::Literal(l) => l.clone(),
                        ArgValue::Token(t) => Literal::Text(t.to_string()),
                    };
                    (k.clone(), BoundValue::Literal(lit))
                })
                .collect(),
        };
        let ctx = InvokeContext {
            task: self.task,
            node_id: id,
            position: node.position,
            attempt,
            seed: self.seed,
        };
        match invoke(&node.tool, &bound, &mut self.state.store, self.faults, &ctx) {
            Ok(result) => {
                self.state.runtime_values.extend(result.runtime_writes);
                self.state.set_status(id, NodeStatus::Succeeded);
                self.state.record_outputs(id, result.outputs.clone());
                self.emit(
                    Some(id),
                    EventBody::NodeSucceeded {
                        tool: node.tool.name.clone(),
                        inputs: result.canonical_inputs,
                        outputs: result.outputs,
                    },
                );
                DispatchOutcome::Succeeded
            }
            Err(f) => self.fail(
                node,
                NodeFailure {
                    code: f.code,
                    arg: f.arg,
                    message: f.message,
                    bad_ref: None,
                },
            ),
        }
    }

    /// Scores the case, writes milestone verdicts and CaseFinished.
    pub fn finish(mut self, contract: &TaskContract) -> CaseOutcome {
        let (score, milestones) = if self.healthy() {
            let (score, results) = score_case(contract, &mut self.state, self.trace.events());
            for r in &results {
                self.emit(None, EventBody::MilestoneValidated { result: r.clone() });
            }
            (score, results)
        } else {
            (CaseScore::failed(contract.milestones.len()), Vec::new())
        };
        if let Some(message) = self.engine_error.clone() {
            self.emit(None, EventBody::EngineError { message });
        }
        let score = if self.healthy() { score } else { CaseScore::failed(contract.milestones.len()) };
        self.emit(
            None,
            EventBody::CaseFinished {
                statuses: self.state.status.clone(),
                score: score.clone(),
            },
        );
        if let Err(e) = self.state.save_record() {
            self.engine_error.get_or_insert(format!("state record: {e}"));
        }
        CaseOutcome {
            case_id: self.state.case_id.clone(),
            task: self.task,
            controller: self.controller,
            seed: self.seed,
            final_statuses: self.state.status.clone(),
            score,
            milestones,
            dispatches: self.dispatches,
            case_scope: self.state.case_scope.clone(),
            engine_error: self.engine_error,
            escape_attempts: self.state.store.escape_attempts.clone(),
            trace: self.trace.into_events(),
        }
    }
}

/// Identity of one output value: artifact id plus digest, or the literal.
pub fn output_fingerprint(v: &BoundValue) -> String {
    match v {
        BoundValue::Artifact(a) => format!("{}={}", a.artifact_id, a.content_digest),
        BoundValue::Literal(l) => l.canonical(),
    }
}

/// Pending nodes whose predecessors have all succeeded.
pub fn ready_nodes(graph: &WorkflowGraph, state: &CaseState) -> BTreeSet<String> {
    graph
        .nodes
        .keys()
        .filter(|id| is_ready(graph, state, id))
        .cloned()
        .collect()
}

fn is_ready(graph: &WorkflowGraph, state: &CaseState, id: &str) -> bool {
    state.status_of(id) == Some(NodeStatus::Pending)
        && graph.predecessors(id).iter().all(|p| state.status_of(p) == Some(NodeStatus::Succeeded))
}

/// Runs a compiled graph to completion inside `session`. Nodes execute one
/// at a time in execution order; failures of required nodes go to the
/// reflector when one is supplied.
pub fn run_graph(graph: &mut WorkflowGraph, session: &mut CaseSession<'_>, reflector: Option<&Reflector>) {
    for id in &graph.execution_order {
        session.state.status.entry(id.clone()).or_insert(NodeStatus::Pending);
    }
    loop {
        if !session.healthy() {
            break;
        }
        let next = graph.execution_order.iter().find(|id| is_ready(graph, &session.state, id)).cloned();
        let Some(id) = next else { break };
        let node = graph.nodes[&id].clone();
        match session.dispatch(&node, BindMode::Bound) {
            DispatchOutcome::Succeeded => {}
            DispatchOutcome::BudgetExhausted => break,
            DispatchOutcome::Failed(failure) => {
                let Some(reflector) = reflector.filter(|_| node.required) else { continue };
                match recover(graph, session, reflector, &id, failure, BindMode::Bound) {
                    Recovery::Recovered => {}
                    Recovery::Abandoned | Recovery::Halted => break,
                }
            }
        }
    }
}

/// Standalone entry point: runs `graph` against a fresh case.
#[allow(clippy::too_many_arguments)]
pub fn run_case(
    workdir: &Path,
    case_id: &str,
    contract: &TaskContract,
    mut graph: WorkflowGraph,
    reflector: Option<&Reflector>,
    constraints: RunConstraints,
    faults: &FaultConfig,
    seed: u64,
) -> io::Result<CaseOutcome> {
    let mut session = CaseSession::start(workdir, case_id, contract, "Graph", seed, faults, constraints)?;
    session.emit(
        None,
        EventBody::Compiled {
            execution_order: graph.execution_order.clone(),
            edges: graph.edges.iter().cloned().collect(),
            required: graph.nodes.values().filter(|n| n.required).map(|n| n.node_id.clone()).collect(),
        },
    );
    run_graph(&mut graph, &mut session, reflector);
    Ok(session.finish(contract))
}
