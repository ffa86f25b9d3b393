//! Sketch compilation: validation, default filling, link inference and
//! topological ordering.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::contract::TaskContract;
use crate::registry::{ArgSpec, Registry, ToolSpec};
use crate::sketch::{validate_sketch, PlanSketch, SketchArg, SketchIssue, SketchStep};
use crate::token::{scan_arguments, SymbolicToken, TokenKind};
use crate::value::{ArgValue, Literal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryBudget {
    pub deterministic_attempts: u32,
    pub pluggable_attempts: u32,
}

impl Default for RetryBudget {
    fn default() -> Self {
        Self {
            deterministic_attempts: 2,
            pluggable_attempts: 1,
        }
    }
}

impl RetryBudget {
    pub fn none() -> Self {
        Self {
            deterministic_attempts: 0,
            pluggable_attempts: 0,
        }
    }

    pub fn total(&self) -> u32 {
        self.deterministic_attempts + self.pluggable_attempts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowNode {
    pub node_id: String,
    pub tool: ToolSpec,
    pub args: BTreeMap<String, ArgValue>,
    /// Whether the node feeds a contract milestone.
    pub required: bool,
    pub retry_budget: RetryBudget,
    /// 1-based reference-chain position, used to key injected faults.
    pub position: usize,
}

impl WorkflowNode {
    /// Node tokens this node consumes, with the argument they appear in.
    pub fn node_refs(&self) -> Vec<(String, SymbolicToken)> {
        let mut out = Vec::new();
        for (name, value) in &self.args {
            match value {
                ArgValue::Token(t) if t.kind == TokenKind::Node => out.push((name.clone(), t.clone())),
                ArgValue::Literal(Literal::Text(s)) if s.contains('@') => {
                    for t in scan_arguments(s).tokens() {
                        if t.kind == TokenKind::Node {
                            out.push((name.clone(), t.clone()));
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub producer: String,
    pub consumer: String,
    pub arg: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WorkflowGraph {
    pub nodes: BTreeMap<String, WorkflowNode>,
    pub edges: BTreeSet<Edge>,
    pub execution_order: Vec<String>,
}

impl WorkflowGraph {
    pub fn node(&self, id: &str) -> Option<&WorkflowNode> {
        self.nodes.get(id)
    }

    pub fn predecessors(&self, id: &str) -> BTreeSet<&str> {
        self.edges.iter().filter(|e| e.consumer == id).map(|e| e.producer.as_str()).collect()
    }

    pub fn successors(&self, id: &str) -> BTreeSet<&str> {
        self.edges.iter().filter(|e| e.producer == id).map(|e| e.consumer.as_str()).collect()
    }

    /// All transitive dependents of `id`.
    pub fn descendants(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(n) = stack.pop() {
            for s in self.successors(&n) {
                if out.insert(s.to_string()) {
                    stack.push(s.to_string());
                }
            }
        }
        out
    }

    /// Appends a node (used by turn-by-turn controllers). Edges are derived
    /// from the node's tokens that name existing nodes.
    pub fn push_node(&mut self, node: WorkflowNode) {
        let id = node.node_id.clone();
        self.nodes.insert(id.clone(), node);
        self.execution_order.push(id.clone());
        self.rewire(&id);
    }

    /// Replaces a node's arguments and recomputes its incoming edges.
    pub fn set_args(&mut self, id: &str, args: BTreeMap<String, ArgValue>) {
        if let Some(node) = self.nodes.get_mut(id) {
            node.args = args;
        }
        self.rewire(id);
    }

    fn rewire(&mut self, id: &str) {
        self.edges.retain(|e| e.consumer != id);
        let Some(node) = self.nodes.get(id) else { return };
        let new_edges: Vec<Edge> = node
            .node_refs()
            .into_iter()
            .filter_map(|(arg, t)| {
                let producer = t.node_id?;
                self.nodes.contains_key(&producer).then(|| Edge {
                    producer,
                    consumer: id.to_string(),
                    arg,
                })
            })
            .collect();
        self.edges.extend(new_edges);
    }

    /// One line per edge: `producer -> consumer [arg]`.
    pub fn render_edge_list(&self) -> String {
        let mut out = String::new();
        for id in &self.execution_order {
            let node = &self.nodes[id];
            let marker = if node.required { "*" } else { "" };
            out.push_str(&format!("node {id}{marker} {}\n", node.tool.name));
        }
        for e in &self.edges {
            out.push_str(&format!("{} -> {} [{}]\n", e.producer, e.consumer, e.arg));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompileErrorKind {
    UnknownTool,
    DanglingReference,
    CycleDetected,
    AmbiguousLink,
    UnfillableRequiredArg,
    ToolNotAllowed,
    ArgTypeMismatch,
    MissingMilestone,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileError {
    pub kind: CompileErrorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg: Option<String>,
    pub detail: String,
}

impl fmt::Display for CompileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.kind)?;
        if let Some(step) = &self.step {
            write!(f, " at {step}")?;
            if let Some(arg) = &self.arg {
                write!(f, ".{arg}")?;
            }
        }
        write!(f, ": {}", self.detail)
    }
}

impl CompileError {
    fn new(kind: CompileErrorKind, step: Option<&str>, arg: Option<&str>, detail: impl Into<String>) -> Self {
        Self {
            kind,
            step: step.map(str::to_string),
            arg: arg.map(str::to_string),
            detail: detail.into(),
        }
    }

    fn from_issue(issue: &SketchIssue) -> Option<Self> {
        use CompileErrorKind as K;
        let step = Some(issue.step());
        Some(match issue {
            SketchIssue::UnknownTool { tool, .. } => Self::new(K::UnknownTool, step, None, format!("unknown tool '{tool}'")),
            SketchIssue::ToolNotAllowedByContract { tool, .. } => {
                Self::new(K::ToolNotAllowed, step, None, format!("tool '{tool}' is outside the allowed subset"))
            }
            SketchIssue::DanglingReference { arg, target, .. } => {
                Self::new(K::DanglingReference, step, Some(arg), format!("'{target}' does not exist"))
            }
            SketchIssue::ArgTypeMismatch { arg, reason, .. } => Self::new(K::ArgTypeMismatch, step, Some(arg), reason.clone()),
            SketchIssue::DuplicateStepId { .. } => Self::new(K::AmbiguousLink, step, None, "step id is declared more than once"),
            SketchIssue::ForwardReference { .. } => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkError {
    Ambiguous(Vec<SymbolicToken>),
    NoProducer,
}

/// Unique producer of `arg`'s type among `prior` steps, as a node token.
pub fn infer_link(arg: &ArgSpec, prior: &[&SketchStep], registry: &Registry) -> Result<SymbolicToken, LinkError> {
    let candidates: Vec<SymbolicToken> = prior
        .iter()
        .filter_map(|s| registry.lookup(&s.tool).map(|spec| (s, spec)))
        .flat_map(|(s, spec)| {
            spec.outputs
                .iter()
                .filter(|(_, ty)| **ty == arg.semantic_type)
                .map(|(field, _)| SymbolicToken::node(s.id.clone(), field.clone()))
                .collect::<Vec<_>>()
        })
        .collect();
    match candidates.len() {
        0 => Err(LinkError::NoProducer),
        1 => Ok(candidates.into_iter().next().expect("one candidate")),
        _ => Err(LinkError::Ambiguous(candidates)),
    }
}

/// Kahn's algorithm with ties broken by position in `nodes`. On a cycle,
/// returns one witness cycle (first node repeated at the end).
pub fn toposort(nodes: &[String], edges: &BTreeSet<Edge>) -> Result<Vec<String>, Vec<String>> {
    let index: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut indegree = vec![0usize; nodes.len()];
    let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes.len()];
    for e in edges {
        let (Some(&p), Some(&c)) = (index.get(e.producer.as_str()), index.get(e.consumer.as_str())) else {
            continue;
        };
        if succ[p].insert(c) {
            indegree[c] += 1;
        }
    }
    let mut heap: BinaryHeap<Reverse<usize>> = (0..nodes.len()).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(Reverse(i)) = heap.pop() {
        order.push(nodes[i].clone());
        for &c in &succ[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                heap.push(Reverse(c));
            }
        }
    }
    if order.len() == nodes.len() {
        return Ok(order);
    }
    // Every remaining node has a remaining predecessor; walk backwards until
    // a node repeats.
    let remaining: BTreeSet<usize> = (0..nodes.len()).filter(|&i| indegree[i] > 0).collect();
    let pred_of = |c: usize| (0..nodes.len()).find(|&p| remaining.contains(&p) && succ[p].contains(&c));
    let start = *remaining.iter().next().expect("cycle has nodes");
    let mut path = vec![start];
    let mut cur = start;
    loop {
        cur = pred_of(cur).expect("remaining nodes have predecessors");
        if let Some(pos) = path.iter().position(|&n| n == cur) {
            let mut cycle: Vec<String> = path[pos..].iter().rev().map(|&i| nodes[i].clone()).collect();
            cycle.push(cycle[0].clone());
            return Err(cycle);
        }
        path.push(cur);
    }
}

fn position_of(step_id: &str, fallback: usize) -> usize {
    step_id.strip_prefix("step").and_then(|k| k.parse().ok()).unwrap_or(fallback)
}

/// Compiles a sketch into an executable graph. All-or-nothing.
pub fn compile(sketch: &PlanSketch, registry: &Registry, contract: &TaskContract) -> Result<WorkflowGraph, Vec<CompileError>> {
    use CompileErrorKind as K;
    let mut errors: Vec<CompileError> = validate_sketch(sketch, registry, contract).iter().filter_map(CompileError::from_issue).collect();

    let present: BTreeSet<&str> = sketch.steps.iter().map(|s| s.tool.as_str()).collect();
    for m in &contract.milestones {
        if !present.contains(m.tool.as_str()) {
            errors.push(CompileError::new(
                K::MissingMilestone,
                None,
                None,
                format!("milestone '{}' needs a '{}' step", m.id, m.tool),
            ));
        }
    }

    let mut nodes = BTreeMap::new();
    for (i, step) in sketch.steps.iter().enumerate() {
        let Some(spec) = registry.lookup(&step.tool) else { continue };
        let prior: Vec<&SketchStep> = sketch.steps[..i].iter().collect();
        let mut args = BTreeMap::new();
        for (name, arg) in &spec.args {
            let slot = step.args.get(name);
            let value = match slot {
                Some(SketchArg::Value(v)) => Some(v.clone()),
                Some(SketchArg::Unfilled) | None => {
                    let fill_link = arg.accepts_reference && arg.semantic_type.is_artifact();
                    let unfilled = matches!(slot, Some(SketchArg::Unfilled));
                    if !arg.required && (unfilled || arg.compiler_fillable) && arg.default.is_some() {
                        arg.default.clone().map(ArgValue::Literal)
                    } else if !arg.required && !unfilled {
                        None
                    } else if fill_link {
                        match infer_link(arg, &prior, registry) {
                            Ok(token) => Some(ArgValue::Token(token)),
                            Err(LinkError::Ambiguous(c)) => {
                                let names: Vec<String> = c.iter().map(|t| t.to_string()).collect();
                                errors.push(CompileError::new(
                                    K::AmbiguousLink,
                                    Some(&step.id),
                                    Some(name),
                                    format!("{} producers: {}", arg.semantic_type, names.join(", ")),
                                ));
                                None
                            }
                            Err(LinkError::NoProducer) if arg.required => {
                                errors.push(CompileError::new(
                                    K::UnfillableRequiredArg,
                                    Some(&step.id),
                                    Some(name),
                                    format!("no upstream {} producer", arg.semantic_type),
                                ));
                                None
                            }
                            Err(LinkError::NoProducer) => None,
                        }
                    } else if arg.required {
                        errors.push(CompileError::new(
                            K::UnfillableRequiredArg,
                            Some(&step.id),
                            Some(name),
                            "required argument has no value and no default",
                        ));
                        None
                    } else {
                        None
                    }
                }
            };
            if let Some(v) = value {
                args.insert(name.clone(), v);
            }
        }
        nodes.insert(
            step.id.clone(),
            WorkflowNode {
                node_id: step.id.clone(),
                tool: spec.clone(),
                args,
                required: false,
                retry_budget: RetryBudget::default(),
                position: position_of(&step.id, i + 1),
            },
        );
    }
    if !errors.is_empty() {
        return Err(errors);
    }

    let mut edges = BTreeSet::new();
    for node in nodes.values() {
        for (arg, t) in node.node_refs() {
            if let Some(producer) = t.node_id.filter(|p| nodes.contains_key(p)) {
                edges.insert(Edge {
                    producer,
                    consumer: node.node_id.clone(),
                    arg,
                });
            }
        }
    }
    let ids: Vec<String> = sketch.steps.iter().map(|s| s.id.clone()).collect();
    let execution_order = toposort(&ids, &edges).map_err(|cycle| {
        vec![CompileError::new(K::CycleDetected, cycle.first().map(String::as_str), None, cycle.join(" -> "))]
    })?;

    let mut graph = WorkflowGraph {
        nodes,
        edges,
        execution_order,
    };
    mark_required(&mut graph, contract);
    Ok(graph)
}

/// Flags every node on a path into a milestone-producing node.
pub fn mark_required(graph: &mut WorkflowGraph, contract: &TaskContract) {
    let tools = contract.milestone_tools();
    let mut required: BTreeSet<String> =
        graph.nodes.values().filter(|n| tools.contains(n.tool.name.as_str())).map(|n| n.node_id.clone()).collect();
    let mut stack: Vec<String> = required.iter().cloned().collect();
    while let Some(n) = stack.pop() {
        for p in graph.predecessors(&n) {
            if required.insert(p.to_string()) {
                stack.push(p.to_string());
            }
        }
    }
    for node in graph.nodes.values_mut() {
        node.required = required.contains(&node.node_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::shipped_contract;
    use crate::sim_tools::{library_registry, TaskId};
    use crate::sketch::{sketch_from_plan, plan_for_case, PlannerPolicy};

    fn faithful(task: TaskId) -> (PlanSketch, TaskContract) {
        let c = shipped_contract(task);
        (sketch_from_plan(&plan_for_case(&c, &PlannerPolicy::none(), 1), &library_registry()), c)
    }

    fn edge(p: &str, c: &str) -> Edge {
        Edge {
            producer: p.into(),
            consumer: c.into(),
            arg: "x".into(),
        }
    }

    #[test]
    fn cardiac_compiles_linear() {
        let (s, c) = faithful(TaskId::CardiacRpt);
        let g = compile(&s, &library_registry(), &c).unwrap();
        assert_eq!(g.nodes.len(), 6);
        assert_eq!(g.edges.len(), 5);
        let ids: Vec<_> = s.steps.iter().map(|s| s.id.clone()).collect();
        assert_eq!(g.execution_order, ids);
        assert!(g.nodes.values().all(|n| n.required));
    }

    #[test]
    fn token_cycle_detected() {
        let (mut s, c) = faithful(TaskId::SuperRes);
        s.steps[1].args.insert("input".into(), SketchArg::Value(ArgValue::Token(SymbolicToken::node("step3", "volume"))));
        let errs = compile(&s, &library_registry(), &c).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].kind, CompileErrorKind::CycleDetected);
        assert!(errs[0].detail.contains("step2") && errs[0].detail.contains("step3"));
    }

    #[test]
    fn report_measurements_inferred_or_refused() {
        let reg = library_registry();
        let (mut s, c) = faithful(TaskId::ProstateRpt);
        s.steps[6].args.remove("measurements");
        s.steps[6].args.insert("measurements".into(), SketchArg::Unfilled);
        let g = compile(&s, &reg, &c).unwrap();
        assert_eq!(g.nodes["step7"].args["measurements"], ArgValue::Token(SymbolicToken::node("step5", "measurements")));
        assert!(g.edges.contains(&Edge {
            producer: "step5".into(),
            consumer: "step7".into(),
            arg: "measurements".into()
        }));

        // A second table producer makes the link ambiguous.
        let mut extra = s.steps[4].clone();
        extra.id = "extra".into();
        s.steps.insert(5, extra);
        let errs = compile(&s, &reg, &c).unwrap_err();
        assert!(errs.iter().any(|e| e.kind == CompileErrorKind::AmbiguousLink && e.step.as_deref() == Some("step7")));
    }

    #[test]
    fn unfilled_optional_gets_default() {
        let (mut s, c) = faithful(TaskId::Denoise);
        s.steps[1].args.insert("strength".into(), SketchArg::Unfilled);
        let g = compile(&s, &library_registry(), &c).unwrap();
        assert_eq!(g.nodes["step2"].args["strength"], ArgValue::Literal(Literal::Float(0.5)));
    }

    #[test]
    fn missing_milestone_step_rejected() {
        let (mut s, c) = faithful(TaskId::BrainGrade);
        s.steps.remove(1);
        let errs = compile(&s, &library_registry(), &c).unwrap_err();
        assert!(errs.iter().any(|e| e.kind == CompileErrorKind::MissingMilestone));
    }

    #[test]
    fn toposort_examples() {
        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let chain = ids(&["a", "b", "c"]);
        let e: BTreeSet<_> = [edge("a", "b"), edge("b", "c")].into();
        assert_eq!(toposort(&chain, &e).unwrap(), chain);
        let diamond = ids(&["a", "b", "c", "d"]);
        let e: BTreeSet<_> = [edge("a", "b"), edge("a", "c"), edge("b", "d"), edge("c", "d")].into();
        assert_eq!(toposort(&diamond, &e).unwrap(), diamond);
        let rev = ids(&["d", "c", "b", "a"]);
        assert_eq!(toposort(&rev, &e).unwrap(), ids(&["a", "c", "b", "d"]));
        let e: BTreeSet<_> = [edge("a", "b"), edge("b", "a")].into();
        let cycle = toposort(&ids(&["a", "b", "c"]), &e).unwrap_err();
        assert_eq!(cycle.first(), cycle.last());
        assert_eq!(cycle.len(), 3);
    }
}
