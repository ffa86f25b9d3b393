//! Plan sketches and the seeded surrogate planner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::TaskContract;
use crate::digest::derived_rng;
use crate::registry::{Registry, SemanticType};
use crate::sim_tools::{reference_chain, step_id, ReferenceStep, TaskId, Wire};
use crate::token::{SymbolicToken, TokenKind};
use crate::value::{ArgValue, Literal};

pub const UNFILLED: &str = "<UNFILLED>";

/// A sketch argument: a value, or a slot left for the compiler to fill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Literal", into = "Literal")]
pub enum SketchArg {
    Unfilled,
    Value(ArgValue),
}

impl From<Literal> for SketchArg {
    fn from(lit: Literal) -> Self {
        match &lit {
            Literal::Text(s) if s == UNFILLED => SketchArg::Unfilled,
            _ => SketchArg::Value(lit.into()),
        }
    }
}

impl From<SketchArg> for Literal {
    fn from(arg: SketchArg) -> Self {
        match arg {
            SketchArg::Unfilled => Literal::text(UNFILLED),
            SketchArg::Value(v) => v.into(),
        }
    }
}

impl SketchArg {
    pub fn token(&self) -> Option<&SymbolicToken> {
        match self {
            SketchArg::Value(ArgValue::Token(t)) => Some(t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SketchStep {
    pub id: String,
    pub tool: String,
    #[serde(default)]
    pub args: BTreeMap<String, SketchArg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSketch {
    pub goal: String,
    #[serde(default)]
    pub constraints: BTreeSet<String>,
    #[serde(rename = "step", default)]
    pub steps: Vec<SketchStep>,
}

#[derive(Debug, Error)]
#[error("sketch format: {0}")]
pub struct SketchFormatError(String);

impl PlanSketch {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sketch serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, SketchFormatError> {
        toml::from_str(text).map_err(|e| SketchFormatError(e.to_string()))
    }

    pub fn step(&self, id: &str) -> Option<&SketchStep> {
        self.steps.iter().find(|s| s.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerPolicy {
    pub omit_step_prob: f64,
    pub wrong_arg_prob: f64,
    pub dangling_ref_prob: f64,
    pub hallucinated_path_prob: f64,
}

impl Default for PlannerPolicy {
    fn default() -> Self {
        Self::none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("planner policy: {0}")]
pub struct PolicyError(pub String);

impl PlannerPolicy {
    pub fn none() -> Self {
        Self {
            omit_step_prob: 0.0,
            wrong_arg_prob: 0.0,
            dangling_ref_prob: 0.0,
            hallucinated_path_prob: 0.0,
        }
    }

    /// The benchmark's default planner fault rates.
    pub fn default_faults() -> Self {
        Self {
            omit_step_prob: 0.08,
            wrong_arg_prob: 0.08,
            dangling_ref_prob: 0.05,
            hallucinated_path_prob: 0.10,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        for (name, p) in [
            ("omit_step_prob", self.omit_step_prob),
            ("wrong_arg_prob", self.wrong_arg_prob),
            ("dangling_ref_prob", self.dangling_ref_prob),
            ("hallucinated_path_prob", self.hallucinated_path_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PolicyError(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Shape of a fabricated path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathForm {
    /// Absolute path somewhere outside the workdir.
    Absolute,
    /// Relative path that climbs into another case.
    Traversal,
    /// Plausible in-scope path that was never written.
    InScopeMissing,
}

/// The planner's intent for one reference step plus the faults drawn for it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub position: usize,
    pub step: ReferenceStep,
    pub omitted: bool,
    pub wrong_arg: Option<String>,
    pub dangling: Option<String>,
    pub hallucinated: Option<(String, PathForm)>,
}

impl StepPlan {
    pub fn id(&self) -> String {
        step_id(self.position)
    }

    pub fn is_clean(&self) -> bool {
        !self.omitted && self.wrong_arg.is_none() && self.dangling.is_none() && self.hallucinated.is_none()
    }

    pub fn wire(&self, arg: &str) -> Option<&Wire> {
        self.step.args.iter().find(|(n, _)| n == arg).map(|(_, w)| w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedCase {
    pub task: TaskId,
    pub goal: String,
    pub steps: Vec<StepPlan>,
}

impl PlannedCase {
    pub fn is_clean(&self) -> bool {
        self.steps.iter().all(StepPlan::is_clean)
    }

    pub fn omitted(&self, position: usize) -> bool {
        self.steps.get(position - 1).is_some_and(|s| s.omitted)
    }
}

fn pick<'a>(rng: &mut impl Rng, items: &'a [String]) -> Option<&'a String> {
    let u: f64 = rng.gen();
    if items.is_empty() {
        None
    } else {
        Some(&items[((u * items.len() as f64) as usize).min(items.len() - 1)])
    }
}

/// Draws faults for every reference step. Each step consumes the same number
/// of draws whatever their outcome, so streams stay aligned across policies.
pub fn draw_plan(contract: &TaskContract, policy: &PlannerPolicy, rng: &mut impl Rng) -> PlannedCase {
    let chain = reference_chain(contract.task);
    let n = chain.len();
    let steps = chain
        .into_iter()
        .enumerate()
        .map(|(i, step)| {
            let position = i + 1;
            let literal_args: Vec<String> =
                step.args.iter().filter(|(_, w)| matches!(w, Wire::Lit(_))).map(|(a, _)| a.clone()).collect();
            let node_args: Vec<String> =
                step.args.iter().filter(|(_, w)| matches!(w, Wire::Step(..))).map(|(a, _)| a.clone()).collect();
            let token_args: Vec<String> = step
                .args
                .iter()
                .filter(|(_, w)| matches!(w, Wire::Step(..) | Wire::Input(_)))
                .map(|(a, _)| a.clone())
                .collect();

            let omit = rng.gen::<f64>() < policy.omit_step_prob;
            let wrong = rng.gen::<f64>() < policy.wrong_arg_prob;
            let wrong_pick = pick(rng, &literal_args).cloned();
            let dangle = rng.gen::<f64>() < policy.dangling_ref_prob;
            let dangle_pick = pick(rng, &node_args).cloned();
            let hallucinate = rng.gen::<f64>() < policy.hallucinated_path_prob;
            let hall_pick = pick(rng, &token_args).cloned();
            let form = match rng.gen_range(0..3) {
                0 => PathForm::Absolute,
                1 => PathForm::Traversal,
                _ => PathForm::InScopeMissing,
            };
            let interior = position > 1 && position < n;
            StepPlan {
                position,
                step,
                omitted: omit && interior,
                wrong_arg: wrong_pick.filter(|_| wrong),
                dangling: dangle_pick.filter(|_| dangle),
                hallucinated: hall_pick.filter(|_| hallucinate).map(|a| (a, form)),
            }
        })
        .collect();
    PlannedCase {
        task: contract.task,
        goal: contract.goal.clone(),
        steps,
    }
}

/// Planner draws for a case, keyed only by seed and task.
pub fn plan_for_case(contract: &TaskContract, policy: &PlannerPolicy, seed: u64) -> PlannedCase {
    let mut rng = derived_rng(seed, &["planner", contract.task.slug()]);
    draw_plan(contract, policy, &mut rng)
}

/// A literal of the wrong type for `ty`.
pub fn mistyped_literal(ty: SemanticType) -> Literal {
    match ty {
        SemanticType::Text => Literal::Int(42),
        SemanticType::Scalar | SemanticType::FrameIndex => Literal::text("auto"),
        _ => Literal::Bool(true),
    }
}

/// Fabricated path text for a hallucinated reference.
pub fn fabricated_path(form: PathForm, plan: &StepPlan, arg: &str) -> String {
    let stem = match plan.wire(arg) {
        Some(Wire::Step(k, field)) => format!("{}.{field}", step_id(*k)),
        Some(Wire::Input(t)) => t.field_key(),
        _ => arg.to_string(),
    };
    match form {
        PathForm::Absolute => format!("/data/mri/scans/{stem}.nii.gz"),
        PathForm::Traversal => format!("../case-prior/artifacts/{stem}"),
        PathForm::InScopeMissing => format!("artifacts/{}_{stem}_out.nii.gz", plan.step.tool),
    }
}

/// Ghost token substituted by a dangling-reference fault.
pub fn ghost_token(plan: &StepPlan, arg: &str) -> SymbolicToken {
    let field = match plan.wire(arg) {
        Some(Wire::Step(_, f)) => f.clone(),
        _ => arg.to_string(),
    };
    SymbolicToken::node(format!("ghost{}", plan.position), field)
}

fn arg_type(registry: &Registry, tool: &str, arg: &str) -> Option<SemanticType> {
    registry.lookup(tool).and_then(|s| s.args.get(arg)).map(|a| a.semantic_type)
}

/// Faithful sketch arguments for a step, with consumers of omitted steps
/// left unfilled.
fn faithful_args(plan: &StepPlan, omitted: &dyn Fn(usize) -> bool) -> BTreeMap<String, SketchArg> {
    plan.step
        .args
        .iter()
        .map(|(name, wire)| {
            let arg = match wire {
                Wire::Input(t) => SketchArg::Value(ArgValue::Token(t.clone())),
                Wire::Step(k, _) if omitted(*k) => SketchArg::Unfilled,
                Wire::Step(k, field) => SketchArg::Value(ArgValue::Token(SymbolicToken::node(step_id(*k), field.clone()))),
                Wire::Lit(lit) => SketchArg::Value(ArgValue::Literal(lit.clone())),
            };
            (name.clone(), arg)
        })
        .collect()
}

fn apply_faults(plan: &StepPlan, args: &mut BTreeMap<String, SketchArg>, registry: &Registry) {
    if let Some(arg) = &plan.wrong_arg {
        let ty = arg_type(registry, &plan.step.tool, arg).unwrap_or(SemanticType::Scalar);
        args.insert(arg.clone(), SketchArg::Value(ArgValue::Literal(mistyped_literal(ty))));
    }
    if let Some(arg) = &plan.dangling {
        if args.get(arg).and_then(SketchArg::token).is_some() {
            args.insert(arg.clone(), SketchArg::Value(ArgValue::Token(ghost_token(plan, arg))));
        }
    }
    if let Some((arg, form)) = &plan.hallucinated {
        if args.get(arg).and_then(SketchArg::token).is_some() {
            let path = fabricated_path(*form, plan, arg);
            args.insert(arg.clone(), SketchArg::Value(ArgValue::Literal(Literal::Text(path))));
        }
    }
}

fn sketch_step(plan: &StepPlan, args: BTreeMap<String, SketchArg>) -> SketchStep {
    SketchStep {
        id: plan.id(),
        tool: plan.step.tool.clone(),
        args,
        rationale: None,
    }
}

/// Renders planner draws as a sketch.
pub fn sketch_from_plan(planned: &PlannedCase, registry: &Registry) -> PlanSketch {
    let omitted = |k: usize| planned.omitted(k);
    let steps = planned
        .steps
        .iter()
        .filter(|p| !p.omitted)
        .map(|p| {
            let mut args = faithful_args(p, &omitted);
            apply_faults(p, &mut args, registry);
            sketch_step(p, args)
        })
        .collect();
    PlanSketch {
        goal: planned.goal.clone(),
        constraints: BTreeSet::from(["stay-in-case-scope".to_string()]),
        steps,
    }
}

/// The surrogate planner: reference chain plus independently drawn faults.
pub fn surrogate_brain(contract: &TaskContract, policy: &PlannerPolicy, rng: &mut impl Rng, registry: &Registry) -> PlanSketch {
    sketch_from_plan(&draw_plan(contract, policy, rng), registry)
}

/// Re-plans after compile diagnostics. Steps named in `flagged`, omitted
/// steps and steps with unfilled slots are regenerated from the reference
/// chain; the regenerated steps draw fresh argument faults (never omission).
pub fn replan(
    previous: &PlanSketch,
    planned: &PlannedCase,
    flagged: &BTreeSet<String>,
    policy: &PlannerPolicy,
    seed: u64,
    attempt: u32,
    registry: &Registry,
) -> PlanSketch {
    let retry_policy = PlannerPolicy {
        omit_step_prob: 0.0,
        ..*policy
    };
    let mut rng = derived_rng(seed, &["replan", planned.task.slug(), &attempt.to_string()]);
    let contract_stub = TaskContract {
        task: planned.task,
        goal: planned.goal.clone(),
        input: Default::default(),
        allowed_tools: BTreeSet::new(),
        milestones: Vec::new(),
    };
    let fresh = draw_plan(&contract_stub, &retry_policy, &mut rng);
    let never_omitted = |_: usize| false;
    let steps = planned
        .steps
        .iter()
        .zip(&fresh.steps)
        .map(|(p, redraw)| {
            let id = p.id();
            match previous.step(&id) {
                Some(prev)
                    if !flagged.contains(&id) && !prev.args.values().any(|a| *a == SketchArg::Unfilled) =>
                {
                    prev.clone()
                }
                _ => {
                    let mut args = faithful_args(p, &never_omitted);
                    apply_faults(redraw, &mut args, registry);
                    sketch_step(p, args)
                }
            }
        })
        .collect();
    PlanSketch {
        goal: previous.goal.clone(),
        constraints: previous.constraints.clone(),
        steps,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "issue")]
pub enum SketchIssue {
    UnknownTool { step: String, tool: String },
    ToolNotAllowedByContract { step: String, tool: String },
    DanglingReference { step: String, arg: String, target: String },
    ArgTypeMismatch { step: String, arg: String, reason: String },
    ForwardReference { step: String, arg: String, target: String },
    DuplicateStepId { step: String },
}

impl SketchIssue {
    pub fn step(&self) -> &str {
        match self {
            SketchIssue::UnknownTool { step, .. }
            | SketchIssue::ToolNotAllowedByContract { step, .. }
            | SketchIssue::DanglingReference { step, .. }
            | SketchIssue::ArgTypeMismatch { step, .. }
            | SketchIssue::ForwardReference { step, .. }
            | SketchIssue::DuplicateStepId { step } => step,
        }
    }
}

impl fmt::Display for SketchIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SketchIssue::UnknownTool { step, tool } => write!(f, "{step}: unknown tool '{tool}'"),
            SketchIssue::ToolNotAllowedByContract { step, tool } => write!(f, "{step}: tool '{tool}' not allowed by contract"),
            SketchIssue::DanglingReference { step, arg, target } => write!(f, "{step}.{arg}: dangling reference to '{target}'"),
            SketchIssue::ArgTypeMismatch { step, arg, reason } => write!(f, "{step}.{arg}: {reason}"),
            SketchIssue::ForwardReference { step, arg, target } => write!(f, "{step}.{arg}: forward reference to '{target}'"),
            SketchIssue::DuplicateStepId { step } => write!(f, "duplicate step id '{step}'"),
        }
    }
}

/// Checks a sketch against the registry and contract without compiling it.
pub fn validate_sketch(sketch: &PlanSketch, registry: &Registry, contract: &TaskContract) -> Vec<SketchIssue> {
    let mut issues = Vec::new();
    let index: BTreeMap<&str, usize> = sketch.steps.iter().enumerate().rev().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut seen = BTreeSet::new();
    for (i, step) in sketch.steps.iter().enumerate() {
        let sid = step.id.clone();
        if !seen.insert(step.id.as_str()) {
            issues.push(SketchIssue::DuplicateStepId { step: sid.clone() });
        }
        let Some(spec) = registry.lookup(&step.tool) else {
            issues.push(SketchIssue::UnknownTool {
                step: sid,
                tool: step.tool.clone(),
            });
            continue;
        };
        if !contract.allowed_tools.contains(&step.tool) {
            issues.push(SketchIssue::ToolNotAllowedByContract {
                step: sid.clone(),
                tool: step.tool.clone(),
            });
        }
        for (name, arg) in &step.args {
            let mismatch = |reason: String| SketchIssue::ArgTypeMismatch {
                step: sid.clone(),
                arg: name.clone(),
                reason,
            };
            let Some(arg_spec) = spec.args.get(name) else {
                issues.push(mismatch(format!("'{}' declares no argument '{name}'", step.tool)));
                continue;
            };
            let ty = arg_spec.semantic_type;
            match arg {
                SketchArg::Unfilled => {}
                SketchArg::Value(ArgValue::Literal(lit)) => {
                    if ty.is_artifact() {
                        issues.push(mismatch(format!("literal {lit} where a {ty} reference is required")));
                    } else if !ty.accepts_literal(lit) {
                        issues.push(mismatch(format!("literal {lit} is not a {ty}")));
                    }
                }
                SketchArg::Value(ArgValue::Token(token)) => {
                    if !arg_spec.accepts_reference {
                        issues.push(mismatch("argument does not accept references".into()));
                        continue;
                    }
                    match token.kind {
                        TokenKind::Node => {
                            let target = token.node_id.clone().unwrap_or_default();
                            let Some(&j) = index.get(target.as_str()) else {
                                issues.push(SketchIssue::DanglingReference {
                                    step: sid.clone(),
                                    arg: name.clone(),
                                    target,
                                });
                                continue;
                            };
                            if j >= i {
                                issues.push(SketchIssue::ForwardReference {
                                    step: sid.clone(),
                                    arg: name.clone(),
                                    target: target.clone(),
                                });
                            }
                            let produced = registry
                                .lookup(&sketch.steps[j].tool)
                                .and_then(|p| p.outputs.get(&token.field_key()).copied());
                            match produced {
                                None => issues.push(mismatch(format!("{target} has no output '{}'", token.field_key()))),
                                Some(p) if p != ty => issues.push(mismatch(format!("{token} is a {p}, expected {ty}"))),
                                Some(_) => {}
                            }
                        }
                        TokenKind::Case | TokenKind::Seq => {
                            let declared = match token.kind {
                                TokenKind::Case => contract
                                    .input
                                    .artifacts
                                    .get(&token.field_key())
                                    .copied()
                                    .or_else(|| contract.input.metadata.get(&token.field_key()).map(|_| SemanticType::Scalar)),
                                _ => token.field_path.split_first().and_then(|(seq, rest)| {
                                    contract.input.sequences.get(seq).and_then(|f| f.get(&rest.join("."))).copied()
                                }),
                            };
                            match declared {
                                None => issues.push(SketchIssue::DanglingReference {
                                    step: sid.clone(),
                                    arg: name.clone(),
                                    target: token.to_string(),
                                }),
                                Some(d) if d != ty => issues.push(mismatch(format!("{token} is a {d}, expected {ty}"))),
                                Some(_) => {}
                            }
                        }
                        TokenKind::Runtime => {}
                    }
                }
            }
        }
    }
    issues
}
