//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bcer_core::bench::{archived_traces, check_archived_case, run_benchmark, ResultTable};
use bcer_core::compiler::{compile, CompileErrorKind};
use bcer_core::contract::shipped_contracts;
use bcer_core::controllers::{ControllerKind, RunConfig};
use bcer_core::executor::{output_fingerprint, run_case, RunConstraints};
use bcer_core::registry::{ErrorCode, Registry};
use bcer_core::sim_tools::{library_registry, ChainClass, FaultConfig, TaskId};
use bcer_core::sketch::{plan_for_case, sketch_from_plan, PlanSketch, PlannerPolicy, SketchArg};
use bcer_core::token::{parse_token, render_token, SymbolicToken, TokenKind};
use bcer_core::trace::{read_trace, EventBody, TraceEvent};
use bcer_core::value::ArgValue;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

const KINDS: [ControllerKind; 4] = ControllerKind::ALL;

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

fn zero_fault_completeness(root: &Path) -> Verdict {
    let start = Instant::now();
    let table = run_benchmark(&shipped_contracts(), &KINDS, 0..5, &RunConfig::zero_fault(), &root.join("zero"), 1)
        .expect("benchmark runs");
    let elapsed = start.elapsed();
    let mut bad = Vec::new();
    for t in &table.tasks {
        for k in KINDS {
            let c = table.cell(*t, k);
            if c.sr < 1.0 || c.tcr < 1.0 || c.n < 5 {
                bad.push(format!("{t}/{}", k.slug()));
            }
        }
    }
    verdict(
        bad.is_empty() && elapsed < Duration::from_secs(60),
        format!("{} cells at 100/100 in {:.2}s on one thread; failing cells {:?}", 8 * 4 - bad.len(), elapsed.as_secs_f64(), bad),
    )
}

fn ladder_ordering(table: &ResultTable) -> Verdict {
    let long: Vec<f64> = KINDS.iter().map(|k| table.group(ChainClass::Long, *k).sr).collect();
    let total: Vec<f64> = KINDS.iter().map(|k| table.total(*k).sr).collect();
    let ordered = long.windows(2).all(|w| w[1] >= w[0]) && total.windows(2).all(|w| w[1] >= w[0]);
    let gaps: Vec<f64> = long.windows(2).map(|w| w[1] - w[0]).collect();
    let span = long[3] - long[0];
    let n = table.group(ChainClass::Long, ControllerKind::React).n / 3;
    verdict(
        ordered && gaps.iter().all(|g| *g >= 0.05) && span >= 0.30 && n >= 200,
        format!(
            "long-chain SR {} (gaps {}; ReAct to BCER {} points), total SR {}, {n} seeds per long task",
            long.iter().map(|x| pct(*x)).collect::<Vec<_>>().join(" / "),
            gaps.iter().map(|x| pct(*x)).collect::<Vec<_>>().join(", "),
            pct(span),
            total.iter().map(|x| pct(*x)).collect::<Vec<_>>().join(" / "),
        ),
    )
}

fn analytic_react_oracle(root: &Path) -> Verdict {
    let mut config = RunConfig::zero_fault();
    config.planner.hallucinated_path_prob = 0.1;
    config.repair.deterministic_attempts = 0;
    config.repair.pluggable_attempts = 0;
    config.repair.sketch_retry_budget = 0;
    let contract: Vec<_> = shipped_contracts().into_iter().filter(|c| c.task == TaskId::CardiacRpt).collect();
    let n = 2000u64;
    let table = run_benchmark(&contract, &[ControllerKind::React], 0..n, &config, &root.join("oracle"), 0)
        .expect("benchmark runs");
    let sr = table.total(ControllerKind::React).sr;
    let p = 0.9f64.powi(6);
    let se = (p * (1.0 - p) / n as f64).sqrt();
    let z = (sr - p) / se;
    verdict(z.abs() <= 3.0, format!("SR {sr:.4} vs 0.9^6 = {p:.4} over {n} seeds (z = {z:.2})"))
}

fn dispatch_and_preservation(trace: &[TraceEvent], budget: u32) -> Result<usize, String> {
    let mut latest: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut frozen: BTreeSet<String> = BTreeSet::new();
    let mut dispatches: BTreeMap<String, u32> = BTreeMap::new();
    let mut applied = 0;
    for e in trace {
        let node = e.node_id.clone().unwrap_or_default();
        match &e.body {
            EventBody::NodeDispatched { .. } => {
                if frozen.contains(&node) {
                    return Err(format!("preserved node {node} re-dispatched at event {}", e.seq_no));
                }
                let n = dispatches.entry(node.clone()).or_default();
                *n += 1;
                if *n > 1 + budget {
                    return Err(format!("{node} dispatched {n} times"));
                }
            }
            EventBody::NodeSucceeded { outputs, .. } => {
                latest.insert(node, outputs.values().map(output_fingerprint).collect());
            }
            EventBody::RepairApplied { affected, preserved, .. } => {
                applied += 1;
                for id in affected {
                    frozen.remove(id);
                }
                for (id, digests) in preserved {
                    if affected.contains(id) {
                        return Err(format!("{id} both preserved and affected"));
                    }
                    if latest.get(id) != Some(digests) {
                        return Err(format!("{id} digests changed before event {}", e.seq_no));
                    }
                    frozen.insert(id.clone());
                }
            }
            _ => {}
        }
    }
    Ok(applied)
}

fn repair_locality(root: &Path) -> Verdict {
    let budget = RunConfig::default_faults().budget().total();
    let mut applied = 0;
    let mut violations = Vec::new();
    let traces = fault_archives(root);
    for path in &traces {
        let events = read_trace(path).expect("archived trace parses");
        match dispatch_and_preservation(&events, budget) {
            Ok(n) => applied += n,
            Err(e) => violations.push(format!("{}: {e}", path.display())),
        }
    }
    verdict(
        violations.is_empty() && applied > 0,
        format!(
            "{applied} RepairApplied events across {} traces; {} violations {:?}",
            traces.len(),
            violations.len(),
            violations.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn fault_archives(root: &Path) -> Vec<PathBuf> {
    ["default", "sandbox", "omission"].iter().flat_map(|a| archived_traces(&root.join(a))).collect()
}

fn score_consistency(tables: &[&ResultTable]) -> Verdict {
    let mut bad_cases = 0;
    let mut bad_cells = 0;
    let mut cases = 0;
    let mut cells = 0;
    for table in tables {
        for r in &table.records {
            cases += 1;
            let tcr_full = (r.tcr - 1.0).abs() < 1e-12;
            if f64::from(r.sr) > r.tcr + 1e-12 || (r.sr == 1) != tcr_full {
                bad_cases += 1;
            }
        }
        for k in &table.controllers {
            let mut stats: Vec<_> = table.tasks.iter().map(|t| table.cell(*t, *k)).collect();
            stats.push(table.group(ChainClass::Short, *k));
            stats.push(table.group(ChainClass::Long, *k));
            stats.push(table.total(*k));
            for s in stats.into_iter().filter(|s| s.n > 0) {
                cells += 1;
                if s.sr > s.tcr + 1e-12 {
                    bad_cells += 1;
                }
            }
        }
    }
    verdict(
        bad_cases == 0 && bad_cells == 0,
        format!("{cases} cases, {cells} table cells; {bad_cases} inconsistent cases, {bad_cells} inconsistent cells"),
    )
}

fn trace_replayability(root: &Path) -> Verdict {
    let traces = archived_traces(root);
    let mut mismatches = Vec::new();
    for path in &traces {
        match check_archived_case(path) {
            Ok(c) if c.statuses_match && c.score_matches => {}
            Ok(c) => mismatches.push(format!("{} ({:?})", path.display(), c.first_divergence)),
            Err(e) => mismatches.push(format!("{}: {e}", path.display())),
        }
    }
    verdict(
        mismatches.is_empty() && !traces.is_empty(),
        format!("{} traces replayed, {} mismatches {:?}", traces.len(), mismatches.len(), mismatches.iter().take(3).collect::<Vec<_>>()),
    )
}

fn sandbox_containment(root: &Path, table: &ResultTable) -> Verdict {
    let archive = root.join("sandbox");
    let mut outside = Vec::new();
    let mut stack = vec![archive.clone()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("archive readable").flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel: Vec<String> = p
                .strip_prefix(&archive)
                .unwrap()
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            let top_level = rel.len() == 1 && (rel[0] == "results.jsonl" || rel[0] == "table.txt");
            let in_scope = rel.len() >= 4 && rel[1] == "cases" && table.records.iter().any(|r| r.case_id == rel[2]);
            if !top_level && !in_scope {
                outside.push(p);
            }
        }
    }
    let stray_root = root.join("escaped").exists() || root.parent().is_some_and(|p| p.join("escaped").exists());
    let mut attempts = 0;
    let mut unreported = Vec::new();
    for r in &table.records {
        let events = read_trace(&r.trace).expect("trace parses");
        let violations = events
            .iter()
            .filter(|e| matches!(e.body, EventBody::NodeFailed { code: ErrorCode::ScopeViolation, .. }))
            .count();
        attempts += r.escape_attempts;
        if violations != r.escape_attempts {
            unreported.push(format!("{} ({} attempts, {violations} events)", r.case_id, r.escape_attempts));
        }
    }
    verdict(
        outside.is_empty() && !stray_root && unreported.is_empty() && attempts > 0 && table.records.len() >= 1000,
        format!(
            "{} cases, {attempts} escape attempts, {} files outside scopes, {} unreported attempts {:?}",
            table.records.len(),
            outside.len(),
            unreported.len(),
            unreported.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

/// Prior producers of `ty` among the first `k` steps.
fn producers(sketch: &PlanSketch, k: usize, ty: bcer_core::registry::SemanticType, reg: &Registry) -> usize {
    sketch.steps[..k]
        .iter()
        .flat_map(|s| reg.lookup(&s.tool).unwrap().outputs.values())
        .filter(|o| **o == ty)
        .count()
}

fn compiler_soundness(root: &Path) -> Verdict {
    let reg = library_registry();
    let contracts = shipped_contracts();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut compiled, mut mutated_args, mut bad_dispatch) = (0, 0, Vec::new());
    let mut compile_failures = Vec::new();
    for i in 0..1000u64 {
        let contract = &contracts[(i % 8) as usize];
        let mut sketch = sketch_from_plan(&plan_for_case(contract, &PlannerPolicy::none(), i), &reg);
        for k in 0..sketch.steps.len() {
            let spec = reg.lookup(&sketch.steps[k].tool).unwrap().clone();
            for (name, arg) in &spec.args {
                let linkable = arg.accepts_reference && producers(&sketch, k, arg.semantic_type, &reg) == 1;
                let is_node_ref = matches!(
                    sketch.steps[k].args.get(name),
                    Some(SketchArg::Value(ArgValue::Token(t))) if t.kind == TokenKind::Node
                );
                let defaultable = !arg.required && arg.default.is_some();
                if (defaultable || (linkable && is_node_ref)) && rng.gen_bool(0.3) {
                    if rng.gen_bool(0.5) {
                        sketch.steps[k].args.insert(name.clone(), SketchArg::Unfilled);
                    } else {
                        sketch.steps[k].args.remove(name);
                    }
                    mutated_args += 1;
                }
            }
        }
        match compile(&sketch, &reg, contract) {
            Ok(graph) => {
                compiled += 1;
                let out = run_case(
                    &root.join("soundness"),
                    &format!("s{i}"),
                    contract,
                    graph,
                    None,
                    RunConstraints::default(),
                    &FaultConfig::none(),
                    i,
                )
                .expect("case runs");
                for e in &out.trace {
                    if let EventBody::NodeFailed { code, .. } | EventBody::BindFailed { code, .. } = &e.body {
                        if matches!(code, ErrorCode::SchemaMismatch | ErrorCode::UnknownTool) {
                            bad_dispatch.push(format!("s{i}:{code:?}"));
                        }
                    }
                }
            }
            Err(errs) => compile_failures.push(format!("s{i}: {}", errs[0])),
        }
    }

    // Ambiguity refusal: duplicate each referenced producer and unfill the consumer.
    let (mut ambiguous_cases, mut refused) = (0, 0);
    for contract in &contracts {
        let faithful = sketch_from_plan(&plan_for_case(contract, &PlannerPolicy::none(), 0), &reg);
        for (k, step) in faithful.steps.iter().enumerate() {
            for (arg, value) in &step.args {
                let SketchArg::Value(ArgValue::Token(t)) = value else { continue };
                let Some(producer) = t.node_id.clone().filter(|_| t.kind == TokenKind::Node) else { continue };
                let p = faithful.steps.iter().position(|s| s.id == producer).unwrap();
                let mut s = faithful.clone();
                s.steps[k].args.insert(arg.clone(), SketchArg::Unfilled);
                let mut dup = s.steps[p].clone();
                dup.id = format!("{producer}_twin");
                s.steps.insert(p + 1, dup);
                ambiguous_cases += 1;
                if let Err(errs) = compile(&s, &reg, contract) {
                    if errs.iter().any(|e| e.kind == CompileErrorKind::AmbiguousLink && e.step.as_deref() == Some(&step.id)) {
                        refused += 1;
                    }
                }
            }
        }
    }
    verdict(
        compiled == 1000 && bad_dispatch.is_empty() && refused == ambiguous_cases && ambiguous_cases > 0,
        format!(
            "{compiled}/1000 random sketches compiled ({mutated_args} args unfilled or dropped), {} SchemaMismatch/UnknownTool at dispatch; \
             {refused}/{ambiguous_cases} ambiguous producers refused; compile failures {:?}",
            bad_dispatch.len(),
            compile_failures.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn token_round_trip() -> Verdict {
    let kind = prop_oneof![
        Just(TokenKind::Seq),
        Just(TokenKind::Node),
        Just(TokenKind::Case),
        Just(TokenKind::Runtime)
    ];
    let strategy = (kind, "[A-Za-z_][A-Za-z0-9_-]{0,12}", prop::collection::vec("[A-Za-z_][A-Za-z0-9_]{0,12}", 1..6))
        .prop_map(|(kind, node, fields)| SymbolicToken {
            kind,
            node_id: (kind == TokenKind::Node).then_some(node),
            field_path: fields,
            span: (0, 0),
        });
    let cases = 10_000;
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    let result = runner.run(&strategy, |t| {
        let text = render_token(&t);
        let parsed = parse_token(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(&parsed, &t);
        prop_assert_eq!(render_token(&parsed), text);
        Ok(())
    });
    match result {
        Ok(()) => verdict(true, format!("{cases} random tokens, 0 failures")),
        Err(e) => verdict(false, format!("round-trip failure: {e}")),
    }
}

fn structural_signature(table: &ResultTable) -> Verdict {
    let mut differing = Vec::new();
    for r in table.records.iter().filter(|r| r.controller == ControllerKind::ReactBind) {
        let other = table.record(r.task, ControllerKind::ReactBindRef, r.seed).expect("paired record");
        if other.sr != r.sr {
            differing.push(r.case_id.clone());
        }
    }
    let bind = table.group(ChainClass::Long, ControllerKind::ReactBind).sr;
    let refl = table.group(ChainClass::Long, ControllerKind::ReactBindRef).sr;
    let bcer = table.group(ChainClass::Long, ControllerKind::Bcer).sr;
    let per_task_gap = table
        .tasks
        .iter()
        .filter(|t| t.chain_class() == ChainClass::Long)
        .map(|t| {
            table.cell(*t, ControllerKind::Bcer).sr
                - table.cell(*t, ControllerKind::ReactBind).sr.max(table.cell(*t, ControllerKind::ReactBindRef).sr)
        })
        .fold(f64::INFINITY, f64::min);
    verdict(
        differing.is_empty() && bcer - bind.max(refl) >= 0.20 && per_task_gap >= 0.20,
        format!(
            "{} seed pairs where Ref and Bind differ; long-chain SR Bind {} / Ref {} / BCER {} (smallest per-task gap {} points)",
            differing.len(),
            pct(bind),
            pct(refl),
            pct(bcer),
            pct(per_task_gap)
        ),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    let started = Instant::now();
    let suite = shipped_contracts();

    let default_table =
        run_benchmark(&suite, &KINDS, 0..200, &RunConfig::default_faults(), &root.join("default"), 0).expect("benchmark runs");
    println!("default fault configuration, 200 seeds per task:\n{}", default_table.render_text());

    let mut sandbox = RunConfig::default_faults();
    sandbox.faults.scope_escape_prob = 0.1;
    let sandbox_table = run_benchmark(&suite, &KINDS, 0..32, &sandbox, &root.join("sandbox"), 0).expect("benchmark runs");

    let mut omission = RunConfig::zero_fault();
    omission.planner.omit_step_prob = PlannerPolicy::default_faults().omit_step_prob;
    let omission_kinds = [ControllerKind::ReactBind, ControllerKind::ReactBindRef, ControllerKind::Bcer];
    let omission_table = run_benchmark(&suite, &omission_kinds, 0..200, &omission, &root.join("omission"), 0).expect("benchmark runs");

    let verdicts: Vec<(u8, &str, Verdict)> = vec![
        (1, "zero-fault completeness", zero_fault_completeness(root)),
        (2, "ladder ordering", ladder_ordering(&default_table)),
        (3, "analytic ReAct oracle", analytic_react_oracle(root)),
        (4, "repair locality", repair_locality(root)),
        (5, "SR/TCR consistency", score_consistency(&[&default_table, &sandbox_table, &omission_table])),
        (6, "trace replayability", trace_replayability(root)),
        (7, "sandbox containment", sandbox_containment(root, &sandbox_table)),
        (8, "compiler soundness and refusal", compiler_soundness(root)),
        (9, "token round-trip", token_round_trip()),
        (10, "structural-fault signature", structural_signature(&omission_table)),
    ];
    let mut all = true;
    for (id, name, v) in &verdicts {
        all &= v.pass;
        println!("criterion {id:>2} {}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance finished in {:.1}s", started.elapsed().as_secs_f64());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
