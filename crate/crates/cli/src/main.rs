use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bcer_core::bench::{check_archived_case, run_benchmark, ResultTable};
use bcer_core::compiler::compile;
use bcer_core::contract::{load_contract, TaskContract};
use bcer_core::controllers::{run_controller, ControllerKind, RunConfig};
use bcer_core::registry::Registry;
use bcer_core::sim_tools::{library_registry, TaskId};
use bcer_core::sketch::{plan_for_case, sketch_from_plan, PlannerPolicy};
use bcer_core::trace::{read_trace, EventBody, TraceEvent};
use clap::{Parser, Subcommand, ValueEnum};

const EXIT_TASK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ENGINE: u8 = 3;

#[derive(Parser)]
#[command(name = "bcer", version, about = "Compile, run and audit simulated MRI tool workflows")]
struct Cli {
    /// Output style. `records` prints one JSON object per line.
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Records,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single case.
    Run {
        #[arg(long)]
        contract: PathBuf,
        #[arg(long)]
        controller: ControllerKind,
        #[arg(long)]
        seed: u64,
        /// Run configuration (planner, faults, constraints, repair sections).
        #[arg(long)]
        faults: Option<PathBuf>,
        /// Planner fault policy; overrides the planner section of --faults.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, env = "BCER_WORKDIR", default_value = "bcer-work")]
        workdir: PathBuf,
    },
    /// Run every contract in a suite under several controllers.
    Bench {
        #[arg(long)]
        suite: PathBuf,
        /// Comma-separated controller list.
        #[arg(long, value_delimiter = ',', default_value = "react,react-bind,react-bind-ref,bcer")]
        controllers: Vec<ControllerKind>,
        /// Seeds 0..N per task.
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        faults: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, env = "BCER_WORKDIR", default_value = "bcer-work")]
        workdir: PathBuf,
        /// Archive directory; defaults to <workdir>/bench.
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Worker threads (0 = one per core).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Inspect or replay a case trace.
    Trace {
        #[command(subcommand)]
        action: TraceAction,
    },
    /// Check contracts, run configs and toolsets without running anything.
    Validate {
        #[arg(long)]
        contract: Vec<PathBuf>,
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        faults: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Tool registry file to check instead of the built-in library.
        #[arg(long)]
        toolset: Option<PathBuf>,
    },
    /// List registered tools, or render a task's compiled workflow.
    Tools {
        #[arg(long)]
        task: Option<TaskId>,
        /// Print the compiled edge list of the task's workflow.
        #[arg(long, requires = "task")]
        graph: bool,
    },
}

#[derive(Subcommand)]
enum TraceAction {
    Inspect {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        node: Option<String>,
    },
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Engine(anyhow::Error),
}

type Outcome = Result<u8, Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn engine<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Engine(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run {
            contract,
            controller,
            seed,
            faults,
            policy,
            workdir,
        } => cmd_run(cli.format, &contract, controller, seed, faults.as_deref(), policy.as_deref(), &workdir),
        Command::Bench {
            suite,
            controllers,
            seeds,
            faults,
            policy,
            workdir,
            archive,
            jobs,
        } => {
            let archive = archive.unwrap_or_else(|| workdir.join("bench"));
            cmd_bench(cli.format, &suite, &controllers, seeds, faults.as_deref(), policy.as_deref(), &archive, jobs)
        }
        Command::Trace { action } => match action {
            TraceAction::Inspect { trace, node } => cmd_inspect(cli.format, &trace, node.as_deref()),
            TraceAction::Replay { trace } => cmd_replay(cli.format, &trace),
        },
        Command::Validate {
            contract,
            suite,
            faults,
            policy,
            toolset,
        } => cmd_validate(&contract, suite.as_deref(), faults.as_deref(), policy.as_deref(), toolset.as_deref()),
        Command::Tools { task, graph } => cmd_tools(cli.format, task, graph),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Engine(e)) => {
            eprintln!("engine error: {e:#}");
            ExitCode::from(EXIT_ENGINE)
        }
    }
}

fn load_config(faults: Option<&Path>, policy: Option<&Path>) -> anyhow::Result<RunConfig> {
    let mut config = match faults {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_toml(&text).with_context(|| p.display().to_string())?
        }
        None => RunConfig::zero_fault(),
    };
    if let Some(p) = policy {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        config.planner = toml::from_str::<PlannerPolicy>(&text).with_context(|| p.display().to_string())?;
        config.validate()?;
    }
    Ok(config)
}

fn read_contract(path: &Path) -> anyhow::Result<TaskContract> {
    Ok(load_contract(path)?)
}

fn load_suite(dir: &Path) -> anyhow::Result<Vec<TaskContract>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading suite {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        anyhow::bail!("suite {} contains no contracts", dir.display());
    }
    paths.iter().map(|p| read_contract(p)).collect()
}

fn cmd_run(
    format: Format,
    contract: &Path,
    kind: ControllerKind,
    seed: u64,
    faults: Option<&Path>,
    policy: Option<&Path>,
    workdir: &Path,
) -> Outcome {
    let contract = read_contract(contract).map_err(usage)?;
    let config = load_config(faults, policy).map_err(usage)?;
    let outcome = run_controller(kind, &contract, &config, workdir, seed).map_err(engine)?;
    match format {
        Format::Text => {
            println!("case={} controller={} sr={} tcr={:.2}", outcome.case_id, kind.slug(), outcome.score.sr, outcome.score.tcr);
            println!("trace={}", outcome.trace_path().display());
        }
        Format::Records => println!(
            "{}",
            serde_json::json!({
                "record": "case",
                "case_id": outcome.case_id,
                "task": outcome.task,
                "controller": kind,
                "seed": seed,
                "score": outcome.score,
                "trace": outcome.trace_path(),
                "engine_error": outcome.engine_error,
            })
        ),
    }
    if let Some(e) = &outcome.engine_error {
        return Err(engine(anyhow::anyhow!("{e}")));
    }
    Ok(if outcome.score.sr == 1 { 0 } else { EXIT_TASK_FAILED })
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    format: Format,
    suite: &Path,
    kinds: &[ControllerKind],
    seeds: u64,
    faults: Option<&Path>,
    policy: Option<&Path>,
    archive: &Path,
    jobs: usize,
) -> Outcome {
    let contracts = load_suite(suite).map_err(usage)?;
    let config = load_config(faults, policy).map_err(usage)?;
    let table: ResultTable = run_benchmark(&contracts, kinds, 0..seeds, &config, archive, jobs).map_err(engine)?;
    match format {
        Format::Text => {
            print!("{}", table.render_text());
            println!("archive={}", archive.display());
        }
        Format::Records => print!("{}", table.render_records()),
    }
    let crashed: Vec<&str> =
        table.records.iter().filter(|r| r.engine_error.is_some()).map(|r| r.case_id.as_str()).collect();
    if !crashed.is_empty() {
        return Err(engine(anyhow::anyhow!("{} case(s) hit engine errors: {}", crashed.len(), crashed.join(", "))));
    }
    Ok(0)
}

fn summarize(body: &EventBody) -> String {
    match body {
        EventBody::CaseStarted { controller, seed, contract } => {
            format!("controller={controller} seed={seed} task={}", contract.task)
        }
        EventBody::SketchProduced { attempt, sketch } => format!("attempt={attempt} steps={}", sketch.steps.len()),
        EventBody::Compiled { execution_order, edges, .. } => {
            format!("order=[{}] edges={}", execution_order.join(","), edges.len())
        }
        EventBody::CompileFailed { attempt, errors } => format!(
            "attempt={attempt} errors=[{}]",
            errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
        ),
        EventBody::NodeDispatched { tool, attempt, .. } => format!("tool={tool} attempt={attempt}"),
        EventBody::BindFailed { arg, token, reason, code } => format!("arg={arg} token={token} reason={reason:?} code={code:?}"),
        EventBody::NodeSucceeded { tool, outputs, .. } => format!(
            "tool={tool} outputs=[{}]",
            outputs
                .iter()
                .map(|(f, v)| match v.as_artifact() {
                    Some(a) => format!("{f}={}#{}", a.artifact_id, &a.content_digest[..a.content_digest.len().min(12)]),
                    None => format!("{f}={}", v.canonical()),
                })
                .collect::<Vec<_>>()
                .join(", ")
        ),
        EventBody::NodeFailed { tool, code, arg, message } => {
            format!("tool={tool} code={code:?} arg={} {message}", arg.as_deref().unwrap_or("-"))
        }
        EventBody::RepairProposed { patch, affected } => {
            format!("stage={:?} edits={} affected=[{}]", patch.stage, patch.edits.len(), affected.join(","))
        }
        EventBody::RepairApplied { stage, affected, preserved, .. } => {
            format!("stage={stage:?} affected=[{}] preserved={}", affected.join(","), preserved.len())
        }
        EventBody::RepairRejected { stage, reason } => format!("stage={stage:?} {reason}"),
        EventBody::NodeAbandoned { reason } => reason.clone(),
        EventBody::MilestoneValidated { result } => {
            let mut s = format!("{} validated={}", result.milestone_id, result.validated);
            if let Some(r) = &result.reason {
                s.push_str(&format!(" reason={r}"));
            }
            for e in &result.evidence {
                s.push_str(&format!("\n        evidence: {e}"));
            }
            s
        }
        EventBody::CaseFinished { score, .. } => format!("sr={} tcr={:.2}", score.sr, score.tcr),
        EventBody::EngineError { message } => message.clone(),
    }
}

fn cmd_inspect(format: Format, trace: &Path, node: Option<&str>) -> Outcome {
    let events = read_trace(trace).map_err(engine)?;
    let keep = |e: &&TraceEvent| node.is_none() || e.node_id.as_deref() == node;
    for e in events.iter().filter(keep) {
        match format {
            Format::Text => println!(
                "{:>4} {:<8} {:<18} {}",
                e.seq_no,
                e.node_id.as_deref().unwrap_or("-"),
                e.body.kind(),
                summarize(&e.body)
            ),
            Format::Records => println!("{}", serde_json::to_string(e).map_err(engine)?),
        }
    }
    Ok(0)
}

fn cmd_replay(format: Format, trace: &Path) -> Outcome {
    let check = check_archived_case(trace).map_err(engine)?;
    let ok = check.statuses_match && check.score_matches;
    match format {
        Format::Text if ok => println!("replay: match"),
        Format::Text => println!(
            "replay: mismatch (statuses {}, score {}) first divergence: {}",
            if check.statuses_match { "match" } else { "differ" },
            if check.score_matches { "matches" } else { "differs" },
            check.first_divergence.as_deref().unwrap_or("score only")
        ),
        Format::Records => println!(
            "{}",
            serde_json::json!({
                "record": "replay",
                "trace": check.trace,
                "statuses_match": check.statuses_match,
                "score_matches": check.score_matches,
                "first_divergence": check.first_divergence,
            })
        ),
    }
    Ok(if ok { 0 } else { EXIT_TASK_FAILED })
}

fn cmd_validate(
    contracts: &[PathBuf],
    suite: Option<&Path>,
    faults: Option<&Path>,
    policy: Option<&Path>,
    toolset: Option<&Path>,
) -> Outcome {
    let registry = match toolset {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
            let r = Registry::from_toml(&text).with_context(|| p.display().to_string()).map_err(usage)?;
            println!("ok toolset {} ({} tools)", p.display(), r.len());
            r
        }
        None => library_registry(),
    };
    let mut all: Vec<(PathBuf, TaskContract)> = Vec::new();
    for p in contracts {
        all.push((p.clone(), read_contract(p).map_err(usage)?));
    }
    if let Some(dir) = suite {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading suite {}", dir.display()))
            .map_err(usage)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        for p in paths {
            let c = read_contract(&p).map_err(usage)?;
            all.push((p, c));
        }
    }
    for (path, contract) in &all {
        for tool in &contract.allowed_tools {
            if registry.lookup(tool).is_none() {
                return Err(usage(anyhow::anyhow!("{}: allowed tool '{tool}' is not registered", path.display())));
            }
        }
        let planned = plan_for_case(contract, &PlannerPolicy::none(), 0);
        let sketch = sketch_from_plan(&planned, &registry);
        if let Err(errors) = compile(&sketch, &registry, contract) {
            let list: Vec<String> = errors.iter().map(ToString::to_string).collect();
            return Err(usage(anyhow::anyhow!("{}: reference workflow does not compile: {}", path.display(), list.join("; "))));
        }
        println!("ok contract {}", path.display());
    }
    if faults.is_some() || policy.is_some() {
        load_config(faults, policy).map_err(usage)?;
        println!("ok run config");
    }
    Ok(0)
}

fn cmd_tools(format: Format, task: Option<TaskId>, graph: bool) -> Outcome {
    let registry = library_registry();
    if graph {
        let task = task.expect("clap enforces --task with --graph");
        let contract = bcer_core::contract::shipped_contract(task);
        let sketch = sketch_from_plan(&plan_for_case(&contract, &PlannerPolicy::none(), 0), &registry);
        let g = compile(&sketch, &registry, &contract)
            .map_err(|e| engine(anyhow::anyhow!("{}", e.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))))?;
        match format {
            Format::Text => print!("{}", g.render_edge_list()),
            Format::Records => {
                for e in &g.edges {
                    println!("{}", serde_json::json!({ "record": "edge", "edge": e }));
                }
            }
        }
        return Ok(0);
    }
    let allowed = task.map(|t| bcer_core::contract::shipped_contract(t).allowed_tools);
    for spec in registry.specs() {
        if allowed.as_ref().is_some_and(|a| !a.contains(&spec.name)) {
            continue;
        }
        match format {
            Format::Text => {
                let args: Vec<String> = spec
                    .args
                    .iter()
                    .map(|(n, a)| format!("{n}{}:{:?}", if a.required { "" } else { "?" }, a.semantic_type))
                    .collect();
                let outs: Vec<String> = spec.outputs.iter().map(|(n, t)| format!("{n}:{t:?}")).collect();
                println!("{:<22} ({}) -> {}", spec.name, args.join(", "), outs.join(", "));
            }
            Format::Records => println!("{}", serde_json::json!({ "record": "tool", "tool": spec })),
        }
    }
    Ok(0)
}
