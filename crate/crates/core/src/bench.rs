//! Benchmark harness: runs every (task, controller, seed) cell, archives
//! traces and reduces scores into a short/long/total result table.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contract::{score_case, CaseScore, TaskContract};
use crate::controllers::{case_id_for, run_controller, ControllerKind, RunConfig};
use crate::sim_tools::{ChainClass, TaskId};
use crate::store::{case_scope, CaseState, TRACE_FILE};
use crate::trace::{read_trace, replay, EventBody, TraceEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub task: TaskId,
    pub controller: ControllerKind,
    pub seed: u64,
    pub case_id: String,
    pub sr: u8,
    pub tcr: f64,
    pub validated: Vec<String>,
    pub dispatches: u32,
    #[serde(default)]
    pub escape_attempts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine_error: Option<String>,
    pub trace: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub n: usize,
    pub sr: f64,
    pub tcr: f64,
    pub sr_se: f64,
    pub tcr_se: f64,
}

impl CellStats {
    fn from_records<'a>(records: impl Iterator<Item = &'a CaseRecord>) -> Self {
        let (srs, tcrs): (Vec<f64>, Vec<f64>) = records.map(|r| (f64::from(r.sr), r.tcr)).unzip();
        let n = srs.len();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let se = |v: &[f64], m: f64| {
            if v.len() < 2 {
                0.0
            } else {
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 / v.len() as f64).sqrt()
            }
        };
        let (sr, tcr) = (mean(&srs), mean(&tcrs));
        Self {
            n,
            sr,
            tcr,
            sr_se: se(&srs, sr),
            tcr_se: se(&tcrs, tcr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub tasks: Vec<TaskId>,
    pub controllers: Vec<ControllerKind>,
    pub records: Vec<CaseRecord>,
}

impl ResultTable {
    pub fn cell(&self, task: TaskId, kind: ControllerKind) -> CellStats {
        CellStats::from_records(self.records.iter().filter(|r| r.task == task && r.controller == kind))
    }

    /// Mean over all cases of a chain class (cases weighted equally).
    pub fn group(&self, class: ChainClass, kind: ControllerKind) -> CellStats {
        CellStats::from_records(self.records.iter().filter(|r| r.task.chain_class() == class && r.controller == kind))
    }

    pub fn total(&self, kind: ControllerKind) -> CellStats {
        CellStats::from_records(self.records.iter().filter(|r| r.controller == kind))
    }

    pub fn record(&self, task: TaskId, kind: ControllerKind, seed: u64) -> Option<&CaseRecord> {
        self.records.iter().find(|r| r.task == task && r.controller == kind && r.seed == seed)
    }

    /// Aligned text table: one SR/TCR column pair per controller.
    pub fn render_text(&self) -> String {
        let pct = |x: f64| format!("{:.0}", x * 100.0);
        let width = 16;
        let mut out = format!("{:<22}", "Task");
        for k in &self.controllers {
            out.push_str(&format!("{:>width$}", k.label()));
        }
        out.push('\n');
        out.push_str(&format!("{:<22}", ""));
        for _ in &self.controllers {
            out.push_str(&format!("{:>width$}", "SR/TCR"));
        }
        out.push('\n');
        let row = |label: &str, stats: &dyn Fn(ControllerKind) -> CellStats| {
            let mut line = format!("{label:<22}");
            for k in &self.controllers {
                let s = stats(*k);
                line.push_str(&format!("{:>width$}", format!("{}/{}", pct(s.sr), pct(s.tcr))));
            }
            line.push('\n');
            line
        };
        for (class, name) in [(ChainClass::Short, "Short chain"), (ChainClass::Long, "Long chain")] {
            let tasks: Vec<TaskId> = self.tasks.iter().copied().filter(|t| t.chain_class() == class).collect();
            if tasks.is_empty() {
                continue;
            }
            out.push_str(&format!("{name}\n"));
            for t in tasks {
                out.push_str(&row(&format!("  {}", t.row_label()), &|k| self.cell(t, k)));
            }
            out.push_str(&row(&format!("  {name} mean"), &|k| self.group(class, k)));
        }
        out.push_str(&row("Total", &|k| self.total(k)));
        out
    }

    /// One JSON record per case, then one per aggregate cell.
    pub fn render_records(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&serde_json::json!({ "record": "case", "case": r })).expect("serializes"));
            out.push('\n');
        }
        for k in &self.controllers {
            for t in &self.tasks {
                let c = self.cell(*t, *k);
                out.push_str(&cell_line("task", &t.to_string(), *k, &c));
            }
            for (class, name) in [(ChainClass::Short, "short"), (ChainClass::Long, "long")] {
                let c = self.group(class, *k);
                if c.n > 0 {
                    out.push_str(&cell_line("group", name, *k, &c));
                }
            }
            out.push_str(&cell_line("group", "total", *k, &self.total(*k)));
        }
        out
    }
}

fn cell_line(kind: &str, name: &str, controller: ControllerKind, c: &CellStats) -> String {
    let mut s = serde_json::to_string(&serde_json::json!({
        "record": kind,
        "name": name,
        "controller": controller,
        "n": c.n,
        "sr": c.sr,
        "tcr": c.tcr,
        "sr_se": c.sr_se,
        "tcr_se": c.tcr_se,
    }))
    .expect("serializes");
    s.push('\n');
    s
}

pub fn archive_workdir(archive: &Path, kind: ControllerKind) -> PathBuf {
    archive.join(kind.slug())
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".to_string())
}

/// Closes out the trace of a crashed case with EngineError and CaseFinished.
fn record_crash(scope: &Path, case_id: &str, contract: &TaskContract, message: &str) -> io::Result<()> {
    fs::create_dir_all(scope)?;
    let path = scope.join(TRACE_FILE);
    let text = fs::read_to_string(&path).unwrap_or_default();
    let mut next = text.lines().filter(|l| serde_json::from_str::<TraceEvent>(l).is_ok()).count() as u64;
    let fresh = next == 0;
    let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
    let mut emit = |node: Option<String>, body: EventBody| -> io::Result<()> {
        let e = TraceEvent {
            seq_no: next,
            timestamp: 0,
            case_id: case_id.to_string(),
            node_id: node,
            body,
        };
        next += 1;
        writeln!(file, "{}", serde_json::to_string(&e).map_err(io::Error::other)?)
    };
    if fresh {
        emit(
            None,
            EventBody::CaseStarted {
                controller: "unknown".into(),
                seed: 0,
                contract: contract.clone(),
            },
        )?;
    }
    emit(
        None,
        EventBody::EngineError {
            message: message.to_string(),
        },
    )?;
    emit(
        None,
        EventBody::CaseFinished {
            statuses: BTreeMap::new(),
            score: CaseScore::failed(contract.milestones.len()),
        },
    )
}

/// Runs one cell, converting crashes into a failed record.
pub fn run_cell(kind: ControllerKind, contract: &TaskContract, config: &RunConfig, archive: &Path, seed: u64) -> CaseRecord {
    let workdir = archive_workdir(archive, kind);
    let case_id = case_id_for(contract, seed);
    let scope = case_scope(&workdir, &case_id);
    let result = catch_unwind(AssertUnwindSafe(|| run_controller(kind, contract, config, &workdir, seed)));
    let failure = match result {
        Ok(Ok(outcome)) => {
            return CaseRecord {
                task: contract.task,
                controller: kind,
                seed,
                case_id,
                sr: outcome.score.sr,
                tcr: outcome.score.tcr,
                validated: outcome.score.validated_milestones.iter().cloned().collect(),
                dispatches: outcome.dispatches,
                escape_attempts: outcome.escape_attempts.len(),
                engine_error: outcome.engine_error.clone(),
                trace: outcome.trace_path(),
            }
        }
        Ok(Err(e)) => format!("io: {e}"),
        Err(payload) => format!("panic: {}", panic_message(payload.as_ref())),
    };
    let _ = record_crash(&scope, &case_id, contract, &failure);
    CaseRecord {
        task: contract.task,
        controller: kind,
        seed,
        case_id,
        sr: 0,
        tcr: 0.0,
        validated: Vec::new(),
        dispatches: 0,
        escape_attempts: 0,
        engine_error: Some(failure),
        trace: scope.join(TRACE_FILE),
    }
}

/// Runs the whole suite. `jobs = 0` uses rayon's default pool size.
pub fn run_benchmark(
    suite: &[TaskContract],
    kinds: &[ControllerKind],
    seeds: Range<u64>,
    config: &RunConfig,
    archive: &Path,
    jobs: usize,
) -> io::Result<ResultTable> {
    fs::create_dir_all(archive)?;
    let cells: Vec<(ControllerKind, &TaskContract, u64)> = kinds
        .iter()
        .flat_map(|k| {
            let seeds = seeds.clone();
            suite.iter().flat_map(move |c| seeds.clone().map(move |s| (*k, c, s)))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(io::Error::other)?;
    let mut records: Vec<CaseRecord> =
        pool.install(|| cells.par_iter().map(|(k, c, s)| run_cell(*k, c, config, archive, *s)).collect());
    records.sort_by_key(|r| (r.controller, r.task, r.seed));
    let mut tasks: Vec<TaskId> = suite.iter().map(|c| c.task).collect();
    tasks.sort();
    tasks.dedup();
    let table = ResultTable {
        tasks,
        controllers: kinds.to_vec(),
        records,
    };
    fs::write(archive.join("results.jsonl"), table.render_records())?;
    fs::write(archive.join("table.txt"), table.render_text())?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayCheck {
    pub trace: PathBuf,
    pub statuses_match: bool,
    pub score_matches: bool,
    pub first_divergence: Option<String>,
}

/// Replays one archived trace and re-scores it from the saved state record.
pub fn check_archived_case(trace_path: &Path) -> Result<ReplayCheck, crate::trace::TraceError> {
    let events = read_trace(trace_path)?;
    let r = replay(&events);
    let contract = events.iter().find_map(|e| match &e.body {
        EventBody::CaseStarted { contract, .. } => Some(contract.clone()),
        _ => None,
    });
    let scope = trace_path.parent().unwrap_or(Path::new("."));
    let score_matches = match (contract, &r.archived_score) {
        (Some(contract), Some(archived)) => {
            let crashed = events.iter().any(|e| matches!(e.body, EventBody::EngineError { .. }));
            if crashed {
                archived.sr == 0
            } else {
                let before_finish: Vec<TraceEvent> = events
                    .iter()
                    .take_while(|e| !matches!(e.body, EventBody::MilestoneValidated { .. } | EventBody::CaseFinished { .. }))
                    .cloned()
                    .collect();
                match CaseState::load_record(scope) {
                    Ok(mut state) => {
                        let (rescored, _) = score_case(&contract, &mut state, &before_finish);
                        rescored == *archived && r.rescored(contract.milestones.len()) == *archived
                    }
                    Err(_) => false,
                }
            }
        }
        _ => false,
    };
    Ok(ReplayCheck {
        trace: trace_path.to_path_buf(),
        statuses_match: r.matches(),
        score_matches,
        first_divergence: r.first_divergence(),
    })
}

/// Every trace file under an archive directory.
pub fn archived_traces(archive: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![archive.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for entry in entries.flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == TRACE_FILE) {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(task: TaskId, controller: ControllerKind, seed: u64, sr: u8, tcr: f64) -> CaseRecord {
        CaseRecord {
            task,
            controller,
            seed,
            case_id: format!("{}-{seed}", task.slug()),
            sr,
            tcr,
            validated: Vec::new(),
            dispatches: 0,
            escape_attempts: 0,
            engine_error: None,
            trace: PathBuf::new(),
        }
    }

    #[test]
    fn groups_weight_cases_equally() {
        let k = ControllerKind::Bcer;
        let table = ResultTable {
            tasks: vec![TaskId::Denoise, TaskId::BrainGrade, TaskId::CardiacRpt],
            controllers: vec![k],
            records: vec![
                record(TaskId::Denoise, k, 0, 1, 1.0),
                record(TaskId::Denoise, k, 1, 0, 0.5),
                record(TaskId::BrainGrade, k, 0, 1, 1.0),
                record(TaskId::CardiacRpt, k, 0, 0, 0.5),
            ],
        };
        let short = table.group(ChainClass::Short, k);
        assert_eq!((short.n, short.sr, short.tcr), (2, 0.5, 0.75));
        assert!((short.sr_se - 0.5).abs() < 1e-12);
        assert_eq!(table.group(ChainClass::Long, k).sr, 0.5);
        assert_eq!(table.total(k).n, 4);
        let text = table.render_text();
        assert!(text.contains("Denoise") && text.contains("50/75"));
        assert!(text.lines().last().unwrap().starts_with("Total"));
        assert_eq!(table.render_records().lines().count(), 4 + 3 + 3);
    }

    #[test]
    fn crash_closes_the_trace() {
        let dir = tempfile::tempdir().unwrap();
        let contract = crate::contract::shipped_contract(TaskId::Denoise);
        record_crash(dir.path(), "c", &contract, "panic: boom").unwrap();
        let events = read_trace(&dir.path().join(TRACE_FILE)).unwrap();
        assert_eq!(events.len(), 3);
        assert!(matches!(events[1].body, EventBody::EngineError { .. }));
        assert_eq!(replay(&events).archived_score.unwrap().sr, 0);
    }
}
