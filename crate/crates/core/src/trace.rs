//! Append-only per-case event trace, stored as JSON lines.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{CompileError, Edge};
use crate::contract::{CaseScore, MilestoneResult, TaskContract};
use crate::reflector::{RepairPatch, RepairStage};
use crate::registry::ErrorCode;
use crate::sketch::PlanSketch;
use crate::store::{BadRefKind, NodeStatus};
use crate::value::{ArgValue, BoundValue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    CaseStarted {
        controller: String,
        seed: u64,
        contract: TaskContract,
    },
    SketchProduced {
        attempt: u32,
        sketch: PlanSketch,
    },
    Compiled {
        execution_order: Vec<String>,
        edges: Vec<Edge>,
        required: Vec<String>,
    },
    CompileFailed {
        attempt: u32,
        errors: Vec<CompileError>,
    },
    NodeDispatched {
        tool: String,
        attempt: u32,
        args: BTreeMap<String, ArgValue>,
    },
    BindFailed {
        arg: String,
        token: String,
        reason: BadRefKind,
        code: ErrorCode,
    },
    NodeSucceeded {
        tool: String,
        /// Canonical argument values the outputs were derived from.
        inputs: BTreeMap<String, String>,
        outputs: BTreeMap<String, BoundValue>,
    },
    NodeFailed {
        tool: String,
        code: ErrorCode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        arg: Option<String>,
        message: String,
    },
    RepairProposed {
        patch: RepairPatch,
        affected: Vec<String>,
    },
    RepairApplied {
        stage: RepairStage,
        patch: RepairPatch,
        affected: Vec<String>,
        /// Output digests of every other succeeded node at apply time.
        preserved: BTreeMap<String, Vec<String>>,
    },
    RepairRejected {
        stage: RepairStage,
        reason: String,
    },
    NodeAbandoned {
        reason: String,
    },
    MilestoneValidated {
        result: MilestoneResult,
    },
    CaseFinished {
        statuses: BTreeMap<String, NodeStatus>,
        score: CaseScore,
    },
    EngineError {
        message: String,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::CaseStarted { .. } => "CaseStarted",
            EventBody::SketchProduced { .. } => "SketchProduced",
            EventBody::Compiled { .. } => "Compiled",
            EventBody::CompileFailed { .. } => "CompileFailed",
            EventBody::NodeDispatched { .. } => "NodeDispatched",
            EventBody::BindFailed { .. } => "BindFailed",
            EventBody::NodeSucceeded { .. } => "NodeSucceeded",
            EventBody::NodeFailed { .. } => "NodeFailed",
            EventBody::RepairProposed { .. } => "RepairProposed",
            EventBody::RepairApplied { .. } => "RepairApplied",
            EventBody::RepairRejected { .. } => "RepairRejected",
            EventBody::NodeAbandoned { .. } => "NodeAbandoned",
            EventBody::MilestoneValidated { .. } => "MilestoneValidated",
            EventBody::CaseFinished { .. } => "CaseFinished",
            EventBody::EngineError { .. } => "EngineError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq_no: u64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub case_id: String,
    #[serde(default)]
    pub node_id: Option<String>,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed trace at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or_default()
}

/// Writer for one case's trace. Each append is flushed before returning.
#[derive(Debug)]
pub struct Trace {
    case_id: String,
    path: Option<PathBuf>,
    file: Option<File>,
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn create(path: &Path, case_id: &str) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self {
            case_id: case_id.to_string(),
            path: Some(path.to_path_buf()),
            file: Some(file),
            events: Vec::new(),
        })
    }

    /// Trace kept only in memory.
    pub fn in_memory(case_id: &str) -> Self {
        Self {
            case_id: case_id.to_string(),
            path: None,
            file: None,
            events: Vec::new(),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }

    pub fn append(&mut self, node_id: Option<&str>, body: EventBody) -> io::Result<&TraceEvent> {
        let event = TraceEvent {
            seq_no: self.events.len() as u64,
            timestamp: now_ms(),
            case_id: self.case_id.clone(),
            node_id: node_id.map(str::to_string),
            body,
        };
        if let Some(file) = &mut self.file {
            let mut line = serde_json::to_string(&event).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.events.push(event);
        Ok(self.events.last().expect("just pushed"))
    }
}

/// Reads a trace file, checking sequence numbering and completeness.
pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>, TraceError> {
    let reader = BufReader::new(File::open(path)?);
    let mut events: Vec<TraceEvent> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: TraceEvent = serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if event.seq_no != events.len() as u64 {
            return Err(TraceError::Malformed {
                line: i + 1,
                reason: format!("expected seq_no {}, found {}", events.len(), event.seq_no),
            });
        }
        events.push(event);
    }
    match events.first().map(|e| &e.body) {
        Some(EventBody::CaseStarted { .. }) => {}
        _ => {
            return Err(TraceError::Malformed {
                line: 1,
                reason: "trace does not begin with CaseStarted".into(),
            })
        }
    }
    if !matches!(events.last().map(|e| &e.body), Some(EventBody::CaseFinished { .. })) {
        return Err(TraceError::Malformed {
            line: events.len(),
            reason: "trace is truncated (no CaseFinished)".into(),
        });
    }
    Ok(events)
}

/// Zeroes timestamps so traces compare byte-for-byte.
pub fn normalize(events: &[TraceEvent]) -> Vec<TraceEvent> {
    events
        .iter()
        .cloned()
        .map(|mut e| {
            e.timestamp = 0;
            e
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub statuses: BTreeMap<String, NodeStatus>,
    /// Output digests of nodes that ended Succeeded.
    pub output_digests: BTreeMap<String, BTreeMap<String, String>>,
    pub archived_statuses: Option<BTreeMap<String, NodeStatus>>,
    pub archived_score: Option<CaseScore>,
    pub milestone_results: Vec<MilestoneResult>,
}

impl Replay {
    /// First node whose replayed status differs from the archived one.
    pub fn first_divergence(&self) -> Option<String> {
        let archived = self.archived_statuses.as_ref()?;
        let keys: std::collections::BTreeSet<&String> = archived.keys().chain(self.statuses.keys()).collect();
        keys.into_iter().find(|k| archived.get(*k) != self.statuses.get(*k)).cloned()
    }

    pub fn matches(&self) -> bool {
        self.archived_statuses.as_ref() == Some(&self.statuses)
    }

    /// Score recomputed from the milestone verdicts recorded in the trace.
    pub fn rescored(&self, milestone_count: usize) -> CaseScore {
        let validated = self.milestone_results.iter().filter(|r| r.validated).map(|r| r.milestone_id.clone()).collect();
        CaseScore::from_validated(validated, milestone_count)
    }
}

/// Rebuilds final node statuses and output digests from events alone.
pub fn replay(events: &[TraceEvent]) -> Replay {
    let mut statuses: BTreeMap<String, NodeStatus> = BTreeMap::new();
    let mut digests: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut archived_statuses = None;
    let mut archived_score = None;
    let mut milestone_results = Vec::new();
    let mut repairs: BTreeMap<String, u32> = BTreeMap::new();
    for e in events {
        let node = e.node_id.clone().unwrap_or_default();
        match &e.body {
            EventBody::Compiled { execution_order, .. } => {
                for id in execution_order {
                    statuses.insert(id.clone(), NodeStatus::Pending);
                }
            }
            EventBody::NodeDispatched { .. } => {
                statuses.insert(node, NodeStatus::Running);
            }
            EventBody::NodeSucceeded { outputs, .. } => {
                let d = outputs
                    .iter()
                    .map(|(f, v)| (f.clone(), v.as_artifact().map(|a| a.content_digest.clone()).unwrap_or_else(|| v.canonical())))
                    .collect();
                digests.insert(node.clone(), d);
                statuses.insert(node, NodeStatus::Succeeded);
            }
            EventBody::NodeFailed { code, .. } | EventBody::BindFailed { code, .. } => {
                digests.remove(&node);
                statuses.insert(node, NodeStatus::Failed(*code));
            }
            EventBody::RepairApplied { affected, .. } => {
                for id in affected {
                    let n = repairs.entry(id.clone()).or_default();
                    *n += 1;
                    digests.remove(id);
                    statuses.insert(id.clone(), NodeStatus::Repaired(*n));
                }
            }
            EventBody::NodeAbandoned { .. } => {
                digests.remove(&node);
                statuses.insert(node, NodeStatus::Abandoned);
            }
            EventBody::MilestoneValidated { result } => milestone_results.push(result.clone()),
            EventBody::CaseFinished { statuses: s, score } => {
                archived_statuses = Some(s.clone());
                archived_score = Some(score.clone());
            }
            _ => {}
        }
    }
    Replay {
        statuses,
        output_digests: digests,
        archived_statuses,
        archived_score,
        milestone_results,
    }
}
