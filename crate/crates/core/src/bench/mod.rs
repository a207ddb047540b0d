//! Milestone-scored task suites: scoring from device logs, aggregate
//! metrics, reports and the suite runner.

mod report;
mod suite;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use glob::Pattern;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Budgets, EngineEvent, Phase};
use crate::device::{Directive, LogEntry};

pub use report::{format_ee, format_ms, percent, render_markdown, write_report};
pub use suite::{load_suite, run_suite, run_task, BackendChoice, Suite, SuiteOptions, SuiteResult, TaskRun};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("suite format error: {0}")]
    SuiteFormat(String),
    #[error("no run record for task {0}")]
    MissingRecord(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl BenchError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        BenchError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskType {
    Easy,
    Medium,
    Hard,
    Indirect,
    CrossApp,
}

impl TaskType {
    pub const ALL: [TaskType; 5] =
        [TaskType::Easy, TaskType::Medium, TaskType::Hard, TaskType::Indirect, TaskType::CrossApp];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Easy => "Easy",
            TaskType::Medium => "Medium",
            TaskType::Hard => "Hard",
            TaskType::Indirect => "Indirect",
            TaskType::CrossApp => "CrossApp",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A checkpoint decided from the device log alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MilestonePredicate {
    /// Screen label (`package/screen`) or screen key shown after a step.
    ScreenVisited(String),
    VarEquals { app: String, name: String, value: String },
    EventFired {
        name: String,
        /// Every listed detail must match.
        #[serde(default)]
        detail: BTreeMap<String, String>,
    },
    /// Glob over the canonical action text of a step that took effect.
    ActionExecuted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestone {
    pub label: String,
    pub kind: MilestonePredicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDef {
    pub task_id: String,
    pub task_type: TaskType,
    pub command: String,
    #[serde(default)]
    pub preparation: Vec<Directive>,
    pub milestones: Vec<Milestone>,
    /// Expert step count for the whole task.
    #[serde(default)]
    pub human_steps: Option<f64>,
    /// Score milestones only in sequence.
    #[serde(default)]
    pub ordered: bool,
    /// App specs; the suite's apps when empty.
    #[serde(default)]
    pub device_specs: Vec<String>,
    /// Oracle script for the scripted backend.
    #[serde(default)]
    pub script: Option<String>,
    #[serde(default)]
    pub budgets: Option<Budgets>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl TaskDef {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| BenchError::SuiteFormat(format!("task {}: {m}", self.task_id));
        if !(1..=6).contains(&self.milestones.len()) {
            return Err(bad(format!("needs 1 to 6 milestones, has {}", self.milestones.len())));
        }
        for m in &self.milestones {
            if let MilestonePredicate::ActionExecuted(p) = &m.kind {
                Pattern::new(p).map_err(|e| bad(format!("milestone {:?}: {e}", m.label)))?;
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, BenchError> {
        let mut def: TaskDef =
            serde_json::from_str(text).map_err(|e| BenchError::SuiteFormat(e.to_string()))?;
        def.base_dir = base_dir.to_path_buf();
        def.validate()?;
        Ok(def)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
            .map_err(|e| BenchError::SuiteFormat(format!("{}: {e}", path.display())))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }
}

/// Per-task scoring outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_id: String,
    pub task_type: TaskType,
    pub milestones_achieved: Vec<bool>,
    /// Milestone label to the step it was first achieved at.
    pub step_of_milestone: BTreeMap<String, u64>,
    pub total_steps: u64,
    /// Step of the last achieved milestone, 0 when none.
    pub effective_steps: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub wall_time_ms: u64,
}

impl RunRecord {
    pub fn achieved(&self) -> usize {
        self.milestones_achieved.iter().filter(|a| **a).count()
    }

    pub fn complete(&self) -> bool {
        !self.milestones_achieved.is_empty() && self.milestones_achieved.iter().all(|a| *a)
    }
}

/// Milestone results of one log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Score {
    pub achieved: Vec<bool>,
    pub step_of: Vec<Option<u64>>,
    pub total_steps: u64,
    pub effective_steps: u64,
}

impl Score {
    pub fn into_record(self, def: &TaskDef, status: &str) -> RunRecord {
        let step_of_milestone = def
            .milestones
            .iter()
            .zip(&self.step_of)
            .filter_map(|(m, s)| s.map(|s| (m.label.clone(), s)))
            .collect();
        RunRecord {
            task_id: def.task_id.clone(),
            task_type: def.task_type,
            milestones_achieved: self.achieved,
            step_of_milestone,
            total_steps: self.total_steps,
            effective_steps: self.effective_steps,
            status: status.to_string(),
            error: None,
            wall_time_ms: 0,
        }
    }
}

/// Steps (ascending) at which `predicate` holds.
fn holding_steps(log: &[LogEntry], predicate: &MilestonePredicate) -> Vec<u64> {
    match predicate {
        MilestonePredicate::ScreenVisited(s) => log
            .iter()
            .filter(|e| {
                e.screen_after == *s
                    || e.screen_key_after == *s
                    || e.screen_after.split('!').next() == Some(s.as_str())
            })
            .map(|e| e.step)
            .collect(),
        MilestonePredicate::VarEquals { app, name, value } => {
            let mut current: Option<String> = None;
            let mut out = Vec::new();
            for e in log {
                for ev in e.events.iter().filter(|ev| ev.kind == "var_set") {
                    if ev.get("app") == Some(app) && ev.get("var") == Some(name) {
                        current = ev.get("value").map(str::to_string);
                    }
                }
                if current.as_deref() == Some(value.as_str()) {
                    out.push(e.step);
                }
            }
            out
        }
        MilestonePredicate::EventFired { name, detail } => log
            .iter()
            .filter(|e| {
                e.events.iter().any(|ev| {
                    ev.kind == *name && detail.iter().all(|(k, v)| ev.get(k) == Some(v.as_str()))
                })
            })
            .map(|e| e.step)
            .collect(),
        MilestonePredicate::ActionExecuted(p) => match Pattern::new(p) {
            Ok(pat) => log
                .iter()
                .filter(|e| e.error.is_none() && pat.matches(&e.action))
                .map(|e| e.step)
                .collect(),
            Err(_) => Vec::new(),
        },
    }
}

/// Scores a device log against milestones. Each milestone counts at the
/// first step where it holds; with `ordered`, not before its predecessor.
pub fn score_run(log: &[LogEntry], milestones: &[Milestone], ordered: bool) -> Score {
    let mut step_of = Vec::with_capacity(milestones.len());
    let mut floor = Some(0u64);
    for m in milestones {
        let steps = holding_steps(log, &m.kind);
        let hit = if ordered {
            floor.and_then(|f| steps.into_iter().find(|s| *s >= f))
        } else {
            steps.into_iter().next()
        };
        if ordered {
            floor = hit;
        }
        step_of.push(hit);
    }
    Score {
        achieved: step_of.iter().map(Option::is_some).collect(),
        effective_steps: step_of.iter().flatten().copied().max().unwrap_or(0),
        total_steps: log.last().map_or(0, |e| e.step),
        step_of,
    }
}

/// Pulls device entries out of a merged line-delimited episode log.
pub fn device_log_from_jsonl(text: &str) -> Result<Vec<LogEntry>, BenchError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let event: EngineEvent = serde_json::from_str(line)
            .map_err(|e| BenchError::SuiteFormat(format!("log line {}: {e}", i + 1)))?;
        if event.phase == Phase::Device {
            let entry = serde_json::from_value(event.payload)
                .map_err(|e| BenchError::SuiteFormat(format!("log line {}: {e}", i + 1)))?;
            out.push(entry);
        }
    }
    Ok(out)
}

/// Aggregates over a group of tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub tasks: usize,
    pub milestones_total: usize,
    /// Milestone score: achieved milestones.
    pub ms: usize,
    /// Tasks with every milestone achieved.
    pub completed: usize,
    pub cr: f64,
    pub effective_steps: u64,
    /// Effective steps per achieved milestone; absent when none achieved.
    pub ee: Option<f64>,
    /// Expert steps per milestone, when every task has a baseline.
    pub human_ee: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub by_type: BTreeMap<TaskType, GroupMetrics>,
    pub overall: GroupMetrics,
}

fn group(rows: &[(&TaskDef, &RunRecord)]) -> GroupMetrics {
    let tasks = rows.len();
    let milestones_total: usize = rows.iter().map(|(d, _)| d.milestones.len()).sum();
    let ms: usize = rows.iter().map(|(_, r)| r.achieved()).sum();
    let completed = rows.iter().filter(|(_, r)| r.complete()).count();
    let effective_steps: u64 = rows.iter().map(|(_, r)| r.effective_steps).sum();
    let human: Option<f64> = rows.iter().map(|(d, _)| d.human_steps).sum();
    GroupMetrics {
        tasks,
        milestones_total,
        ms,
        completed,
        cr: if tasks == 0 { 0.0 } else { completed as f64 / tasks as f64 },
        effective_steps,
        ee: (ms > 0).then(|| effective_steps as f64 / ms as f64),
        human_ee: human.filter(|_| milestones_total > 0 && tasks > 0).map(|h| h / milestones_total as f64),
    }
}

/// Groups records by task type and overall. Every definition needs a record.
pub fn compute_metrics(records: &[RunRecord], defs: &[TaskDef]) -> Result<Metrics, BenchError> {
    let by_id: BTreeMap<&str, &RunRecord> = records.iter().map(|r| (r.task_id.as_str(), r)).collect();
    let rows = defs
        .iter()
        .map(|d| {
            by_id
                .get(d.task_id.as_str())
                .map(|r| (d, *r))
                .ok_or_else(|| BenchError::MissingRecord(d.task_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let by_type = TaskType::ALL
        .iter()
        .filter_map(|t| {
            let subset: Vec<_> = rows.iter().filter(|(d, _)| d.task_type == *t).copied().collect();
            (!subset.is_empty()).then(|| (*t, group(&subset)))
        })
        .collect();
    Ok(Metrics { by_type, overall: group(&rows) })
}
