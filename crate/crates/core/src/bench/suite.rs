use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{run_episode, EngineConfig};
use crate::backend::{DecisionBackend, RemoteClient, RemoteConfig, ScriptedOracle};
use crate::device::{load_device, Device};
use crate::memory::{MemorySnapshot, MemoryStore};

use super::{compute_metrics, score_run, BenchError, Metrics, RunRecord, TaskDef};

/// A suite file: shared app specs plus task definition paths, all
/// relative to the suite file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    pub name: String,
    pub apps: Vec<String>,
    pub tasks: Vec<String>,
    /// Memory snapshot merged into every episode's fresh store.
    #[serde(default)]
    pub warm_start: Option<String>,
}

#[derive(Debug, Clone)]
pub enum BackendChoice {
    /// Each task's own script, or one script for every task.
    Scripted(Option<PathBuf>),
    Remote(Box<RemoteConfig>),
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub config: EngineConfig,
    pub backend: BackendChoice,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            config: EngineConfig::default(),
            backend: BackendChoice::Scripted(None),
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskRun {
    pub record: RunRecord,
    /// Merged episode log, one JSON event per line.
    pub log: String,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub suite: Suite,
    pub defs: Vec<TaskDef>,
    pub metrics: Metrics,
    pub records: Vec<RunRecord>,
    /// `(task_id, jsonl)` in suite order.
    pub logs: Vec<(String, String)>,
}

pub fn load_suite(path: &Path) -> Result<(Suite, Vec<TaskDef>), BenchError> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    let suite: Suite = serde_json::from_str(&text)
        .map_err(|e| BenchError::SuiteFormat(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut defs = Vec::with_capacity(suite.tasks.len());
    for rel in &suite.tasks {
        let mut def = TaskDef::load(&base.join(rel))?;
        // Spec paths are resolved here, against the suite or the task file.
        def.device_specs = if def.device_specs.is_empty() {
            suite.apps.iter().map(|a| base.join(a).display().to_string()).collect()
        } else {
            def.device_specs.iter().map(|a| def.resolve(a).display().to_string()).collect()
        };
        if defs.iter().any(|d: &TaskDef| d.task_id == def.task_id) {
            return Err(BenchError::SuiteFormat(format!("duplicate task id {}", def.task_id)));
        }
        defs.push(def);
    }
    Ok((suite, defs))
}

fn backend_for(def: &TaskDef, choice: &BackendChoice) -> Result<Box<dyn DecisionBackend>, String> {
    match choice {
        BackendChoice::Remote(cfg) => Ok(Box::new(RemoteClient::new((**cfg).clone()))),
        BackendChoice::Scripted(over) => {
            let path = match (over, &def.script) {
                (Some(p), _) => p.clone(),
                (None, Some(s)) => def.resolve(s),
                (None, None) => return Err("task has no script".into()),
            };
            ScriptedOracle::load(&path).map(|o| Box::new(o) as Box<dyn DecisionBackend>).map_err(|e| e.to_string())
        }
    }
}

fn failed_record(def: &TaskDef, error: String) -> RunRecord {
    RunRecord {
        task_id: def.task_id.clone(),
        task_type: def.task_type,
        milestones_achieved: vec![false; def.milestones.len()],
        step_of_milestone: BTreeMap::new(),
        total_steps: 0,
        effective_steps: 0,
        status: "error".into(),
        error: Some(error),
        wall_time_ms: 0,
    }
}

/// Runs one task on an isolated device, memory and backend. Setup and
/// engine errors become an `error` record rather than a failure.
pub fn run_task(
    def: &TaskDef,
    device: &Device,
    options: &SuiteOptions,
    warm_start: Option<&MemorySnapshot>,
) -> TaskRun {
    let started = Instant::now();
    let attempt = || -> Result<TaskRun, String> {
        let mut device = device.fresh(def.seed.unwrap_or(options.seed));
        for d in &def.preparation {
            device.prepare(d).map_err(|e| format!("preparation: {e}"))?;
        }
        let mut memory = MemoryStore::default();
        if let Some(snap) = warm_start {
            memory.merge_snapshot(snap.clone()).map_err(|e| format!("warm start: {e}"))?;
        }
        let mut backend = backend_for(def, &options.backend)?;
        let mut config = options.config.clone();
        if let Some(b) = &def.budgets {
            config.budgets = *b;
        }
        let report = run_episode(&def.command, &mut device, backend.as_mut(), &mut memory, &config)
            .map_err(|e| e.to_string())?;
        let score = score_run(&report.device_log(), &def.milestones, def.ordered);
        let status = serde_json::to_value(report.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        Ok(TaskRun { record: score.into_record(def, &status), log: report.to_jsonl() })
    };
    let mut run = attempt().unwrap_or_else(|e| {
        tracing::warn!(task = %def.task_id, error = %e, "task failed");
        TaskRun { record: failed_record(def, e), log: String::new() }
    });
    run.record.wall_time_ms = started.elapsed().as_millis() as u64;
    run
}

/// Runs every task of a suite on `options.jobs` worker threads.
/// Results come back in suite order whatever the thread count.
pub fn run_suite(path: &Path, options: &SuiteOptions) -> Result<SuiteResult, BenchError> {
    let (suite, defs) = load_suite(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let warm = match &suite.warm_start {
        Some(rel) => {
            let p = base.join(rel);
            MemorySnapshot::load(&p).map_err(|e| BenchError::SuiteFormat(format!("{}: {e}", p.display())))?
        }
        None => None,
    };

    // One loaded device per distinct spec list; episodes clone it.
    let mut devices: BTreeMap<Vec<String>, Result<Device, String>> = BTreeMap::new();
    for def in &defs {
        devices.entry(def.device_specs.clone()).or_insert_with(|| {
            load_device(&def.device_specs, options.seed).map_err(|e| e.to_string())
        });
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs.max(1))
        .build()
        .map_err(|e| BenchError::SuiteFormat(format!("thread pool: {e}")))?;
    let runs: Vec<TaskRun> = pool.install(|| {
        defs.par_iter()
            .map(|def| match &devices[&def.device_specs] {
                Ok(device) => run_task(def, device, options, warm.as_ref()),
                Err(e) => TaskRun { record: failed_record(def, format!("device: {e}")), log: String::new() },
            })
            .collect()
    });

    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let logs = runs.into_iter().map(|r| (r.record.task_id, r.log)).collect();
    let metrics = compute_metrics(&records, &defs)?;
    Ok(SuiteResult { suite, defs, metrics, records, logs })
}
