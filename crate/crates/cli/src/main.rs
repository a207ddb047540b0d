//! `moba`: run episodes and benchmark suites on the simulated device.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use moba_core::agent::{run_episode, EngineConfig};
use moba_core::backend::{DecisionBackend, RemoteClient, RemoteConfig, ScriptedOracle};
use moba_core::bench::{
    device_log_from_jsonl, render_markdown, run_suite, score_run, write_report, BackendChoice,
    Metrics, RunRecord, SuiteOptions, TaskDef,
};
use moba_core::device::load_device;
use moba_core::memory::MemoryStore;
use moba_core::vh::{annotate, observe_xml, DistillConfig};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "moba", version, about = "Hierarchical mobile agent on a simulated device")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark suites.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Run a single task definition and print its scored record.
    Run(RunArgs),
    /// Distill a view-hierarchy XML dump into indexed elements.
    Distill(DistillArgs),
}

#[derive(Args)]
struct DistillArgs {
    xml: PathBuf,
    #[arg(long, default_value_t = 1080)]
    width: u32,
    #[arg(long, default_value_t = 2400)]
    height: u32,
    /// Distiller thresholds as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the element list as JSON.
    #[arg(long)]
    json_out: Option<PathBuf>,
    /// Write index overlay instructions as JSON.
    #[arg(long)]
    overlay_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run every task of a suite and report metrics.
    Run {
        suite: PathBuf,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Write metrics, records, report and logs here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved episode log against a task definition.
    Score { log: PathBuf, taskdef: PathBuf },
    /// Re-render the report of an output directory.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct EngineArgs {
    /// Send empty retrieved memory with every request.
    #[arg(long)]
    no_memory: bool,
    /// Act on the top-level goal without decomposition.
    #[arg(long)]
    no_plan: bool,
    /// `scripted`, `scripted:<file>` or `remote`.
    #[arg(long, default_value = "scripted")]
    backend: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Engine settings as JSON; flags above take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    taskdef: PathBuf,
    #[command(flatten)]
    engine: EngineArgs,
    /// App specs, when the task does not list its own.
    #[arg(long = "app")]
    apps: Vec<PathBuf>,
    /// Memory file loaded before and saved after the episode.
    #[arg(long)]
    memory: Option<PathBuf>,
    /// Write the merged episode log (JSONL) here.
    #[arg(long)]
    log: Option<PathBuf>,
}

impl EngineArgs {
    fn engine_config(&self) -> Result<EngineConfig> {
        let mut config = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)
                .with_context(|| format!("{}: invalid engine config", p.display()))?,
            None => EngineConfig::default(),
        };
        config.memory &= !self.no_memory;
        config.plan &= !self.no_plan;
        Ok(config)
    }

    fn backend(&self) -> Result<BackendChoice> {
        match self.backend.as_str() {
            "scripted" => Ok(BackendChoice::Scripted(None)),
            "remote" => Ok(BackendChoice::Remote(Box::new(RemoteConfig::from_env()))),
            other => match other.strip_prefix("scripted:") {
                Some(file) => Ok(BackendChoice::Scripted(Some(PathBuf::from(file)))),
                None => bail!("unknown backend {other:?}; use scripted, scripted:<file> or remote"),
            },
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn bench_run(suite: &Path, engine: &EngineArgs, jobs: usize, out: Option<&Path>) -> Result<()> {
    let options = SuiteOptions { config: engine.engine_config()?, backend: engine.backend()?, seed: engine.seed, jobs };
    let result = run_suite(suite, &options)?;
    if let Some(dir) = out {
        write_report(dir, &result.metrics, &result.records, &result.logs)?;
        eprintln!("wrote {}", dir.display());
    }
    print!("{}", render_markdown(&result.metrics, &result.records));
    Ok(())
}

fn bench_score(log: &Path, taskdef: &Path) -> Result<()> {
    let def = TaskDef::load(taskdef)?;
    let text = std::fs::read_to_string(log).with_context(|| log.display().to_string())?;
    let entries = device_log_from_jsonl(&text)?;
    print_json(&score_run(&entries, &def.milestones, def.ordered).into_record(&def, "scored"))
}

fn bench_report(dir: &Path) -> Result<()> {
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        std::fs::read_to_string(&p).with_context(|| p.display().to_string())
    };
    let metrics: Metrics = serde_json::from_str(&read("metrics.json")?).context("metrics.json")?;
    let records: Vec<RunRecord> = serde_json::from_str(&read("records.json")?).context("records.json")?;
    let report = render_markdown(&metrics, &records);
    std::fs::write(dir.join("report.md"), &report)?;
    print!("{report}");
    Ok(())
}

fn run_task(args: &RunArgs) -> Result<()> {
    let def = TaskDef::load(&args.taskdef)?;
    let apps: Vec<PathBuf> = if def.device_specs.is_empty() {
        args.apps.clone()
    } else {
        def.device_specs.iter().map(|p| def.resolve(p)).collect()
    };
    if apps.is_empty() {
        bail!("task {} lists no app specs; pass --app", def.task_id);
    }
    let seed = def.seed.unwrap_or(args.engine.seed);
    let mut device = load_device(&apps, seed)?;
    for d in &def.preparation {
        device.prepare(d)?;
    }
    let mut backend: Box<dyn DecisionBackend> = match args.engine.backend()? {
        BackendChoice::Remote(cfg) => Box::new(RemoteClient::new(*cfg)),
        BackendChoice::Scripted(over) => {
            let path = match (over, &def.script) {
                (Some(p), _) => p,
                (None, Some(s)) => def.resolve(s),
                (None, None) => bail!("task {} has no script; pass --backend scripted:<file>", def.task_id),
            };
            Box::new(ScriptedOracle::load(&path)?)
        }
    };
    let mut memory = MemoryStore::default();
    if let Some(p) = args.memory.as_deref().filter(|p| p.exists()) {
        memory.warm_start(p)?;
    }
    let mut config = args.engine.engine_config()?;
    if let Some(b) = &def.budgets {
        config.budgets = *b;
    }
    let report = run_episode(&def.command, &mut device, backend.as_mut(), &mut memory, &config)?;
    if let Some(p) = &args.memory {
        memory.save(p)?;
    }
    if let Some(p) = &args.log {
        std::fs::write(p, report.to_jsonl()).with_context(|| p.display().to_string())?;
    }
    let status = serde_json::to_value(report.status)?;
    let record = score_run(&report.device_log(), &def.milestones, def.ordered)
        .into_record(&def, status.as_str().unwrap_or_default());
    print_json(&record)
}

fn distill(args: &DistillArgs) -> Result<()> {
    let bytes = std::fs::read(&args.xml).with_context(|| args.xml.display().to_string())?;
    let config: DistillConfig = match &args.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)
            .with_context(|| format!("{}: invalid distiller config", p.display()))?,
        None => DistillConfig::default(),
    };
    let label = args.xml.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned());
    let obs = observe_xml(&bytes, label, String::new(), (args.width, args.height), &config)?;
    if let Some(p) = &args.json_out {
        std::fs::write(p, serde_json::to_string_pretty(&obs.elements)? + "\n")?;
    }
    if let Some(p) = &args.overlay_out {
        std::fs::write(p, serde_json::to_string_pretty(&annotate(&obs.elements))? + "\n")?;
    }
    print!("{}", obs.to_prompt_text());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .with_writer(std::io::stderr)
        .init();

    match cli.command {
        Command::Bench(BenchCommand::Run { suite, engine, jobs, out }) => bench_run(&suite, &engine, jobs, out.as_deref()),
        Command::Bench(BenchCommand::Score { log, taskdef }) => bench_score(&log, &taskdef),
        Command::Bench(BenchCommand::Report { dir }) => bench_report(&dir),
        Command::Run(args) => run_task(&args),
        Command::Distill(args) => distill(&args),
    }
}
