use std::fmt::Write as _;
use std::path::Path;

use super::{BenchError, GroupMetrics, Metrics, RunRecord};

/// `66.2%` style percentage with one decimal.
pub fn percent(num: f64, den: f64) -> String {
    if den == 0.0 {
        return "n/a".into();
    }
    format!("{:.1}%", 100.0 * num / den)
}

/// Milestone score with its share of the maximum, e.g. `88 (66.2%)`.
pub fn format_ms(ms: usize, max: usize) -> String {
    if max == 0 {
        return ms.to_string();
    }
    format!("{ms} ({})", percent(ms as f64, max as f64))
}

/// Efficiency with its ratio to the expert baseline, e.g. `3.44 (97.5%)`.
pub fn format_ee(ee: Option<f64>, human: Option<f64>) -> String {
    match (ee, human) {
        (None, _) => "-".into(),
        (Some(e), Some(h)) if h > 0.0 => format!("{e:.2} ({})", percent(e, h)),
        (Some(e), _) => format!("{e:.2}"),
    }
}

fn row(out: &mut String, name: &str, g: &GroupMetrics) {
    let human = g.human_ee.map_or("-".into(), |h| format!("{h:.2}"));
    let _ = writeln!(
        out,
        "| {name} | {} | {}/{} | {} | {} | {human} |",
        g.tasks,
        g.completed,
        g.tasks,
        format_ms(g.ms, g.milestones_total),
        format_ee(g.ee, g.human_ee),
    );
}

pub fn render_markdown(metrics: &Metrics, records: &[RunRecord]) -> String {
    let mut out = String::from("# Benchmark report\n\n");
    out.push_str("| Type | Tasks | CR | MS | EE | Expert EE |\n|---|---|---|---|---|---|\n");
    for (t, g) in &metrics.by_type {
        row(&mut out, t.as_str(), g);
    }
    row(&mut out, "Overall", &metrics.overall);
    out.push_str("\n## Tasks\n\n| Task | Type | Milestones | Steps | Effective | Status |\n|---|---|---|---|---|---|\n");
    for r in records {
        let _ = writeln!(
            out,
            "| {} | {} | {}/{} | {} | {} | {} |",
            r.task_id,
            r.task_type,
            r.achieved(),
            r.milestones_achieved.len(),
            r.total_steps,
            r.effective_steps,
            r.error.as_deref().map_or(r.status.clone(), |e| format!("{} ({e})", r.status)),
        );
    }
    out
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn write(path: &Path, contents: &str) -> Result<(), BenchError> {
    std::fs::write(path, contents).map_err(|e| BenchError::io(path, e))
}

/// Writes `metrics.json`, `records.json`, `report.md`, `per_task.csv` and
/// one `logs/<task>.jsonl` per entry of `logs`.
pub fn write_report(
    dir: &Path,
    metrics: &Metrics,
    records: &[RunRecord],
    logs: &[(String, String)],
) -> Result<(), BenchError> {
    let logs_dir = dir.join("logs");
    std::fs::create_dir_all(&logs_dir).map_err(|e| BenchError::io(&logs_dir, e))?;
    write(&dir.join("metrics.json"), &pretty(metrics))?;
    write(&dir.join("records.json"), &pretty(&records))?;
    write(&dir.join("report.md"), &render_markdown(metrics, records))?;

    let csv_path = dir.join("per_task.csv");
    let mut w = csv::Writer::from_path(&csv_path)
        .map_err(|e| BenchError::SuiteFormat(format!("{}: {e}", csv_path.display())))?;
    let csv_err = |e: csv::Error| BenchError::SuiteFormat(format!("{}: {e}", csv_path.display()));
    w.write_record(["task_id", "task_type", "milestones", "achieved", "total_steps", "effective_steps", "status"])
        .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.task_id.clone(),
            r.task_type.to_string(),
            r.milestones_achieved.len().to_string(),
            r.achieved().to_string(),
            r.total_steps.to_string(),
            r.effective_steps.to_string(),
            r.status.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| BenchError::io(&csv_path, e))?;

    for (task_id, jsonl) in logs {
        write(&logs_dir.join(format!("{task_id}.jsonl")), jsonl)?;
    }
    Ok(())
}
