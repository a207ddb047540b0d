use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn moba(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_moba")).args(args).output().expect("spawn moba");
    assert!(out.status.success(), "moba {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn text(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bench_run_writes_a_report_that_re_renders_identically() {
    let dir = tempfile::tempdir().unwrap();
    let suite = fixtures().join("suite.json");
    let out = text(&moba(&["bench", "run", arg(&suite), "--jobs", "4", "--out", arg(dir.path())]));
    assert!(out.contains("| Overall | 12 | 12/12 |"), "{out}");
    for f in ["metrics.json", "records.json", "report.md", "per_task.csv", "logs/hard-01.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let written = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert_eq!(written, out);
    let again = text(&moba(&["bench", "report", arg(dir.path())]));
    assert_eq!(again, out);

    let csv = std::fs::read_to_string(dir.path().join("per_task.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(csv.starts_with("task_id,"));
}

#[test]
fn ablation_flags_change_the_score() {
    let suite = fixtures().join("suite.json");
    let out = text(&moba(&["bench", "run", arg(&suite), "--no-plan"]));
    assert!(!out.contains("| Overall | 12 | 12/12 |"), "{out}");
}

#[test]
fn saved_log_scores_to_the_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("hard-01.jsonl");
    let task = fixtures().join("tasks/hard-01.json");
    let mut args = vec!["run".to_string(), arg(&task).into(), "--log".into(), arg(&log).into()];
    for app in ["clock", "calendar", "railway", "messenger", "weather"] {
        args.push("--app".into());
        args.push(arg(&fixtures().join(format!("apps/{app}.json"))).into());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let run: serde_json::Value = serde_json::from_str(&text(&moba(&args))).unwrap();
    assert_eq!(run["status"], "complete");
    assert_eq!(run["milestones_achieved"], serde_json::json!([true, true, true]));

    let scored: serde_json::Value = serde_json::from_str(&text(&moba(&["bench", "score", arg(&log), arg(&task)]))).unwrap();
    for key in ["milestones_achieved", "step_of_milestone", "total_steps", "effective_steps"] {
        assert_eq!(scored[key], run[key], "{key}");
    }
}

#[test]
fn distill_prints_indexed_elements() {
    let dir = tempfile::tempdir().unwrap();
    let xml = dir.path().join("ticket.xml");
    std::fs::write(
        &xml,
        r#"<hierarchy><node bounds="[0,0][100,100]" clickable="true"><node text="Plane ticket" bounds="[10,10][90,40]"/></node></hierarchy>"#,
    )
    .unwrap();
    let json = dir.path().join("elements.json");
    let out = text(&moba(&["distill", arg(&xml), "--width", "100", "--height", "100", "--json-out", arg(&json)]));
    assert!(out.contains("Plane ticket"), "{out}");
    let elements: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(elements.as_array().unwrap().len(), 1);
    assert_eq!(elements[0]["index"], 0);
}

#[test]
fn unknown_backend_is_rejected() {
    let suite = fixtures().join("suite.json");
    let out = Command::new(env!("CARGO_BIN_EXE_moba"))
        .args(["bench", "run", arg(&suite), "--backend", "carrier-pigeon"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown backend"));
}
