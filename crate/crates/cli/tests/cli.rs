use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cre_core::corpus::TaskStream;
use cre_core::metrics::RunReport;
use serde_json::{json, Value};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn cre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cre"))
        .args(args)
        .env_remove("CRE_CONFIG")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn config() -> String {
    fixtures().join("synthetic.json").display().to_string()
}

/// A cheap run of the synthetic fixture into `out`.
fn quick_run(out: &Path, extra: &[&str]) -> Output {
    let cfg = config();
    let mut args = vec![
        "run",
        "--config",
        &cfg,
        "--epochs-new",
        "1",
        "--epochs-replay",
        "1",
        "--output-dir",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    cre(&args)
}

fn load_report(path: &Path) -> RunReport {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn tacred_record(id: String, relation: &str) -> Value {
    json!({
        "id": id,
        "token": ["Alice", "works", "for", "Acme", "Corp", "."],
        "subj_start": 0, "subj_end": 0,
        "obj_start": 3, "obj_end": 4,
        "relation": relation,
    })
}

fn order_text(blocks: usize, tasks: usize, per_task: usize, label: &dyn Fn(usize) -> String) -> String {
    let mut text = String::new();
    for b in 0..blocks {
        if b > 0 {
            text.push('\n');
        }
        for t in 0..tasks {
            let line: Vec<String> = (0..per_task)
                .map(|j| label((t * per_task + j + b * 7) % (tasks * per_task)))
                .collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
    }
    text
}

#[test]
fn prepare_tacred_ten_by_four() {
    let dir = tempfile::tempdir().unwrap();
    let label = |i: usize| format!("org:rel_{i}");
    let mut records = Vec::new();
    for r in 0..40 {
        for i in 0..5 {
            records.push(tacred_record(format!("r{r}-{i}"), &label(r)));
        }
    }
    records.push(tacred_record("nr-1".into(), "no_relation"));
    records.push(tacred_record("nr-2".into(), "no_relation"));
    let input = dir.path().join("tacred.json");
    std::fs::write(&input, serde_json::to_string(&records).unwrap()).unwrap();
    let order = dir.path().join("order.txt");
    std::fs::write(&order, order_text(2, 10, 4, &label)).unwrap();
    let out = dir.path().join("out");

    let o = cre(&[
        "prepare",
        "--dataset",
        "tacred",
        "--input",
        input.to_str().unwrap(),
        "--relation-order",
        order.to_str().unwrap(),
        "--seeds",
        "1,2,3",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("task 10: 4 relations"));
    let streams: Vec<TaskStream> = (1..=3)
        .map(|s| TaskStream::load(&out.join(format!("streams/stream-seed{s}.json"))).unwrap())
        .collect();
    for s in &streams {
        assert_eq!(s.len(), 10);
        assert!(s.tasks.iter().all(|t| t.relations.len() == 4));
        assert!(s
            .tasks
            .iter()
            .flat_map(|t| &t.train)
            .all(|i| i.relation != "no_relation"));
    }
    // seeds cycle through the two order blocks
    assert_eq!(streams[0].tasks[0].relations, streams[2].tasks[0].relations);
    assert_ne!(streams[0].tasks[0].relations, streams[1].tasks[0].relations);
}

#[test]
fn prepare_fewrel_ten_by_eight() {
    let dir = tempfile::tempdir().unwrap();
    let label = |i: usize| format!("P{}", 100 + i);
    let mut root = serde_json::Map::new();
    for r in 0..80 {
        let examples: Vec<Value> = (0..4)
            .map(|i| {
                json!({
                    "tokens": ["The", "river", format!("w{i}"), "flows", "into", "the", "sea"],
                    "h": ["river", "Q1", [[1]]],
                    "t": ["sea", "Q2", [[6]]],
                })
            })
            .collect();
        root.insert(label(r), Value::Array(examples));
    }
    let input = dir.path().join("fewrel.json");
    std::fs::write(&input, Value::Object(root).to_string()).unwrap();
    let order = dir.path().join("order.txt");
    std::fs::write(&order, order_text(1, 10, 8, &label)).unwrap();
    let out = dir.path().join("out");
    let o = cre(&[
        "prepare",
        "--dataset",
        "fewrel",
        "--input",
        input.to_str().unwrap(),
        "--relation-order",
        order.to_str().unwrap(),
        "--seeds",
        "4",
        "--train-cap",
        "420",
        "--eval-cap",
        "140",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = TaskStream::load(&out.join("streams/stream-seed4.json")).unwrap();
    assert_eq!(s.len(), 10);
    assert!(s.tasks.iter().all(|t| t.relations.len() == 8));
}

#[test]
fn unknown_order_label_is_named_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let order = dir.path().join("order.txt");
    std::fs::write(&order, "syn:rel00 syn:rel01\nsyn:rel02 per:nonexistent\n").unwrap();
    let input = fixtures().join("synthetic.jsonl");
    let o = cre(&[
        "prepare",
        "--input",
        input.to_str().unwrap(),
        "--relation-order",
        order.to_str().unwrap(),
        "--output-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("per:nonexistent"), "{err}");
    assert!(err.contains("order.txt:2"), "{err}");
}

#[test]
fn validation_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = config();
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "--no-such-flag"],
        vec![
            "run",
            "--input",
            "/nonexistent.jsonl",
            "--relation-order",
            "/nonexistent.txt",
            "--output-dir",
            d,
        ],
        vec!["run", "--config", "/nonexistent.json"],
        vec!["run", "--config", &cfg, "--plateau-factor", "2", "--output-dir", d],
        vec!["run", "--config", &cfg, "--backend", "external", "--output-dir", d],
        vec!["ablate", "--config", &cfg, "--memory-sizes", "10", "--output-dir", d],
        vec![
            "ablate",
            "--config",
            &cfg,
            "--memory-sizes",
            "0,5",
            "--templates",
            "T1,T2",
            "--output-dir",
            d,
        ],
        vec!["report", d],
        vec!["mock-backend", "--fault", "explode"],
    ];
    for args in cases {
        let o = cre(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn backend_failures_exit_with_two_and_leave_markers() {
    let dir = tempfile::tempdir().unwrap();
    let cre_bin = env!("CARGO_BIN_EXE_cre");

    let missing = dir.path().join("missing");
    let o = quick_run(
        &missing,
        &[
            "--seeds",
            "1",
            "--backend",
            "external",
            "--backend-command",
            "/no/such/backend",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let marker = std::fs::read_to_string(missing.join("seed-1/FAILED")).unwrap();
    assert!(marker.contains("/no/such/backend"), "{marker}");

    let crash = dir.path().join("crash");
    let o = quick_run(
        &crash,
        &[
            "--seeds",
            "1",
            "--backend",
            "external",
            "--backend-command",
            cre_bin,
            "mock-backend",
            "--fault",
            "exit-after-init",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(crash.join("seed-1/FAILED").exists());
    let report = load_report(&crash.join("seed-1/report.json"));
    assert!(!report.is_complete());
    assert!(report.bwt.is_none());
}

#[test]
fn external_mock_backend_completes_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ext");
    let o = quick_run(
        &out,
        &[
            "--seeds",
            "1",
            "--backend",
            "external",
            "--backend-command",
            env!("CARGO_BIN_EXE_cre"),
            "mock-backend",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = load_report(&out.join("seed-1/report.json"));
    assert!(report.is_complete());
    assert_eq!(report.meta.backend_id, "mock-echo");
    // the echo model answers unseen prompts with the prompt itself
    assert!(report.hallucinations.iter().all(|&h| h > 0));
}

#[test]
fn memory_size_zero_keeps_memory_empty() {
    let dir = tempfile::tempdir().unwrap();
    let o = quick_run(dir.path(), &["--seeds", "2", "--memory-size", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = load_report(&dir.path().join("seed-2/report.json"));
    assert!(report
        .stages
        .iter()
        .all(|s| s.memory_before_replay == 0 && s.memory_after_union == 0));
    assert!(report.stages.iter().all(|s| s.replay_losses.is_empty()));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("seed-2/memory.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn written_reports_recompute_exactly() {
    let dir = tempfile::tempdir().unwrap();
    assert!(quick_run(dir.path(), &["--seeds", "3"]).status.success());
    let path = dir.path().join("seed-3/report.json");
    let report = load_report(&path);
    let again = report.recompute().unwrap();
    assert_eq!(again, report);
    let mut text = serde_json::to_string_pretty(&again).unwrap();
    text.push('\n');
    assert_eq!(text, std::fs::read_to_string(&path).unwrap());
    // the config is echoed, minus where and how fast it ran
    assert_eq!(report.meta.config["memory_size"], 10);
    assert_eq!(report.meta.config["epochs_new"], 1);
    assert!(report.meta.config.get("output_dir").is_none());
    let matrix = std::fs::read_to_string(dir.path().join("seed-3/matrix.csv")).unwrap();
    assert!(matrix.starts_with("stage,task1,task2,"));
    assert_eq!(matrix.lines().count(), 11);
}

#[test]
fn resume_reproduces_the_uninterrupted_report() {
    let dir = tempfile::tempdir().unwrap();
    assert!(quick_run(dir.path(), &["--seeds", "4", "--checkpoints", "true"])
        .status
        .success());
    let seed_dir = dir.path().join("seed-4");
    let full = std::fs::read(seed_dir.join("report.json")).unwrap();
    for stage in 5..=10 {
        std::fs::remove_file(seed_dir.join(format!("checkpoints/stage-{stage}.json"))).unwrap();
        std::fs::remove_file(seed_dir.join(format!("checkpoints/backend-{stage}.bin"))).unwrap();
    }
    std::fs::remove_file(seed_dir.join("report.json")).unwrap();
    let o = quick_run(dir.path(), &["--seeds", "4", "--checkpoints", "true", "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("resuming after stage 4"));
    assert_eq!(std::fs::read(seed_dir.join("report.json")).unwrap(), full);
}

#[test]
fn report_matches_hand_averages() {
    let dir = tempfile::tempdir().unwrap();
    assert!(quick_run(dir.path(), &[]).status.success());
    let reports: Vec<RunReport> = (1..=5)
        .map(|s| load_report(&dir.path().join(format!("seed-{s}/report.json"))))
        .collect();
    let o = cre(&["report", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("bwt"));
    let agg: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("aggregate.json")).unwrap()).unwrap();
    let agg = &agg["aggregate"];

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = |xs: &[f64]| {
        let m = mean(xs);
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    };
    let bwts: Vec<f64> = reports.iter().map(|r| r.bwt.unwrap()).collect();
    assert!((agg["bwt"]["mean"].as_f64().unwrap() - mean(&bwts)).abs() < 1e-12);
    assert!((agg["bwt"]["sd"].as_f64().unwrap() - sd(&bwts)).abs() < 1e-12);
    let wholes: Vec<f64> = reports.iter().map(|r| r.whole_acc.unwrap()).collect();
    assert!((agg["whole_acc"]["mean"].as_f64().unwrap() - mean(&wholes)).abs() < 1e-12);
    for k in 0..10 {
        let col: Vec<f64> = reports.iter().map(|r| r.matrix.rows[k][0]).collect();
        let got = agg["task1_trajectory"][k]["mean"].as_f64().unwrap();
        assert!((got - mean(&col)).abs() < 1e-12, "stage {k}");
    }
    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().next(), Some("stage,task1_mean,task1_sd"));
    assert_eq!(traj.lines().count(), 11);
    for f in ["aggregate.csv", "stage_metrics.csv", "confusion.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    // a single run has zero spread
    let one = dir.path().join("one");
    let o = cre(&[
        "report",
        dir.path().join("seed-2").to_str().unwrap(),
        "--out",
        one.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let agg: Value = serde_json::from_str(&std::fs::read_to_string(one.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["aggregate"]["bwt"]["sd"], 0.0);
    assert_eq!(agg["aggregate"]["whole_acc"]["sd"], 0.0);
}

#[test]
fn report_refuses_mixed_configs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(quick_run(&a, &["--seeds", "1"]).status.success());
    assert!(quick_run(&b, &["--seeds", "2", "--memory-size", "5", "--lr0", "0.4"])
        .status
        .success());
    let o = cre(&[
        "report",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("lr0") && err.contains("memory_size"), "{err}");
    assert!(!err.contains("seeds"), "{err}");
}

#[test]
fn ablation_records_the_test_family() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let d = dir.path().to_str().unwrap();
    let common = [
        "--config",
        &cfg,
        "--epochs-new",
        "1",
        "--epochs-replay",
        "1",
        "--seeds",
        "1,2,3",
        "--output-dir",
        d,
    ];
    let o = cre(&[&["ablate", "--memory-sizes", "5,0"][..], &common[..]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let detail = std::fs::read_to_string(dir.path().join("ablation_detail.csv")).unwrap();
    let lines: Vec<&str> = detail.lines().collect();
    assert_eq!(lines.len(), 3);
    // m = 0 is the baseline even when listed second
    assert!(
        lines[1].starts_with("m=5,3,") && lines[1].ends_with(",paired"),
        "{detail}"
    );
    assert!(lines[2].starts_with("m=0,3,") && lines[2].ends_with(",,,,"), "{detail}");
    // both arms partitioned the same prepared streams
    let s5 = load_report(&dir.path().join("m5/seed-2/report.json"));
    let s0 = load_report(&dir.path().join("m0/seed-2/report.json"));
    let ids = |r: &RunReport| {
        r.stages[9]
            .predictions
            .iter()
            .map(|p| p.instance_id.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(ids(&s5), ids(&s0));

    let o = cre(&[&["ablate", "--memory-sizes", "0,5", "--welch"][..], &common[..]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let ab: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ablation.json")).unwrap()).unwrap();
    assert_eq!(ab["test"], "welch");
    assert_eq!(ab["arms"][1]["vs_baseline"]["bwt"]["paired"], false);
}

#[test]
fn config_path_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cre"))
        .args(["prepare", "--seeds", "7", "--output-dir", dir.path().to_str().unwrap()])
        .env("CRE_CONFIG", fixtures().join("synthetic.json"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("streams/stream-seed7.json").exists());
}

#[test]
fn streams_prepared_differently_are_not_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let d = dir.path().to_str().unwrap();
    assert!(cre(&["prepare", "--config", &cfg, "--seeds", "1", "--output-dir", d])
        .status
        .success());
    let o = cre(&[
        "prepare",
        "--config",
        &cfg,
        "--seeds",
        "1",
        "--train-cap",
        "20",
        "--output-dir",
        d,
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train_cap"), "{}", stderr(&o));
}
