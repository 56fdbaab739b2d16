use std::path::Path;
use std::process::{Command, Output};

fn efcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efcp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_into(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["run", "--out", out];
    args.extend_from_slice(extra);
    efcp(&args)
}

const DEMO: &[&str] = &[
    "--task",
    "quadratic",
    "--opt",
    "smfac",
    "--density",
    "0.01",
    "--m",
    "32",
    "--steps",
    "200",
    "--seed",
    "1",
];

#[test]
fn run_writes_three_files_and_one_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(dir.path(), DEMO);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["metrics.jsonl", "config.json", "memory.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 200);
    for (t, line) in lines.iter().enumerate() {
        assert!(line.starts_with(&format!("{{\"t\":{t},\"loss\":")));
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = vec!["t", "loss", "grad_norm", "upd_norm", "ef_norm", "ms"];
        expected.sort_unstable();
        let mut keys = keys;
        keys.sort_unstable();
        assert_eq!(keys, expected);
    }
    let memory: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("memory.json")).unwrap())
            .unwrap();
    assert_eq!(memory["dense_baseline_bytes"], 4 * 32 * 50);
}

#[test]
fn same_command_gives_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_into(a.path(), DEMO).status.success());
    let mut threaded = DEMO.to_vec();
    threaded.extend(["--threads", "3"]);
    assert!(run_into(b.path(), &threaded).status.success());
    let read = |p: &Path| std::fs::read(p.join("metrics.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn config_json_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_into(
        a.path(),
        &["--opt", "lrmfac", "--task", "mlp", "--dim", "6", "--steps", "30", "--lr", "0.01"]
    )
    .status
    .success());
    let cfg = a.path().join("config.json");
    assert!(run_into(b.path(), &["--config", cfg.to_str().unwrap()])
        .status
        .success());
    for f in ["metrics.jsonl", "config.json", "memory.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn bad_density_exits_2_naming_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(dir.path(), &["--opt", "smfac", "--density", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--density"));
}

#[test]
fn unknown_values_exit_2() {
    assert_eq!(efcp(&["run", "--opt", "lbfgs"]).status.code(), Some(2));
    assert_eq!(efcp(&["run", "--task", "imagenet"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(dir.path(), &["--task", "csv:/nonexistent/data.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_and_keeps_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(
        dir.path(),
        &[
            "--opt",
            "sgd",
            "--lr",
            "1000",
            "--momentum",
            "0",
            "--steps",
            "100",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let n = metrics.lines().count();
    assert!(n > 0 && n < 100);
}

#[test]
fn bare_run_uses_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(dir.path(), &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["task"], "quadratic");
    assert_eq!(cfg["optimizer"], "smfac");
}

#[test]
fn csv_task_trains() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    let mut text = String::from("x1,x2,label\n");
    for i in 0..40 {
        let y = i % 2;
        let s = if y == 1 { 1.0 } else { -1.0 };
        text.push_str(&format!(
            "{},{},{y}\n",
            s * (1.0 + i as f64 / 40.0),
            0.1 * i as f64
        ));
    }
    std::fs::write(&csv, text).unwrap();
    let task = format!("csv:{}", csv.display());
    let out_dir = dir.path().join("out");
    let out = run_into(
        &out_dir,
        &[
            "--task", &task, "--opt", "dggt", "--steps", "20", "--lr", "0.01",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn verify_passes_and_prints_a_table() {
    let out = efcp(&["verify", "--seed", "3"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("m-fac vs explicit inverse"));
    assert!(stdout.contains("all 9 checks passed"));
    assert!(!stdout.contains("FAIL"));
}
