use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndbench::metrics::{read_records, RunStatus};

fn ndbench(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ndbench"))
        .args(args)
        .current_dir(dir)
        .env_remove("NDBENCH_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Two small sessions with drift under `<dir>/d`.
fn small_data(dir: &Path) {
    let o = ndbench(
        &[
            "synth",
            "-o",
            "d",
            "--set",
            "synth.days=2",
            "--set",
            "synth.channels=8",
            "--set",
            "synth.duration_s=40",
            "--set",
            "synth.drift.rate_decay=0.8",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

const SMALL: [&str; 8] = [
    "--set",
    "model.preset=small",
    "--set",
    "model.embed=8",
    "--set",
    "train.steps=128",
    "--set",
    "train.stride=64",
];

#[test]
fn synth_is_deterministic_and_writes_one_bundle_per_day() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "synth",
            "-o",
            out,
            "--set",
            "synth.days=5",
            "--set",
            "synth.channels=4",
            "--set",
            "synth.duration_s=2",
        ]
    };
    assert_eq!(code(&ndbench(&args("a"), dir.path())), 0);
    assert_eq!(code(&ndbench(&args("b"), dir.path())), 0);
    let sessions = |o: &str| dir.path().join(o).join("sessions");
    let files = files_under(&sessions("a"));
    assert_eq!(files, files_under(&sessions("b")));
    for f in &files {
        assert_eq!(fs::read(sessions("a").join(f)).unwrap(), fs::read(sessions("b").join(f)).unwrap(), "{f:?}");
    }
    let mut days: Vec<u64> = fs::read_dir(sessions("a"))
        .unwrap()
        .map(|e| {
            let m: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(e.unwrap().path().join("manifest.json")).unwrap()).unwrap();
            m["date_index"].as_u64().unwrap()
        })
        .collect();
    days.sort_unstable();
    assert_eq!(days, [0, 1, 2, 3, 4]);
}

#[test]
fn usage_and_data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = ndbench(&["synth", "-o", "x", "--set", "synth.drift.rate_decay=1.5"], p);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("1.5"), "{}", stderr(&o));
    assert_eq!(code(&ndbench(&["train", "-o", "missing"], p)), 2);
    assert_eq!(code(&ndbench(&["finetune", "-o", "x"], p)), 2);
    assert_eq!(code(&ndbench(&["bench", "-o", "x", "--set", "bench.checkpoints=[\"nope.ckpt\"]"], p)), 2);
    assert_eq!(code(&ndbench(&["report", "-o", "x", "--set", "report.inputs=[\"nowhere\"]"], p)), 2);
    assert_eq!(code(&ndbench(&["train", "--set", "train.epochz=1"], p)), 2);
    assert_eq!(code(&ndbench(&["frobnicate"], p)), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_ndbench"))
        .args(["synth", "-o", "x"])
        .current_dir(p)
        .env("NDBENCH_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);

    fs::create_dir_all(p.join("empty")).unwrap();
    assert_eq!(code(&ndbench(&["report", "-o", "empty"], p)), 2);
}

#[test]
fn train_gru_on_a_synthetic_session() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let synth = [
        "synth",
        "-o",
        "run",
        "--set",
        "synth.channels=32",
        "--set",
        "synth.seed=1",
    ];
    assert_eq!(code(&ndbench(&synth, p)), 0);
    let o = ndbench(&["train", "-o", "run", "--set", "model.preset=small", "--set", "train.epochs=20"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_records(&p.join("run/metrics-single.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].model, "gru");
    assert!(rows[0].r2_avg.unwrap() >= 0.8, "{:?}", rows[0]);
    assert!(p.join("run/checkpoints/gru-synth-d00.ckpt").is_file());

    // the manifest alone replays the run
    let before = fs::read(p.join("run/metrics-single.csv")).unwrap();
    let o = ndbench(&["train", "-c", "run/manifest-train-single.json"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(p.join("run/metrics-single.csv")).unwrap(), before);
}

#[test]
fn replay_rejects_changed_data() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_data(p);
    let mut args = vec!["preprocess", "-o", "d"];
    args.extend(SMALL);
    assert_eq!(code(&ndbench(&args, p)), 0);
    let m = p.join("d/manifest-preprocess.json");
    let text = fs::read_to_string(&m).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["data_hashes"]["synth-d01"] = "0000".into();
    fs::write(&m, v.to_string()).unwrap();
    let o = ndbench(&["preprocess", "-c", "d/manifest-preprocess.json"], p);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("hash"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3_and_still_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_data(p);
    let mut args = vec![
        "train",
        "-o",
        "d",
        "--set",
        "train.learning_rate=1e30",
        "--set",
        "train.grad_clip=null",
        "--set",
        "train.epochs=2",
        "--set",
        "data.sessions=[\"synth-d00\"]",
    ];
    args.extend(SMALL);
    let o = ndbench(&args, p);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let rows = read_records(&p.join("d/metrics-single.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].status, RunStatus::NotConverged);
    assert_eq!(rows[0].r2_avg, None);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("d/manifest-train-single.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "training_failure");
}

#[test]
fn scale_gives_one_row_per_layer_count() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_data(p);
    let mut args = vec![
        "scale",
        "-o",
        "d",
        "--set",
        "scale.layer_counts=[1,2,4]",
        "--set",
        "scale.seeds=[3]",
        "--set",
        "train.epochs=1",
    ];
    args.extend(SMALL);
    let o = ndbench(&args, p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(p.join("d/scaling.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{table}");
    let layers: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(layers, ["1", "2", "4"]);
    assert_eq!(read_records(&p.join("d/metrics-scale.csv")).unwrap().len(), 3);
}

#[test]
fn bench_two_models_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_data(p);
    for seed in ["0", "1"] {
        let mut args = vec![
            "train",
            "-o",
            "d",
            "--set",
            "model.kind=[\"gru\",\"rwkv\"]",
            "--set",
            "train.epochs=1",
            "--set",
            "data.sessions=[\"synth-d00\"]",
        ];
        let seed_arg = format!("train.seed={seed}");
        args.extend(["--set", &seed_arg]);
        args.extend(SMALL);
        let o = ndbench(&args, p);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::rename(p.join("d/metrics-single.csv"), p.join(format!("d/metrics-single-{seed}.csv"))).unwrap();
    }
    let o = ndbench(
        &[
            "bench",
            "-o",
            "d",
            "--set",
            "bench.checkpoints=[\"d/checkpoints/gru-synth-d00.ckpt\",\"d/checkpoints/rwkv-synth-d00.ckpt\"]",
            "--set",
            "bench.samples=5",
            "--set",
            "bench.warmup=1",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut r = csv::Reader::from_path(p.join("d/latency.csv")).unwrap();
    let h = r.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|c| c == name).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    let of = |t: &str| rows.iter().filter(|row| &row[col("row_type")] == t).count();
    assert_eq!((of("latency"), of("ratio")), (4, 2));
    assert!(rows.iter().all(|row| &row[col("threads")] == "1"));
    assert!(rows.iter().filter(|row| &row[col("row_type")] == "latency").all(|row| &row[col("samples")] == "5"));

    let o = ndbench(&["report", "-o", "rep", "--set", "report.inputs=[\"d\"]"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let md = fs::read_to_string(p.join("rep/report.md")).unwrap();
    assert!(md.contains("## single") && md.contains("## inference"), "{md}");
    let r2_row = md.lines().find(|l| l.starts_with("| Average R²")).unwrap();
    assert_eq!(r2_row.matches('±').count(), 2, "{r2_row}");
    let summary = fs::read_to_string(p.join("rep/summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("single,Average R²,gru,") && l.ends_with(",2")), "{summary}");
}

#[test]
fn single_and_multi_runs_keep_separate_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_data(p);
    for experiment in ["single", "multi"] {
        let exp = format!("experiment={experiment}");
        let mut args = vec!["train", "-o", "d", "--set", &exp, "--set", "train.epochs=1"];
        args.extend(SMALL);
        let o = ndbench(&args, p);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["metrics-single.csv", "metrics-multi_random.csv", "manifest-train-single.json", "manifest-train-multi_random.json"] {
        assert!(p.join("d").join(f).is_file(), "{f}");
    }
    assert_eq!(code(&ndbench(&["report", "-o", "d"], p)), 0);
    let md = fs::read_to_string(p.join("d/report.md")).unwrap();
    assert!(md.contains("## single") && md.contains("## multi_random"), "{md}");
}
