use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndbench::backbones::param_count;
use ndbench::datapipe::{generate_synthetic_session, load_sessions, preprocess, save_session, PreparedSession, SynthConfig};
use ndbench::harness::{
    finetune_new_session, scaling_sweep, train_multi_session, train_single_session, Checkpoint, HarnessError,
};
use ndbench::metrics::{complexity_probe, write_records, MetricsRecord};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Experiment, RunSpec, MANIFEST_FORMAT};
use crate::error::{usage, CliError};

/// Whether every run of a command converged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    TrainingFailure,
}

/// State shared by one command invocation; becomes the run manifest.
pub struct Run {
    pub spec: RunSpec,
    pub command: &'static str,
    /// Suffix of the manifest file name; defaults to the command.
    pub label: String,
    pub threads: usize,
    expected_hashes: Option<BTreeMap<String, String>>,
    data_hashes: BTreeMap<String, String>,
    resolved: serde_json::Map<String, Value>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn new(
        spec: RunSpec,
        command: &'static str,
        threads: usize,
        expected_hashes: Option<BTreeMap<String, String>>,
    ) -> Self {
        Self {
            spec,
            command,
            label: command.to_string(),
            threads,
            expected_hashes,
            data_hashes: BTreeMap::new(),
            resolved: serde_json::Map::new(),
            outputs: Vec::new(),
        }
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.spec.out.dir.clone();
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        Ok(dir)
    }

    fn output(&mut self, path: PathBuf) -> PathBuf {
        self.outputs.push(path.clone());
        path
    }

    fn resolve(&mut self, key: &str, value: impl Serialize) -> Result<(), CliError> {
        self.resolved.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Loads, filters, checks and preprocesses the session bundles.
    fn sessions(&mut self) -> Result<Vec<PreparedSession>, CliError> {
        let dir = self.spec.data_dir();
        if !dir.is_dir() {
            return usage(format!("data directory {} not found", dir.display()));
        }
        let mut raws = load_sessions(&dir)?;
        let wanted = &self.spec.data.sessions;
        if !wanted.is_empty() {
            if let Some(missing) = wanted.iter().find(|id| !raws.iter().any(|r| &r.session_id == *id)) {
                return usage(format!("session {missing} not found in {}", dir.display()));
            }
            raws.retain(|r| wanted.contains(&r.session_id));
        }
        let mut out = Vec::with_capacity(raws.len());
        for raw in &raws {
            let p = preprocess(raw, &self.spec.prep)?;
            if let Some(expected) = &self.expected_hashes {
                match expected.get(&p.session_id) {
                    Some(h) if *h == p.data_hash => {}
                    Some(h) => {
                        return usage(format!(
                            "session {} hash {} differs from manifest {}",
                            p.session_id, p.data_hash, h
                        ))
                    }
                    None => return usage(format!("session {} is not in the manifest", p.session_id)),
                }
            }
            self.data_hashes.insert(p.session_id.clone(), p.data_hash.clone());
            out.push(p);
        }
        Ok(out)
    }

    pub fn write_manifest(&mut self, status: Status) -> Result<PathBuf, CliError> {
        let path = self.out_dir()?.join(format!("manifest-{}.json", self.label));
        let manifest = json!({
            "format": MANIFEST_FORMAT,
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "status": match status {
                Status::Ok => "ok",
                Status::TrainingFailure => "training_failure",
            },
            "threads": self.threads,
            "spec": self.spec,
            "resolved": self.resolved,
            "data_hashes": self.data_hashes,
            "outputs": self.outputs,
        });
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).map_err(CliError::io(&path))?;
        Ok(path)
    }
}

fn save_records(run: &mut Run, name: &str, records: &[MetricsRecord]) -> Result<(), CliError> {
    let path = run.out_dir()?.join(name);
    write_records(&path, records)?;
    run.output(path);
    Ok(())
}

fn save_checkpoint(run: &mut Run, name: &str, ckpt: &Checkpoint) -> Result<(), CliError> {
    let dir = run.out_dir()?.join("checkpoints");
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let path = dir.join(format!("{name}.ckpt"));
    ckpt.save(&path)?;
    run.output(path);
    Ok(())
}

fn fail_or(err: HarnessError, failed: &mut bool) -> Result<(), CliError> {
    if err.is_training_failure() {
        eprintln!("training failure: {err}");
        *failed = true;
        Ok(())
    } else {
        Err(err.into())
    }
}

fn status(failed: bool) -> Status {
    if failed {
        Status::TrainingFailure
    } else {
        Status::Ok
    }
}

pub fn synth(run: &mut Run) -> Result<Status, CliError> {
    let s = run.spec.synth.clone();
    if s.days == 0 {
        return usage("synth.days must be at least 1");
    }
    let cfg = SynthConfig {
        poisson_noise: s.poisson_noise,
        drift: s.drift,
        ..SynthConfig::with_random_tuning(s.channels, s.duration_s, s.seed)
    };
    cfg.validate()?;
    let root = run.out_dir()?.join("sessions");
    for day in 0..s.days {
        let raw = generate_synthetic_session(&cfg, day)?;
        let dir = root.join(&raw.session_id);
        save_session(&raw, &dir)?;
        run.data_hashes.insert(raw.session_id.clone(), raw.content_hash());
        eprintln!("wrote {} ({} events)", dir.display(), raw.num_events());
        run.output(dir);
    }
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct PrepSummary<'a> {
    session_id: &'a str,
    date_index: usize,
    channels: usize,
    train_bins: usize,
    test_bins: usize,
    data_hash: &'a str,
    norm: &'a ndbench::datapipe::NormStats,
}

pub fn preprocess_cmd(run: &mut Run) -> Result<Status, CliError> {
    let sessions = run.sessions()?;
    let summary: Vec<PrepSummary> = sessions
        .iter()
        .map(|s| PrepSummary {
            session_id: &s.session_id,
            date_index: s.date_index,
            channels: s.channels(),
            train_bins: s.train.len(),
            test_bins: s.test.len(),
            data_hash: &s.data_hash,
            norm: &s.norm,
        })
        .collect();
    for s in &summary {
        println!(
            "{}\tday {}\t{} channels\t{} train bins\t{} test bins",
            s.session_id, s.date_index, s.channels, s.train_bins, s.test_bins
        );
    }
    let path = run.out_dir()?.join("preprocess.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(CliError::io(&path))?;
    run.output(path);
    Ok(Status::Ok)
}

pub fn train(run: &mut Run) -> Result<Status, CliError> {
    let experiment = run.spec.experiment;
    let tc = run.spec.train_config(experiment)?;
    let label = match experiment {
        Experiment::Single => "single".to_string(),
        Experiment::Multi => format!("multi_{}", tc.strategy),
    };
    run.label = format!("train-{label}");
    run.resolve("train", &tc)?;
    let sessions = run.sessions()?;
    let channels = sessions[0].channels();
    let mut records = Vec::new();
    let mut failed = false;
    let mut models = Vec::new();
    for kind in run.spec.model.kinds() {
        let mc = run.spec.model.resolve(kind, channels)?;
        models.push(mc.clone());
        match experiment {
            Experiment::Single => {
                for s in &sessions {
                    eprintln!("training {kind} on {}", s.session_id);
                    match train_single_session(s, &mc, &tc) {
                        Ok(out) => {
                            eprintln!("  test R² {:.4}", out.record.r2_avg.unwrap_or(f64::NAN));
                            save_checkpoint(run, &format!("{kind}-{}", s.session_id), &out.checkpoint)?;
                            records.push(out.record);
                        }
                        Err(e) => {
                            fail_or(e, &mut failed)?;
                            let mut r = MetricsRecord::new("single", kind.name(), &s.session_id, param_count(&mc), tc.seed)
                                .not_converged();
                            r.date_index = Some(s.date_index);
                            records.push(r);
                        }
                    }
                }
            }
            Experiment::Multi => {
                let name = format!("multi_{}", tc.strategy);
                eprintln!("training {kind} on {} sessions ({name})", sessions.len());
                match train_multi_session(&sessions, &mc, &tc) {
                    Ok(out) => {
                        eprintln!("  pooled test R² {:.4}", out.record.r2_avg.unwrap_or(f64::NAN));
                        save_checkpoint(run, &format!("{kind}-{name}"), &out.checkpoint)?;
                        records.push(out.record);
                        records.extend(out.per_session);
                    }
                    Err(e) => {
                        fail_or(e, &mut failed)?;
                        records.push(MetricsRecord::new(&name, kind.name(), "pooled", param_count(&mc), tc.seed).not_converged());
                    }
                }
            }
        }
    }
    run.resolve("models", &models)?;
    save_records(run, &format!("metrics-{label}.csv"), &records)?;
    Ok(status(failed))
}

pub fn finetune(run: &mut Run) -> Result<Status, CliError> {
    let Some(base_path) = run.spec.finetune.base.clone() else {
        return usage("finetune needs a base checkpoint: set finetune.base");
    };
    if !base_path.is_file() {
        return usage(format!("base checkpoint {} not found", base_path.display()));
    }
    let base = Checkpoint::load(&base_path)?;
    let tc = run.spec.train_config(Experiment::Single)?;
    run.resolve("train", &tc)?;
    run.resolve("model", &base.config)?;
    let sessions = run.sessions()?;
    let target = match &run.spec.finetune.session {
        Some(id) => sessions.iter().find(|s| &s.session_id == id),
        None => sessions.iter().max_by_key(|s| s.date_index),
    };
    let Some(new) = target else {
        return usage("finetune session not found");
    };
    let kind = base.config.kind;
    eprintln!("fine-tuning {kind} on {}", new.session_id);
    let mut failed = false;
    let record = match finetune_new_session(&base, new, &tc) {
        Ok(out) => {
            eprintln!(
                "  zero-shot R² {:.4}, recovery {}",
                out.zero_shot.r2_avg,
                out.recovery.map_or("-".to_string(), |r| r.to_string())
            );
            let path = run.out_dir()?.join("finetune-curve.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["seconds", "r2_avg"])?;
            w.write_record(["0".to_string(), out.zero_shot.r2_avg.to_string()])?;
            for (s, r2) in &out.curve {
                w.write_record([s.to_string(), r2.to_string()])?;
            }
            w.flush().map_err(CliError::io(&path))?;
            run.output(path);
            save_checkpoint(run, &format!("{kind}-finetune-{}", new.session_id), &out.checkpoint)?;
            out.record
        }
        Err(e) => {
            fail_or(e, &mut failed)?;
            let mut r = MetricsRecord::new("finetune", kind.name(), &new.session_id, base.params.count(), tc.seed).not_converged();
            r.date_index = Some(new.date_index);
            r
        }
    };
    save_records(run, "metrics-finetune.csv", &[record])?;
    Ok(status(failed))
}

pub fn scale(run: &mut Run) -> Result<Status, CliError> {
    let tc = run.spec.train_config(Experiment::Multi)?;
    run.resolve("train", &tc)?;
    let sessions = run.sessions()?;
    let channels = sessions[0].channels();
    let layer_counts = run.spec.scale.layer_counts.clone();
    let seeds = run.spec.scale.seeds.clone();
    let mut records = Vec::new();
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(["model", "layers", "params", "r2_mean", "r2_stderr", "converged_seeds", "seeds"])?;
    let mut failed = false;
    for kind in run.spec.model.kinds() {
        let base = run.spec.model.resolve(kind, channels)?;
        eprintln!("scaling {kind} over layers {layer_counts:?}, seeds {seeds:?}, {} thread(s)", run.threads);
        let rows = scaling_sweep(&base, &layer_counts, &sessions, &tc, &seeds, run.threads)?;
        for row in &rows {
            let opt = |v: Option<f64>| v.map_or_else(|| "not_converged".to_string(), |x| x.to_string());
            let ok = row.per_seed.iter().flatten().count();
            table.write_record([
                kind.name().to_string(),
                row.layers.to_string(),
                row.params.to_string(),
                opt(row.r2_mean),
                opt(row.r2_stderr),
                ok.to_string(),
                seeds.len().to_string(),
            ])?;
            for (seed, r2) in seeds.iter().zip(&row.per_seed) {
                let r = MetricsRecord::new("scale", kind.name(), "pooled", row.params, *seed);
                records.push(match r2 {
                    Some(v) => MetricsRecord { r2_avg: Some(*v), ..r },
                    None => {
                        failed = true;
                        r.not_converged()
                    }
                });
            }
        }
    }
    let path = run.out_dir()?.join("scaling.csv");
    let bytes = table.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(&path, bytes).map_err(CliError::io(&path))?;
    run.output(path);
    save_records(run, "metrics-scale.csv", &records)?;
    Ok(status(failed))
}

/// One line of a latency CSV: a timing at one window length or the
/// complexity ratio between the longest and shortest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub row_type: String,
    pub model: String,
    pub checkpoint: String,
    pub params: usize,
    pub steps: Option<usize>,
    pub window_ms: Option<f64>,
    pub samples: Option<usize>,
    pub median_s: Option<f64>,
    pub p95_s: Option<f64>,
    pub threads: usize,
    pub ratio: Option<f64>,
}

pub fn bench(run: &mut Run) -> Result<Status, CliError> {
    let b = run.spec.bench.clone();
    if b.checkpoints.is_empty() {
        return usage("bench needs checkpoints: set bench.checkpoints");
    }
    if b.lengths.len() < 2 {
        return usage("bench.lengths needs at least two window lengths");
    }
    let mut rows = Vec::new();
    for path in &b.checkpoints {
        if !path.is_file() {
            return usage(format!("checkpoint {} not found", path.display()));
        }
        let ckpt = Checkpoint::load(path)?;
        let model = ckpt.model()?;
        let kind = ckpt.config.kind;
        eprintln!("benchmarking {kind} ({}) at S = {:?}", path.display(), b.lengths);
        let probe = complexity_probe(&model, &b.lengths, b.config())?;
        let row = |row_type: &str| LatencyRow {
            row_type: row_type.to_string(),
            model: kind.name().to_string(),
            checkpoint: path.display().to_string(),
            params: model.param_count(),
            steps: None,
            window_ms: None,
            samples: None,
            median_s: None,
            p95_s: None,
            threads: 1,
            ratio: None,
        };
        for r in &probe.reports {
            eprintln!("  S={} median {:.3e} s, p95 {:.3e} s", r.steps, r.median_s, r.p95_s);
            rows.push(LatencyRow {
                steps: Some(r.steps),
                window_ms: Some(r.window_ms),
                samples: Some(r.samples),
                median_s: Some(r.median_s),
                p95_s: Some(r.p95_s),
                threads: r.threads,
                ..row("latency")
            });
        }
        eprintln!("  ratio {:.2}", probe.ratio);
        rows.push(LatencyRow {
            ratio: Some(probe.ratio),
            ..row("ratio")
        });
    }
    let path = run.out_dir()?.join("latency.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(CliError::io(&path))?;
    run.output(path);
    Ok(Status::Ok)
}

pub fn report(run: &mut Run) -> Result<Status, CliError> {
    let inputs = if run.spec.report.inputs.is_empty() {
        vec![run.spec.out.dir.clone()]
    } else {
        run.spec.report.inputs.clone()
    };
    let tables = crate::report::collect(&inputs)?;
    if tables.records.is_empty() && tables.latency.is_empty() {
        return usage(format!("no metrics rows found in {inputs:?}"));
    }
    let out = run.out_dir()?;
    let summary = crate::report::summarize(&tables);
    print!("{}", summary.markdown);
    for (name, body) in [
        ("report.md", summary.markdown.as_bytes()),
        ("summary.csv", summary.csv.as_slice()),
        ("scaling-series.csv", summary.scaling.as_slice()),
    ] {
        let path = out.join(name);
        fs::write(&path, body).map_err(CliError::io(&path))?;
        run.output(path);
    }
    Ok(Status::Ok)
}

pub fn is_metrics_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "csv")
}
