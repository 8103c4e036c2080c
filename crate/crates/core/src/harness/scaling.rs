use std::sync::Mutex;

use super::{train_multi_session, HarnessError, Strategy, TrainConfig};
use crate::backbones::{param_count, ModelConfig};
use crate::datapipe::PreparedSession;

/// One model size of a scaling sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub layers: usize,
    pub params: usize,
    /// Pooled test R² per seed; `None` where training failed.
    pub per_seed: Vec<Option<f64>>,
    /// Mean over converged seeds.
    pub r2_mean: Option<f64>,
    /// Standard error of the mean over converged seeds.
    pub r2_stderr: Option<f64>,
}

impl ScalingRow {
    pub fn converged(&self) -> bool {
        self.r2_mean.is_some()
    }
}

/// Trains one multi-session Random-strategy model per (layer count, seed).
///
/// Divergence at one size is recorded in that row and does not stop the
/// sweep. Independent runs are spread over `threads` worker threads; each
/// run is itself single-threaded, so results do not depend on `threads`.
pub fn scaling_sweep(
    base: &ModelConfig,
    layer_counts: &[usize],
    sessions: &[PreparedSession],
    cfg: &TrainConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<ScalingRow>, HarnessError> {
    if layer_counts.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config("scaling sweep needs layer counts and seeds".into()));
    }
    if layer_counts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HarnessError::Config(format!("layer counts must ascend: {layer_counts:?}")));
    }
    let configs: Vec<ModelConfig> = layer_counts
        .iter()
        .map(|&layers| {
            let c = ModelConfig { layers, ..base.clone() };
            c.validate().map(|_| c)
        })
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|i| (0..seeds.len()).map(move |s| (i, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<Option<f64>, HarnessError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    let run = |(i, s): (usize, usize)| -> Result<Option<f64>, HarnessError> {
        let tc = TrainConfig {
            strategy: Strategy::Random,
            seed: seeds[s],
            ..cfg.clone()
        };
        match train_multi_session(sessions, &configs[i], &tc) {
            Ok(out) => Ok(out.record.r2_avg),
            Err(e) if e.is_training_failure() => Ok(None),
            Err(e) => Err(e),
        }
    };
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let j = {
                    let mut n = next.lock().expect("job counter");
                    let j = *n;
                    *n += 1;
                    j
                };
                let Some(&job) = jobs.get(j) else { break };
                let r = run(job);
                results.lock().expect("result slots")[j] = Some(r);
            });
        }
    });
    let mut results = results.into_inner().expect("result slots").into_iter();
    configs
        .iter()
        .map(|c| {
            let per_seed = (0..seeds.len())
                .map(|_| results.next().flatten().expect("every job ran"))
                .collect::<Result<Vec<_>, _>>()?;
            let ok: Vec<f64> = per_seed.iter().flatten().copied().collect();
            let (r2_mean, r2_stderr) = mean_stderr(&ok);
            Ok(ScalingRow {
                layers: c.layers,
                params: param_count(c),
                per_seed,
                r2_mean,
                r2_stderr,
            })
        })
        .collect()
}

/// Mean and standard error (sample standard deviation over √n).
pub fn mean_stderr(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (Some(mean), Some(0.0));
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}
