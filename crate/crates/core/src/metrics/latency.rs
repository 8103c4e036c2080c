use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::backbones::Model;
use crate::datapipe::BIN_WIDTH_MS;
use crate::tensor::{Scalar, Tensor};

/// Wall-clock distribution of single-window forward passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub steps: usize,
    pub window_ms: f64,
    pub samples: usize,
    pub median_s: f64,
    pub p95_s: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 10,
            samples: 100,
            seed: 0,
        }
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn random_window<F: Scalar>(steps: usize, channels: usize, seed: u64) -> Result<Tensor<F>, MetricsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<F> = (0..steps * channels)
        .map(|_| F::lit(StandardNormal.sample(&mut rng)))
        .collect();
    Ok(Tensor::from_vec(&[1, steps, channels], data)?)
}

fn time_once<F: Scalar>(model: &Model<F>, x: &Tensor<F>) -> Result<f64, MetricsError> {
    let t0 = Instant::now();
    std::hint::black_box(model.predict(std::hint::black_box(x))?);
    // clock granularity floor keeps the report strictly positive
    Ok(t0.elapsed().as_secs_f64().max(1e-9))
}

fn report(steps: usize, mut times: Vec<f64>) -> LatencyReport {
    times.sort_by(f64::total_cmp);
    LatencyReport {
        steps,
        window_ms: steps as f64 * BIN_WIDTH_MS,
        samples: times.len(),
        median_s: median(&times),
        p95_s: percentile(&times, 0.95),
        threads: 1,
    }
}

/// Times `samples` evaluation-mode forward passes of one fixed random
/// `1 × S × C` window after `warmup` untimed passes. Only the calling
/// thread is used.
pub fn bench_latency<F: Scalar>(model: &Model<F>, steps: usize, cfg: BenchConfig) -> Result<LatencyReport, MetricsError> {
    let probe = complexity_probe_inner(model, &[steps], cfg)?;
    Ok(probe.into_iter().next().expect("one length"))
}

/// Median latency at each window length and the last-to-first ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityProbe {
    pub reports: Vec<LatencyReport>,
    pub ratio: f64,
}

/// Benchmarks several window lengths with interleaved samples, so slow
/// drifts in machine speed affect every length alike.
pub fn complexity_probe<F: Scalar>(model: &Model<F>, lengths: &[usize], cfg: BenchConfig) -> Result<ComplexityProbe, MetricsError> {
    if lengths.len() < 2 {
        return Err(MetricsError::Empty("complexity probe needs two window lengths".into()));
    }
    let reports = complexity_probe_inner(model, lengths, cfg)?;
    let ratio = reports[reports.len() - 1].median_s / reports[0].median_s;
    Ok(ComplexityProbe { reports, ratio })
}

fn complexity_probe_inner<F: Scalar>(model: &Model<F>, lengths: &[usize], cfg: BenchConfig) -> Result<Vec<LatencyReport>, MetricsError> {
    if cfg.samples == 0 {
        return Err(MetricsError::Empty("latency samples".into()));
    }
    let c = model.config().input_channels;
    let inputs = lengths
        .iter()
        .map(|&s| random_window(s, c, cfg.seed))
        .collect::<Result<Vec<_>, _>>()?;
    for x in &inputs {
        for _ in 0..cfg.warmup {
            std::hint::black_box(model.predict(x)?);
        }
    }
    let mut times = vec![Vec::with_capacity(cfg.samples); lengths.len()];
    for _ in 0..cfg.samples {
        for (x, t) in inputs.iter().zip(&mut times) {
            t.push(time_once(model, x)?);
        }
    }
    Ok(lengths.iter().zip(times).map(|(&s, t)| report(s, t)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&v, 1.0), 20.0);
        assert_eq!(median(&v), 10.5);
        assert_eq!(median(&[3.0]), 3.0);
    }
}
