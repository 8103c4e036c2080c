//! R², evaluation, latency benchmarking and recovery-time extraction.

mod evaluate;
mod latency;
mod r2;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::backbones::BackboneError;
use crate::tensor::TensorError;

pub use evaluate::{evaluate, predict_windows, Evaluation};
pub use latency::{bench_latency, complexity_probe, BenchConfig, ComplexityProbe, LatencyReport};
pub use r2::{axis_scores, r_squared, Aggregation, AxisScores};

/// R² at or above which a fine-tuned decoder counts as recovered.
pub const RECOVERY_THRESHOLD: f64 = 0.7;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("R² is undefined for a constant target")]
    ConstantTarget,
    #[error("R² needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("{targets} targets but {predictions} predictions")]
    LengthMismatch { targets: usize, predictions: usize },
    #[error("evaluation window at bin {start} of {session} overlaps the previous one ending at {previous_end}")]
    Overlap {
        session: String,
        start: usize,
        previous_end: usize,
    },
    #[error("no normalization statistics for session {0}")]
    MissingNorm(String),
    #[error("empty {0}")]
    Empty(String),
    #[error("curve seconds must strictly increase ({0} after {1})")]
    NotIncreasing(f64, f64),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<TensorError> for MetricsError {
    fn from(e: TensorError) -> Self {
        Self::Backbone(e.into())
    }
}

/// Seconds of calibration data needed to reach the recovery threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Recovery {
    Seconds(f64),
    NotRecovered,
}

impl fmt::Display for Recovery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Recovery::Seconds(s) => write!(f, "{s}"),
            Recovery::NotRecovered => f.write_str("not_recovered"),
        }
    }
}

impl FromStr for Recovery {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "not_recovered" | "-" => Ok(Recovery::NotRecovered),
            v => v
                .parse()
                .map(Recovery::Seconds)
                .map_err(|_| format!("bad recovery value {v:?}")),
        }
    }
}

impl Serialize for Recovery {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Recovery {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// First point of a `(seconds, R²)` curve at or above `threshold`.
pub fn recovery_time(curve: &[(f64, f64)], threshold: f64) -> Result<Recovery, MetricsError> {
    if curve.is_empty() {
        return Err(MetricsError::Empty("recovery curve".into()));
    }
    for w in curve.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(MetricsError::NotIncreasing(w[1].0, w[0].0));
        }
    }
    Ok(curve
        .iter()
        .find(|(_, r2)| *r2 >= threshold)
        .map_or(Recovery::NotRecovered, |&(s, _)| Recovery::Seconds(s)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    #[default]
    Converged,
    NotConverged,
}

/// One row of a metrics CSV.
///
/// Score columns are empty for runs that did not converge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub model: String,
    pub session: String,
    pub date_index: Option<usize>,
    pub r2_x: Option<f64>,
    pub r2_y: Option<f64>,
    pub r2_avg: Option<f64>,
    pub params: usize,
    pub latency_median_s: Option<f64>,
    pub latency_p95_s: Option<f64>,
    pub recovery_s: Option<Recovery>,
    pub zero_shot_r2: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub status: RunStatus,
}

impl MetricsRecord {
    pub fn new(experiment: &str, model: &str, session: &str, params: usize, seed: u64) -> Self {
        Self {
            experiment: experiment.to_string(),
            model: model.to_string(),
            session: session.to_string(),
            date_index: None,
            r2_x: None,
            r2_y: None,
            r2_avg: None,
            params,
            latency_median_s: None,
            latency_p95_s: None,
            recovery_s: None,
            zero_shot_r2: None,
            seed,
            status: RunStatus::Converged,
        }
    }

    pub fn with_scores(mut self, s: AxisScores) -> Self {
        self.r2_x = Some(s.r2_x);
        self.r2_y = Some(s.r2_y);
        self.r2_avg = Some(s.r2_avg);
        self
    }

    pub fn with_latency(mut self, l: &LatencyReport) -> Self {
        self.latency_median_s = Some(l.median_s);
        self.latency_p95_s = Some(l.p95_s);
        self
    }

    pub fn not_converged(mut self) -> Self {
        self.status = RunStatus::NotConverged;
        self.r2_x = None;
        self.r2_y = None;
        self.r2_avg = None;
        self
    }
}

pub fn write_records(path: &Path, records: &[MetricsRecord]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovery_examples() {
        assert_eq!(recovery_time(&[(10.0, 0.3), (20.0, 0.75)], 0.7).unwrap(), Recovery::Seconds(20.0));
        assert_eq!(recovery_time(&[(10.0, 0.3), (20.0, 0.5)], 0.7).unwrap(), Recovery::NotRecovered);
        assert_eq!(recovery_time(&[(10.0, 0.7)], 0.7).unwrap(), Recovery::Seconds(10.0));
        // the first crossing counts even if the curve dips afterwards
        assert_eq!(
            recovery_time(&[(10.0, 0.8), (20.0, 0.6), (30.0, 0.9)], 0.7).unwrap(),
            Recovery::Seconds(10.0)
        );
    }

    #[test]
    fn recovery_rejects_bad_curves() {
        assert!(matches!(recovery_time(&[], 0.7), Err(MetricsError::Empty(_))));
        assert!(matches!(
            recovery_time(&[(20.0, 0.1), (10.0, 0.9)], 0.7),
            Err(MetricsError::NotIncreasing(..))
        ));
    }

    #[test]
    fn csv_round_trip_keeps_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut a = MetricsRecord::new("finetune", "gru", "day4", 1234, 7).with_scores(AxisScores {
            r2_x: 0.5,
            r2_y: 0.7,
            r2_avg: 0.6,
        });
        a.date_index = Some(4);
        a.recovery_s = Some(Recovery::Seconds(30.0));
        a.zero_shot_r2 = Some(-0.25);
        let mut b = MetricsRecord::new("finetune", "transformer", "day4", 99, 7).not_converged();
        b.recovery_s = Some(Recovery::NotRecovered);
        write_records(&path, &[a.clone(), b.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "experiment,model,session,date_index,r2_x,r2_y,r2_avg,params,latency_median_s,latency_p95_s,recovery_s,zero_shot_r2,seed,status\n"
        ));
        assert_eq!(read_records(&path).unwrap(), vec![a, b]);
    }
}
