use serde::{Deserialize, Serialize};

use super::normalize::{fit_normalization, fit_normalization_multi};
use super::session::{BinnedSession, VelocitySource, BIN_WIDTH_MS};
use super::smooth::gaussian_smooth;
use super::split::{split_bins, TRAIN_FRACTION};
use super::window::{make_windows, SeriesPart, WindowSet};
use super::{bin_spikes, derive_velocity, DataError, NormStats, RawSession};
use crate::tensor::Tensor;

/// Preprocessing knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    /// Gaussian smoothing width; 0 disables smoothing.
    pub sigma_ms: f64,
    pub smooth_velocity: bool,
    pub velocity_source: VelocitySource,
    pub train_fraction: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            sigma_ms: 40.0,
            smooth_velocity: true,
            velocity_source: VelocitySource::Cursor,
            train_fraction: TRAIN_FRACTION,
        }
    }
}

/// How normalization statistics are shared across sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    PerSession,
    Global,
}

/// A session binned, split chronologically, smoothed within each split and
/// z-scored with its training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSession {
    pub session_id: String,
    pub date_index: usize,
    pub total_bins: usize,
    pub norm: NormStats,
    pub train: SeriesPart,
    pub test: SeriesPart,
    pub data_hash: String,
    raw_train: SeriesPart,
    raw_test: SeriesPart,
}

impl PreparedSession {
    pub fn channels(&self) -> usize {
        self.train.channels()
    }

    pub fn train_windows(&self, steps: usize, stride: usize) -> Result<WindowSet, DataError> {
        make_windows(&self.train, steps, stride)
    }

    /// Non-overlapping evaluation windows over the test portion.
    pub fn test_windows(&self, steps: usize) -> Result<WindowSet, DataError> {
        make_windows(&self.test, steps, steps)
    }

    /// Smoothed, unnormalized training portion.
    pub fn raw_train(&self) -> &SeriesPart {
        &self.raw_train
    }

    pub fn raw_test(&self) -> &SeriesPart {
        &self.raw_test
    }

    /// Re-applies different statistics (e.g. pooled across sessions).
    pub fn renormalize(&mut self, norm: NormStats) {
        self.train = apply(&self.raw_train, &norm);
        self.test = apply(&self.raw_test, &norm);
        self.norm = norm;
    }
}

fn apply(part: &SeriesPart, norm: &NormStats) -> SeriesPart {
    SeriesPart {
        inputs: norm.normalize_inputs(&part.inputs),
        targets: norm.normalize_velocity(&part.targets),
        ..part.clone()
    }
}

/// Counts as a `T × C` float matrix.
pub fn counts_matrix(binned: &BinnedSession) -> Tensor<f64> {
    Tensor::from_vec(
        &[binned.num_bins(), binned.channels],
        binned.counts.iter().map(|&c| c as f64).collect(),
    )
    .expect("counts are T×C")
}

pub fn preprocess(raw: &RawSession, cfg: &PrepConfig) -> Result<PreparedSession, DataError> {
    let mut binned = bin_spikes(raw)?;
    binned.velocity = derive_velocity(raw, cfg.velocity_source)?;
    let total = binned.num_bins();
    let (train_r, test_r) = split_bins(total, cfg.train_fraction);
    if train_r.is_empty() || test_r.is_empty() {
        return Err(DataError::Invalid(format!(
            "session {} has {total} bins, too short to split",
            raw.session_id
        )));
    }
    let counts = counts_matrix(&binned);
    let vel = Tensor::from_vec(&[total, 2], binned.velocity.iter().flatten().copied().collect())
        .expect("velocity is T×2");
    let full = SeriesPart {
        session_id: raw.session_id.clone(),
        date_index: raw.date_index,
        start_bin: 0,
        inputs: counts,
        targets: vel,
    };
    let smooth_part = |r: std::ops::Range<usize>| {
        let mut p = full.sub_range(r.start, r.end);
        p.inputs = gaussian_smooth(&p.inputs, cfg.sigma_ms, BIN_WIDTH_MS);
        if cfg.smooth_velocity {
            p.targets = gaussian_smooth(&p.targets, cfg.sigma_ms, BIN_WIDTH_MS);
        }
        p
    };
    let raw_train = smooth_part(train_r);
    let raw_test = smooth_part(test_r);
    let norm = fit_normalization(&raw_train.inputs, &raw_train.targets, 0..raw_train.len())?;
    Ok(PreparedSession {
        session_id: raw.session_id.clone(),
        date_index: raw.date_index,
        total_bins: total,
        train: apply(&raw_train, &norm),
        test: apply(&raw_test, &norm),
        norm,
        data_hash: raw.content_hash(),
        raw_train,
        raw_test,
    })
}

/// Preprocesses several sessions and, in [`NormMode::Global`], replaces the
/// per-session statistics with ones pooled over all training portions.
pub fn preprocess_all(
    raws: &[RawSession],
    cfg: &PrepConfig,
    mode: NormMode,
) -> Result<Vec<PreparedSession>, DataError> {
    let mut out = raws.iter().map(|r| preprocess(r, cfg)).collect::<Result<Vec<_>, _>>()?;
    if mode == NormMode::Global && !out.is_empty() {
        let parts: Vec<_> = out
            .iter()
            .map(|p| (&p.raw_train.inputs, &p.raw_train.targets, 0..p.raw_train.len()))
            .collect();
        let pooled = fit_normalization_multi(&parts)?;
        out.iter_mut().for_each(|p| p.renormalize(pooled.clone()));
    }
    Ok(out)
}
