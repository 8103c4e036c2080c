use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;

/// Kinematic sampling rate of recorded sessions.
pub const KIN_RATE_HZ: f64 = 250.0;
/// Spike-count bin width.
pub const BIN_WIDTH_MS: f64 = 10.0;
/// Bins per second.
pub const BINS_PER_S: f64 = 1000.0 / BIN_WIDTH_MS;

/// One 250 Hz kinematic sample (raw recorded units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicSample {
    pub t_s: f64,
    pub finger: [f64; 2],
    pub cursor: [f64; 2],
    pub target: [f64; 2],
}

/// A recording day: threshold-crossing times per channel plus kinematics.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSession {
    pub session_id: String,
    /// Chronological day order, 0-based.
    pub date_index: usize,
    /// Per-channel ascending event times in seconds.
    pub spike_events: Vec<Vec<f64>>,
    pub kinematics: Vec<KinematicSample>,
    pub duration_s: f64,
}

/// Number of 250 Hz samples a session of `duration_s` carries.
pub fn expected_kin_samples(duration_s: f64) -> usize {
    (duration_s * KIN_RATE_HZ).round() as usize
}

/// Number of whole bins in `duration_s`; the trailing partial bin is
/// dropped. A tolerance of 1e-9 bins absorbs decimal representation error.
pub fn whole_bins(duration_s: f64) -> usize {
    (duration_s * BINS_PER_S + 1e-9).floor().max(0.0) as usize
}

impl RawSession {
    pub fn num_channels(&self) -> usize {
        self.spike_events.len()
    }

    pub fn num_events(&self) -> usize {
        self.spike_events.iter().map(Vec::len).sum()
    }

    pub fn num_bins(&self) -> usize {
        whole_bins(self.duration_s)
    }

    /// Checks every structural invariant of a session.
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(DataError::Invalid(format!(
                "duration {} must be positive",
                self.duration_s
            )));
        }
        for (c, events) in self.spike_events.iter().enumerate() {
            check_ascending(c, events)?;
            if let Some(&t) = events.iter().find(|&&t| !(0.0..self.duration_s).contains(&t)) {
                return Err(DataError::EventOutOfRange {
                    channel: c,
                    time_s: t,
                    duration_s: self.duration_s,
                });
            }
        }
        let expected = expected_kin_samples(self.duration_s);
        if self.kinematics.len() != expected {
            return Err(DataError::SampleCount {
                expected,
                found: self.kinematics.len(),
            });
        }
        Ok(())
    }

    /// SHA-256 over the session content, used as data provenance.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.session_id.as_bytes());
        h.update((self.date_index as u64).to_le_bytes());
        h.update(self.duration_s.to_le_bytes());
        for (c, events) in self.spike_events.iter().enumerate() {
            h.update((c as u64).to_le_bytes());
            h.update((events.len() as u64).to_le_bytes());
            for t in events {
                h.update(t.to_le_bytes());
            }
        }
        for k in &self.kinematics {
            for v in [
                k.t_s, k.finger[0], k.finger[1], k.cursor[0], k.cursor[1], k.target[0], k.target[1],
            ] {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn check_ascending(channel: usize, events: &[f64]) -> Result<(), DataError> {
    if events.windows(2).any(|w| !(w[0] < w[1])) || events.iter().any(|t| !t.is_finite()) {
        return Err(DataError::NonAscending { channel });
    }
    Ok(())
}

/// Which tracked point's velocity is decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocitySource {
    #[default]
    Cursor,
    Finger,
}

/// Per-channel z-score statistics plus velocity statistics, fitted on a
/// training portion only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub vel_mean: [f64; 2],
    pub vel_std: [f64; 2],
}

/// Spike counts per 10 ms bin with aligned per-bin velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedSession {
    pub session_id: String,
    pub date_index: usize,
    pub channels: usize,
    /// Row-major `T × C` counts.
    pub counts: Vec<u32>,
    /// Per-bin velocity in raw units per second; empty until derived.
    pub velocity: Vec<[f64; 2]>,
    pub bin_width_ms: f64,
    pub norm: Option<NormStats>,
    pub smoothed: bool,
}

impl BinnedSession {
    pub fn num_bins(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.counts.len() / self.channels
        }
    }

    pub fn count(&self, t: usize, c: usize) -> u32 {
        self.counts[t * self.channels + c]
    }

    pub fn channel_total(&self, c: usize) -> u64 {
        (0..self.num_bins()).map(|t| self.count(t, c) as u64).sum()
    }
}
