//! Spike events and kinematics → normalized, smoothed, windowed samples.

mod binning;
mod bundle;
mod normalize;
mod prepare;
mod session;
mod smooth;
mod split;
mod synth;
mod velocity;
mod window;

use std::path::PathBuf;

use thiserror::Error;

pub use binning::bin_spikes;
pub use bundle::{load_session, load_sessions, save_session, SessionManifest, SESSION_FORMAT};
pub use normalize::{fit_normalization, fit_normalization_multi, STD_FLOOR};
pub use prepare::{counts_matrix, preprocess, preprocess_all, NormMode, PrepConfig, PreparedSession};
pub use session::{
    expected_kin_samples, whole_bins, BinnedSession, KinematicSample, NormStats, RawSession, VelocitySource,
    BINS_PER_S, BIN_WIDTH_MS, KIN_RATE_HZ,
};
pub use smooth::{gaussian_kernel, gaussian_smooth};
pub use split::{split_bins, split_train_test, TRAIN_FRACTION};
pub use synth::{channel_mapping, generate_synthetic_session, ChannelTuning, DriftConfig, SynthConfig};
pub use velocity::{derive_velocity, differentiate_1khz, interpolate_1khz};
pub use window::{make_windows, window_starts, SeriesPart, Window, WindowSet, WindowTag};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("spike times on channel {channel} are not strictly ascending")]
    NonAscending { channel: usize },
    #[error("event at {time_s} s on channel {channel} outside [0, {duration_s})")]
    EventOutOfRange {
        channel: usize,
        time_s: f64,
        duration_s: f64,
    },
    #[error("expected {expected} kinematic samples, found {found}")]
    SampleCount { expected: usize, found: usize },
    #[error("need at least 2 kinematic samples, found {0}")]
    TooFewKinematics(usize),
    #[error("spike channel {channel} outside manifest channel count {num_channels}")]
    ChannelOutOfRange { channel: usize, num_channels: usize },
    #[error("malformed bundle: {0}")]
    Manifest(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("window of {steps} bins exceeds series of {total} bins")]
    WindowTooLong { steps: usize, total: usize },
    #[error("empty normalization range")]
    EmptyRange,
    #[error("invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
