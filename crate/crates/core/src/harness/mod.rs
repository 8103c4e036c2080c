//! Experiment protocols: single-session, multi-session, fine-tuning on a
//! new session and the parameter-scaling sweep.
//!
//! Every run is single-threaded internally, so identical seed, config and
//! data give bitwise-identical checkpoints and metrics. Sweeps may spread
//! independent runs over threads without affecting their results.

mod checkpoint;
mod finetune;
mod scaling;
mod schedule;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::BackboneError;
use crate::datapipe::DataError;
use crate::metrics::{Aggregation, MetricsError, RECOVERY_THRESHOLD};
use crate::tensor::TensorError;

pub use checkpoint::{Checkpoint, Provenance};
pub use finetune::{finetune_new_session, FinetuneOutcome};
pub use scaling::{mean_stderr, scaling_sweep, ScalingRow};
pub use schedule::{schedule_batches, Strategy};
pub use train::{train_multi_session, train_single_session, MultiOutcome, RunOutcome, TrainLog};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("training did not converge after {attempts} attempts (last divergence at epoch {epoch}, step {step})")]
    NotConverged { attempts: usize, epoch: usize, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Whether this is a recorded training failure rather than a usage or
    /// data problem.
    pub fn is_training_failure(&self) -> bool {
        matches!(self, HarnessError::Diverged { .. } | HarnessError::NotConverged { .. })
    }
}

/// Optimization and protocol settings shared by all experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Passes over the training windows; 0 evaluates the untrained model.
    pub epochs: usize,
    pub learning_rate: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Window length S in bins.
    pub steps: usize,
    /// Offset between consecutive training windows.
    pub stride: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Transformer restarts with halved learning rate after divergence.
    pub max_retries: usize,
    pub aggregation: Aggregation,
    /// Seconds of new-session data added per fine-tuning increment.
    pub increment_s: f64,
    pub finetune_epochs: usize,
    /// Cap on fine-tuning increments; `None` uses all training data.
    pub max_increments: Option<usize>,
    pub recovery_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::single_session()
    }
}

impl TrainConfig {
    pub fn single_session() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 128,
            stride: 64,
            strategy: Strategy::Random,
            seed: 0,
            grad_clip: Some(1.0),
            max_retries: 3,
            aggregation: Aggregation::AxisMean,
            increment_s: 10.0,
            finetune_epochs: 5,
            max_increments: None,
            recovery_threshold: RECOVERY_THRESHOLD,
        }
    }

    pub fn multi_session() -> Self {
        Self {
            epochs: 50,
            steps: 1024,
            stride: 512,
            batch_size: 8,
            ..Self::single_session()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.steps == 0 || self.stride == 0 {
            return bad("steps and stride must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if !(self.increment_s > 0.0) {
            return bad("increment_s must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocols() {
        let s = TrainConfig::single_session();
        assert_eq!((s.epochs, s.steps), (30, 128));
        let m = TrainConfig::multi_session();
        assert_eq!((m.epochs, m.steps), (50, 1024));
        assert!(s.validate().is_ok() && m.validate().is_ok());
    }

    #[test]
    fn validation_rejects_zero_batch() {
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn config_reads_partial_json() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "strategy": "random_session"}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.strategy, Strategy::RandomSession);
        assert_eq!(c.steps, 128);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }
}
