use super::train::{derive_seed, fit, norm_table, Optimizer};
use super::{Checkpoint, HarnessError, Strategy, TrainConfig};
use crate::datapipe::{make_windows, PreparedSession, BINS_PER_S};
use crate::metrics::{evaluate, recovery_time, AxisScores, MetricsRecord, Recovery};

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub zero_shot: AxisScores,
    /// `(seconds of new-session data, test R²)` after each increment.
    pub curve: Vec<(f64, f64)>,
    /// `None` when no increment was run.
    pub recovery: Option<Recovery>,
    pub record: MetricsRecord,
    pub checkpoint: Checkpoint,
}

/// Zero-shot evaluation of `base` on `new`, then repeated fine-tuning on a
/// growing prefix of `new`'s training data.
///
/// Increment `k` trains all parameters for `cfg.finetune_epochs` epochs on
/// the first `k · cfg.increment_s` seconds and records test R². The
/// optimizer state carries over between increments.
pub fn finetune_new_session(
    base: &Checkpoint,
    new: &PreparedSession,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome, HarnessError> {
    cfg.validate()?;
    let mut model = base.model()?;
    if new.channels() != base.config.input_channels {
        return Err(HarnessError::Config(format!(
            "session {} has {} channels, checkpoint expects {}",
            new.session_id,
            new.channels(),
            base.config.input_channels
        )));
    }
    let bins = (cfg.increment_s * BINS_PER_S).round() as usize;
    let available = new.train.len() / bins.max(1);
    if available == 0 {
        return Err(HarnessError::Config(format!(
            "session {} has {} training bins, less than one {} s increment",
            new.session_id,
            new.train.len(),
            cfg.increment_s
        )));
    }
    let increments = cfg.max_increments.map_or(available, |m| m.min(available));
    let norms = norm_table(&[new]);
    let test = new.test_windows(cfg.steps)?;
    let zero_shot = evaluate(&model, &norms, &test, cfg.aggregation)?.scores;

    let tune = TrainConfig {
        strategy: Strategy::Random,
        ..cfg.clone()
    };
    let mut opt = Optimizer::new(&model, cfg.learning_rate, cfg.grad_clip);
    let mut curve = Vec::with_capacity(increments);
    let mut last = zero_shot;
    for k in 1..=increments {
        let part = new.train.sub_range(0, k * bins);
        let windows = make_windows(&part, cfg.steps, cfg.stride)?;
        let stream = derive_seed(cfg.seed, 0xF1, k as u64);
        fit(&mut model, &mut opt, &[(new.date_index, &windows)], &tune, cfg.finetune_epochs, stream)?;
        last = evaluate(&model, &norms, &test, cfg.aggregation)?.scores;
        curve.push((k as f64 * cfg.increment_s, last.r2_avg));
    }
    let recovery = if curve.is_empty() {
        None
    } else {
        Some(recovery_time(&curve, cfg.recovery_threshold)?)
    };

    let mut record = MetricsRecord::new("finetune", base.config.kind.name(), &new.session_id, model.param_count(), cfg.seed)
        .with_scores(last);
    record.date_index = Some(new.date_index);
    record.zero_shot_r2 = Some(zero_shot.r2_avg);
    record.recovery_s = recovery;

    let mut provenance = base.provenance.clone();
    provenance.data_hashes.push(new.data_hash.clone());
    provenance.seed = cfg.seed;
    let checkpoint = Checkpoint {
        config: base.config.clone(),
        params: model.params,
        norms,
        provenance,
    };
    Ok(FinetuneOutcome {
        zero_shot,
        curve,
        recovery,
        record,
        checkpoint,
    })
}
