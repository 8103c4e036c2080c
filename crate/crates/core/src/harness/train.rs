use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{schedule_batches, Checkpoint, HarnessError, Provenance, Strategy, TrainConfig};
use crate::backbones::{BackboneError, Model, ModelConfig, ModelKind};
use crate::datapipe::{NormStats, PreparedSession, WindowSet};
use crate::metrics::{evaluate, Evaluation, MetricsRecord};
use crate::tensor::{AdamConfig, AdamState, Mode, Tensor};

/// Loss history of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Attempts used, including the successful one.
    pub attempts: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub checkpoint: Checkpoint,
    pub record: MetricsRecord,
    pub evaluation: Evaluation,
    pub log: TrainLog,
}

#[derive(Debug, Clone)]
pub struct MultiOutcome {
    pub checkpoint: Checkpoint,
    /// Pooled score over every session's test windows.
    pub record: MetricsRecord,
    pub per_session: Vec<MetricsRecord>,
    pub evaluation: Evaluation,
    pub log: TrainLog,
}

/// Deterministic per-purpose seed stream.
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

/// Optimizer plus the settings it needs between steps.
pub(crate) struct Optimizer {
    adam: AdamState<f32>,
    clip: Option<f64>,
    /// Steps taken so far; seeds dropout masks.
    steps: usize,
}

impl Optimizer {
    pub fn new(model: &Model<f32>, lr: f64, clip: Option<f64>) -> Self {
        let config = AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        };
        Self {
            adam: AdamState::new(&model.params, config),
            clip,
            steps: 0,
        }
    }
}

/// Runs `epochs` passes over `sessions`; each session's windows are
/// chunked into batches (shuffled within the session for the Random
/// strategy) and the batches ordered by [`schedule_batches`].
pub(crate) fn fit(
    model: &mut Model<f32>,
    opt: &mut Optimizer,
    sessions: &[(usize, &WindowSet)],
    cfg: &TrainConfig,
    epochs: usize,
    stream: u64,
) -> Result<Vec<f64>, HarnessError> {
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let epoch_seed = derive_seed(cfg.seed, stream, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let per_session = sessions
            .iter()
            .enumerate()
            .map(|(s, (date, set))| {
                let mut idx: Vec<usize> = (0..set.len()).collect();
                if cfg.strategy == Strategy::Random {
                    idx.shuffle(&mut rng);
                }
                let batches = idx.chunks(cfg.batch_size).map(|c| (s, c.to_vec())).collect();
                (*date, batches)
            })
            .collect();
        let order = schedule_batches(per_session, cfg.strategy, epoch_seed)?;
        let mut total = 0.0;
        for (step, (s, idx)) in order.iter().enumerate() {
            let loss = train_step(model, opt, sessions[*s].1, idx, cfg.seed)?;
            if !loss.is_finite() {
                return Err(HarnessError::Diverged { epoch, step });
            }
            total += loss;
        }
        losses.push(total / order.len() as f64);
    }
    Ok(losses)
}

/// One Adam step on the windows `idx` of `set`; returns the batch loss.
fn train_step(model: &mut Model<f32>, opt: &mut Optimizer, set: &WindowSet, idx: &[usize], seed: u64) -> Result<f64, HarnessError> {
    let (steps, c) = (set.steps, set.channels);
    let mut x = Vec::with_capacity(idx.len() * steps * c);
    let mut y = Vec::with_capacity(idx.len() * steps * 2);
    for &i in idx {
        let w = &set.samples[i];
        x.extend(w.input.iter().map(|&v| v as f32));
        y.extend(w.target.iter().map(|&v| v as f32));
    }
    let x = Tensor::from_vec(&[idx.len(), steps, c], x)?;
    let y = Tensor::from_vec(&[idx.len() * steps, 2], y)?;
    let (loss, mut grads) = {
        let mut g = model.graph(Mode::Train, derive_seed(seed, u64::MAX, opt.steps as u64));
        let out = match model.forward(&mut g, &x) {
            Err(BackboneError::NonFinite { .. }) => return Ok(f64::NAN),
            r => r?,
        };
        let target = g.constant(y);
        let loss = g.mse(out, target)?;
        let value = f64::from(g.value(loss).item());
        if !value.is_finite() {
            return Ok(value);
        }
        g.backward(loss)?;
        (value, g.param_grads())
    };
    let norm = f64::from(grads.norm());
    if !norm.is_finite() {
        return Ok(f64::NAN);
    }
    if let Some(clip) = opt.clip {
        if norm > clip {
            grads.scale((clip / norm) as f32);
        }
    }
    opt.adam.step(&mut model.params, &mut grads)?;
    opt.steps += 1;
    Ok(loss)
}

/// Trains a fresh model, restarting the Transformer with a halved
/// learning rate after each divergence.
pub(crate) fn train_with_retries(
    model_cfg: &ModelConfig,
    sessions: &[(usize, &WindowSet)],
    cfg: &TrainConfig,
) -> Result<(Model<f32>, TrainLog), HarnessError> {
    let retries = if model_cfg.kind == ModelKind::Transformer { cfg.max_retries } else { 0 };
    let mut lr = cfg.learning_rate;
    let mut last = (0, 0);
    for attempt in 0..=retries {
        let mut model = Model::<f32>::new(model_cfg.clone(), cfg.seed)?;
        let mut opt = Optimizer::new(&model, lr, cfg.grad_clip);
        match fit(&mut model, &mut opt, sessions, cfg, cfg.epochs, attempt as u64) {
            Ok(epoch_losses) => {
                let log = TrainLog {
                    epoch_losses,
                    steps: opt.steps,
                    attempts: attempt + 1,
                    learning_rate: lr,
                };
                return Ok((model, log));
            }
            Err(HarnessError::Diverged { epoch, step }) => {
                last = (epoch, step);
                lr /= 2.0;
            }
            Err(e) => return Err(e),
        }
    }
    if retries == 0 {
        return Err(HarnessError::Diverged {
            epoch: last.0,
            step: last.1,
        });
    }
    Err(HarnessError::NotConverged {
        attempts: retries + 1,
        epoch: last.0,
        step: last.1,
    })
}

pub(crate) fn provenance(cfg: &TrainConfig, sessions: &[&PreparedSession], log: &TrainLog) -> Provenance {
    Provenance {
        seed: cfg.seed,
        data_hashes: sessions.iter().map(|s| s.data_hash.clone()).collect(),
        epoch: log.epoch_losses.len(),
        learning_rate: log.learning_rate,
        attempts: log.attempts,
        version: concat!("ndbench ", env!("CARGO_PKG_VERSION")).to_string(),
    }
}

fn check_channels(model_cfg: &ModelConfig, sessions: &[&PreparedSession]) -> Result<(), HarnessError> {
    for s in sessions {
        if s.channels() != model_cfg.input_channels {
            return Err(HarnessError::Config(format!(
                "session {} has {} channels, model expects {}",
                s.session_id,
                s.channels(),
                model_cfg.input_channels
            )));
        }
    }
    Ok(())
}

pub(crate) fn norm_table(sessions: &[&PreparedSession]) -> BTreeMap<String, NormStats> {
    sessions.iter().map(|s| (s.session_id.clone(), s.norm.clone())).collect()
}

/// Trains on one session's training windows and scores its test windows.
pub fn train_single_session(
    session: &PreparedSession,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    check_channels(model_cfg, &[session])?;
    let train = session.train_windows(cfg.steps, cfg.stride)?;
    let test = session.test_windows(cfg.steps)?;
    let (model, log) = train_with_retries(model_cfg, &[(session.date_index, &train)], cfg)?;
    let norms = norm_table(&[session]);
    let evaluation = evaluate(&model, &norms, &test, cfg.aggregation)?;
    let mut record = MetricsRecord::new("single", model_cfg.kind.name(), &session.session_id, model.param_count(), cfg.seed)
        .with_scores(evaluation.scores);
    record.date_index = Some(session.date_index);
    let checkpoint = Checkpoint {
        config: model_cfg.clone(),
        provenance: provenance(cfg, &[session], &log),
        params: model.params,
        norms,
    };
    Ok(RunOutcome {
        checkpoint,
        record,
        evaluation,
        log,
    })
}

/// Trains one model on the union of all sessions' training windows under
/// `cfg.strategy`; reports pooled and per-session test R².
pub fn train_multi_session(
    sessions: &[PreparedSession],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<MultiOutcome, HarnessError> {
    cfg.validate()?;
    if sessions.len() < 2 {
        return Err(HarnessError::Config(format!(
            "multi-session training needs at least 2 sessions, got {}",
            sessions.len()
        )));
    }
    let refs: Vec<&PreparedSession> = sessions.iter().collect();
    check_channels(model_cfg, &refs)?;
    let train = sessions
        .iter()
        .map(|s| s.train_windows(cfg.steps, cfg.stride))
        .collect::<Result<Vec<_>, _>>()?;
    let mut test = WindowSet::empty(cfg.steps, cfg.steps, model_cfg.input_channels);
    for s in sessions {
        test.extend(s.test_windows(cfg.steps)?);
    }
    let pairs: Vec<(usize, &WindowSet)> = sessions.iter().map(|s| s.date_index).zip(&train).collect();
    let (model, log) = train_with_retries(model_cfg, &pairs, cfg)?;
    let norms = norm_table(&refs);
    let evaluation = evaluate(&model, &norms, &test, cfg.aggregation)?;
    let kind = model_cfg.kind.name();
    let experiment = format!("multi_{}", cfg.strategy);
    let record = MetricsRecord::new(&experiment, kind, "pooled", model.param_count(), cfg.seed).with_scores(evaluation.scores);
    let per_session = sessions
        .iter()
        .filter_map(|s| {
            let scores = evaluation.per_session.get(&s.session_id)?;
            let mut r = MetricsRecord::new(&experiment, kind, &s.session_id, model.param_count(), cfg.seed).with_scores(*scores);
            r.date_index = Some(s.date_index);
            Some(r)
        })
        .collect();
    let checkpoint = Checkpoint {
        config: model_cfg.clone(),
        provenance: provenance(cfg, &refs, &log),
        params: model.params,
        norms,
    };
    Ok(MultiOutcome {
        checkpoint,
        record,
        per_session,
        evaluation,
        log,
    })
}
