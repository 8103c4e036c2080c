use std::collections::BTreeMap;

use super::{axis_scores, Aggregation, AxisScores, MetricsError};
use crate::backbones::Model;
use crate::datapipe::{NormStats, Window, WindowSet};
use crate::tensor::{Scalar, Tensor};

/// Windows per forward pass during evaluation.
const EVAL_BATCH: usize = 16;

/// De-normalized predictions and targets of an evaluation, concatenated
/// in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scores: AxisScores,
    /// Interleaved `[x, y]` per bin.
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
    /// Per-session scores, keyed by session id, when more than one session
    /// is present.
    pub per_session: BTreeMap<String, AxisScores>,
}

/// Runs `model` over each window in evaluation mode; output is
/// normalized, one `S × 2` block per window in input order.
pub fn predict_windows<F: Scalar>(model: &Model<F>, windows: &[&Window], steps: usize) -> Result<Vec<Vec<f64>>, MetricsError> {
    let c = model.config().input_channels;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_BATCH) {
        let data: Vec<F> = chunk.iter().flat_map(|w| w.input.iter().map(|&v| F::lit(v))).collect();
        let x = Tensor::from_vec(&[chunk.len(), steps, c], data)?;
        let y = model.predict(&x)?;
        for block in y.data().chunks(steps * 2) {
            out.push(block.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect());
        }
    }
    Ok(out)
}

/// Sorts windows chronologically and rejects overlaps within a session.
fn chronological(set: &WindowSet) -> Result<Vec<&Window>, MetricsError> {
    if set.is_empty() {
        return Err(MetricsError::Empty("evaluation windows".into()));
    }
    let mut order: Vec<&Window> = set.samples.iter().collect();
    order.sort_by(|a, b| a.tag.cmp(&b.tag));
    for pair in order.windows(2) {
        let (a, b) = (&pair[0].tag, &pair[1].tag);
        if a.session_id == b.session_id && b.start_bin < a.start_bin + set.steps {
            return Err(MetricsError::Overlap {
                session: a.session_id.clone(),
                start: b.start_bin,
                previous_end: a.start_bin + set.steps,
            });
        }
    }
    Ok(order)
}

/// Scores `model` on non-overlapping test windows.
///
/// Predictions and targets are mapped back to velocity units with the
/// statistics of each window's session before R² is taken over the
/// concatenated signal.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    norms: &BTreeMap<String, NormStats>,
    set: &WindowSet,
    agg: Aggregation,
) -> Result<Evaluation, MetricsError> {
    let order = chronological(set)?;
    let blocks = predict_windows(model, &order, set.steps)?;
    let mut predictions = Vec::with_capacity(blocks.len() * set.steps * 2);
    let mut targets = Vec::with_capacity(predictions.capacity());
    let mut by_session: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (w, pred) in order.iter().zip(blocks) {
        let norm = norms
            .get(&w.tag.session_id)
            .ok_or_else(|| MetricsError::MissingNorm(w.tag.session_id.clone()))?;
        let p = norm.denormalize_velocity(&pred);
        let t = norm.denormalize_velocity(&w.target);
        let entry = by_session.entry(&w.tag.session_id).or_default();
        entry.0.extend_from_slice(&t);
        entry.1.extend_from_slice(&p);
        targets.extend(t);
        predictions.extend(p);
    }
    let scores = axis_scores(&targets, &predictions, agg)?;
    let per_session = if by_session.len() > 1 {
        by_session
            .into_iter()
            .map(|(id, (t, p))| Ok((id.to_string(), axis_scores(&t, &p, agg)?)))
            .collect::<Result<_, MetricsError>>()?
    } else {
        BTreeMap::new()
    };
    Ok(Evaluation {
        scores,
        predictions,
        targets,
        per_session,
    })
}
