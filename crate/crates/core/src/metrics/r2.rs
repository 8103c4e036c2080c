use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Coefficient of determination `1 − RSS/TSS`.
///
/// Negative for predictors worse than the mean; exactly 1 for a perfect
/// fit and exactly 0 for the constant-mean predictor.
pub fn r_squared(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricsError> {
    if y.len() != y_hat.len() {
        return Err(MetricsError::LengthMismatch {
            targets: y.len(),
            predictions: y_hat.len(),
        });
    }
    if y.len() < 2 {
        return Err(MetricsError::TooFewSamples(y.len()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let tss: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if tss == 0.0 {
        return Err(MetricsError::ConstantTarget);
    }
    let rss: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - rss / tss)
}

/// How the two velocity axes are folded into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the per-axis R².
    #[default]
    AxisMean,
    /// One R² over both axes stacked, each centred on its own mean.
    Stacked,
}

/// Per-axis and combined R² of interleaved `[x0, y0, x1, y1, …]` series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisScores {
    pub r2_x: f64,
    pub r2_y: f64,
    pub r2_avg: f64,
}

pub fn axis_scores(targets: &[f64], preds: &[f64], agg: Aggregation) -> Result<AxisScores, MetricsError> {
    if targets.len() != preds.len() || !targets.len().is_multiple_of(2) {
        return Err(MetricsError::LengthMismatch {
            targets: targets.len(),
            predictions: preds.len(),
        });
    }
    let axis = |v: &[f64], a: usize| v.iter().skip(a).step_by(2).copied().collect::<Vec<_>>();
    let (tx, ty) = (axis(targets, 0), axis(targets, 1));
    let (px, py) = (axis(preds, 0), axis(preds, 1));
    let r2_x = r_squared(&tx, &px)?;
    let r2_y = r_squared(&ty, &py)?;
    let r2_avg = match agg {
        Aggregation::AxisMean => (r2_x + r2_y) / 2.0,
        Aggregation::Stacked => {
            let tss = centred_ss(&tx) + centred_ss(&ty);
            let rss: f64 = targets.iter().zip(preds).map(|(a, b)| (a - b) * (a - b)).sum();
            1.0 - rss / tss
        }
    };
    Ok(AxisScores { r2_x, r2_y, r2_avg })
}

fn centred_ss(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum()
}
