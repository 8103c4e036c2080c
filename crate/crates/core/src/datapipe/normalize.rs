use std::ops::Range;

use super::{DataError, NormStats};
use crate::tensor::Tensor;

/// Floor applied to standard deviations so constant channels map to 0.
pub const STD_FLOOR: f64 = 1e-6;

fn column_stats(data: &Tensor<f64>, rows: &[Range<usize>]) -> (Vec<f64>, Vec<f64>) {
    let c = data.cols();
    let n: usize = rows.iter().map(|r| r.len()).sum();
    let mut mean = vec![0.0; c];
    for r in rows {
        for t in r.clone() {
            mean.iter_mut().zip(data.row(t)).for_each(|(m, &x)| *m += x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for r in rows {
        for t in r.clone() {
            for ((v, &x), &m) in var.iter_mut().zip(data.row(t)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

/// Population z-score statistics over `train_range` rows of the inputs
/// (`T × C`) and velocity (`T × 2`).
pub fn fit_normalization(
    inputs: &Tensor<f64>,
    velocity: &Tensor<f64>,
    train_range: Range<usize>,
) -> Result<NormStats, DataError> {
    fit_normalization_multi(&[(inputs, velocity, train_range)])
}

/// Statistics pooled over several `(inputs, velocity, range)` portions.
pub fn fit_normalization_multi(
    parts: &[(&Tensor<f64>, &Tensor<f64>, Range<usize>)],
) -> Result<NormStats, DataError> {
    if parts.iter().all(|(_, _, r)| r.is_empty()) {
        return Err(DataError::EmptyRange);
    }
    let channels = parts[0].0.cols();
    // Pool by stacking the requested rows.
    let mut stacked_in = Vec::new();
    let mut stacked_vel = Vec::new();
    for (inp, vel, r) in parts {
        if inp.cols() != channels || r.end > inp.rows() || r.end > vel.rows() {
            return Err(DataError::Invalid(format!(
                "normalization range {r:?} outside data of {} rows",
                inp.rows()
            )));
        }
        stacked_in.extend_from_slice(&inp.data()[r.start * channels..r.end * channels]);
        stacked_vel.extend_from_slice(&vel.data()[r.start * 2..r.end * 2]);
    }
    let n = stacked_in.len() / channels.max(1);
    let inp = Tensor::from_vec(&[n, channels], stacked_in).expect("stacked rows");
    let vel = Tensor::from_vec(&[n, 2], stacked_vel).expect("stacked rows");
    let (channel_mean, channel_std) = column_stats(&inp, &[0..n]);
    let (vm, vs) = column_stats(&vel, &[0..n]);
    Ok(NormStats {
        channel_mean,
        channel_std,
        vel_mean: [vm[0], vm[1]],
        vel_std: [vs[0], vs[1]],
    })
}

impl NormStats {
    pub fn normalize_inputs(&self, x: &Tensor<f64>) -> Tensor<f64> {
        let c = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&self.channel_mean).zip(&self.channel_std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn normalize_velocity(&self, v: &Tensor<f64>) -> Tensor<f64> {
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(2) {
            for a in 0..2 {
                row[a] = (row[a] - self.vel_mean[a]) / self.vel_std[a];
            }
        }
        out
    }

    pub fn denormalize_velocity(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(i, &x)| x * self.vel_std[i % 2] + self.vel_mean[i % 2])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[values.len(), 1], values.to_vec()).unwrap()
    }

    fn vel(n: usize) -> Tensor<f64> {
        Tensor::from_vec(&[n, 2], (0..2 * n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn constant_channel_is_floored_and_zeroed() {
        let x = col(&[1.0, 1.0, 1.0]);
        let s = fit_normalization(&x, &vel(3), 0..3).unwrap();
        assert_eq!(s.channel_mean, vec![1.0]);
        assert_eq!(s.channel_std, vec![STD_FLOOR]);
        assert_eq!(s.normalize_inputs(&x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn population_zscore() {
        let x = col(&[0.0, 2.0]);
        let s = fit_normalization(&x, &vel(2), 0..2).unwrap();
        assert_eq!((s.channel_mean[0], s.channel_std[0]), (1.0, 1.0));
        assert_eq!(s.normalize_inputs(&x).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn train_stats_reused_on_test_rows() {
        let x = col(&[0.0, 2.0, 10.0]);
        let s = fit_normalization(&x, &vel(3), 0..2).unwrap();
        let test = col(&[10.0]);
        assert_eq!(s.normalize_inputs(&test).data(), &[9.0]);
    }

    #[test]
    fn empty_range_is_an_error() {
        let x = col(&[0.0, 2.0]);
        assert!(matches!(
            fit_normalization(&x, &vel(2), 1..1),
            Err(DataError::EmptyRange)
        ));
    }

    #[test]
    fn velocity_round_trips_through_denormalize() {
        let v = vel(4);
        let s = fit_normalization(&col(&[0.0, 1.0, 2.0, 3.0]), &v, 0..4).unwrap();
        let z = s.normalize_velocity(&v);
        let back = s.denormalize_velocity(z.data());
        for (a, b) in back.iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
