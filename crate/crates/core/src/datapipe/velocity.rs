use super::session::{whole_bins, VelocitySource};
use super::{DataError, RawSession};

/// Upsampling factor from the 250 Hz kinematics to 1 kHz.
const UPSAMPLE: usize = 4;
/// 1 kHz samples per 10 ms bin.
const SAMPLES_PER_BIN: usize = 10;

/// Linear interpolation of a 250 Hz series onto a 1 kHz grid spanning the
/// same time range: `4·(n−1)+1` samples.
pub fn interpolate_1khz(samples: &[f64]) -> Vec<f64> {
    if samples.len() < 2 {
        return samples.to_vec();
    }
    let m = UPSAMPLE * (samples.len() - 1) + 1;
    (0..m)
        .map(|j| {
            let i = j / UPSAMPLE;
            let frac = (j % UPSAMPLE) as f64 / UPSAMPLE as f64;
            if frac == 0.0 {
                samples[i]
            } else {
                samples[i] + (samples[i + 1] - samples[i]) * frac
            }
        })
        .collect()
}

/// Central differences scaled to units/s at 1 kHz; one-sided at the ends.
pub fn differentiate_1khz(pos: &[f64]) -> Vec<f64> {
    let n = pos.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|j| {
            if j == 0 {
                (pos[1] - pos[0]) * 1000.0
            } else if j == n - 1 {
                (pos[n - 1] - pos[n - 2]) * 1000.0
            } else {
                (pos[j + 1] - pos[j - 1]) * 500.0
            }
        })
        .collect()
}

/// Mean of the ten 1 kHz samples in each bin. Bins reaching past the last
/// interpolated sample hold the final velocity value.
fn bin_means(vel: &[f64], bins: usize) -> Vec<f64> {
    let last = vel.len() - 1;
    (0..bins)
        .map(|t| {
            (0..SAMPLES_PER_BIN)
                .map(|k| vel[(t * SAMPLES_PER_BIN + k).min(last)])
                .sum::<f64>()
                / SAMPLES_PER_BIN as f64
        })
        .collect()
}

/// Per-bin velocity `T × 2` of the chosen tracked point.
pub fn derive_velocity(raw: &RawSession, source: VelocitySource) -> Result<Vec<[f64; 2]>, DataError> {
    if raw.kinematics.len() < 2 {
        return Err(DataError::TooFewKinematics(raw.kinematics.len()));
    }
    let bins = whole_bins(raw.duration_s);
    let axis = |a: usize| -> Vec<f64> {
        let pos: Vec<f64> = raw
            .kinematics
            .iter()
            .map(|k| match source {
                VelocitySource::Cursor => k.cursor[a],
                VelocitySource::Finger => k.finger[a],
            })
            .collect();
        bin_means(&differentiate_1khz(&interpolate_1khz(&pos)), bins)
    };
    let (vx, vy) = (axis(0), axis(1));
    Ok(vx.into_iter().zip(vy).map(|(x, y)| [x, y]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::session::{expected_kin_samples, KinematicSample, KIN_RATE_HZ};

    fn session_from(pos: impl Fn(f64) -> [f64; 2], duration_s: f64) -> RawSession {
        let n = expected_kin_samples(duration_s);
        let kinematics = (0..n)
            .map(|i| {
                let t = i as f64 / KIN_RATE_HZ;
                let p = pos(t);
                KinematicSample {
                    t_s: t,
                    finger: p,
                    cursor: p,
                    target: [0.0, 0.0],
                }
            })
            .collect();
        RawSession {
            session_id: "k".into(),
            date_index: 0,
            spike_events: vec![],
            kinematics,
            duration_s,
        }
    }

    #[test]
    fn interpolation_inserts_three_points() {
        assert_eq!(interpolate_1khz(&[0.0, 1.0]), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn constant_position_has_zero_velocity() {
        let raw = session_from(|_| [3.0, -2.0], 1.0);
        let v = derive_velocity(&raw, VelocitySource::Cursor).unwrap();
        assert_eq!(v.len(), 100);
        assert!(v.iter().all(|p| p[0] == 0.0 && p[1] == 0.0));
    }

    #[test]
    fn ramp_gives_unit_velocity() {
        // x(t) = t, y(t) = -2t; central differences on a linear ramp are exact
        let raw = session_from(|t| [t, -2.0 * t], 1.0);
        let v = derive_velocity(&raw, VelocitySource::Cursor).unwrap();
        for p in &v {
            assert!((p[0] - 1.0).abs() < 1e-9, "{p:?}");
            assert!((p[1] + 2.0).abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn needs_two_samples() {
        let mut raw = session_from(|t| [t, t], 1.0);
        raw.kinematics.truncate(1);
        assert!(matches!(
            derive_velocity(&raw, VelocitySource::Cursor),
            Err(DataError::TooFewKinematics(1))
        ));
    }

    #[test]
    fn finger_source_reads_finger_track() {
        let mut raw = session_from(|_| [0.0, 0.0], 0.5);
        for (i, k) in raw.kinematics.iter_mut().enumerate() {
            k.finger = [i as f64 / KIN_RATE_HZ * 3.0, 0.0];
        }
        let v = derive_velocity(&raw, VelocitySource::Finger).unwrap();
        assert!((v[10][0] - 3.0).abs() < 1e-9);
        let c = derive_velocity(&raw, VelocitySource::Cursor).unwrap();
        assert_eq!(c[10][0], 0.0);
    }
}
