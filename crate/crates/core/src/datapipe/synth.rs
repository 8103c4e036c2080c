//! Synthetic random-target reaching sessions with cosine-tuned channels.
//!
//! The cursor moves between uniformly drawn waypoints along minimum-jerk
//! segments separated by short dwells. Each channel fires as an
//! inhomogeneous Poisson process whose rate is linear in velocity:
//! `max(0, baseline + modulation · cos(θ_vel − θ_pref) · |v| / v_ref)`.
//! Day-to-day drift scales all rates by `rate_decay^day` and re-maps a
//! fraction of channels to different underlying neurons each day.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::session::{expected_kin_samples, KinematicSample, KIN_RATE_HZ};
use super::{DataError, RawSession};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelTuning {
    pub baseline_hz: f64,
    pub modulation_hz: f64,
    /// Radians.
    pub preferred_direction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    /// Multiplicative rate factor per day, in (0, 1].
    pub rate_decay: f64,
    pub permutation_seed: u64,
    /// Fraction of channels whose neuron assignment is reshuffled each day.
    pub permute_fraction: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            rate_decay: 1.0,
            permutation_seed: 0,
            permute_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub channels: usize,
    pub duration_s: f64,
    pub tuning: Vec<ChannelTuning>,
    /// Poisson spike counts when true, deterministic integrate-and-fire
    /// event placement otherwise.
    pub poisson_noise: bool,
    pub drift: DriftConfig,
    pub seed: u64,
    /// Waypoints are drawn from `[-workspace, workspace]²`.
    pub workspace: f64,
    /// Average reach speed (units/s) used to time each segment.
    pub mean_speed: f64,
    /// Speed at which a channel's modulation reaches its full depth.
    pub reference_speed: f64,
}

impl SynthConfig {
    /// Config with tuning curves drawn from `seed`: baselines and
    /// modulation depths uniform in [10, 30) Hz, preferred directions
    /// uniform on the circle.
    pub fn with_random_tuning(channels: usize, duration_s: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX, 0));
        let tuning = (0..channels)
            .map(|_| ChannelTuning {
                baseline_hz: rng.random_range(10.0..30.0),
                modulation_hz: rng.random_range(10.0..30.0),
                preferred_direction: rng.random_range(0.0..2.0 * PI),
            })
            .collect();
        Self {
            channels,
            duration_s,
            tuning,
            poisson_noise: true,
            drift: DriftConfig::default(),
            seed,
            workspace: 10.0,
            mean_speed: 20.0,
            reference_speed: 30.0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.channels == 0 || self.tuning.len() != self.channels {
            return bad(format!(
                "{} tuning entries for {} channels",
                self.tuning.len(),
                self.channels
            ));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration {} must be positive", self.duration_s));
        }
        if let Some(t) = self
            .tuning
            .iter()
            .find(|t| !(t.baseline_hz >= 0.0 && t.modulation_hz >= 0.0))
        {
            return bad(format!("negative rate in tuning {t:?}"));
        }
        let d = &self.drift;
        if !(d.rate_decay > 0.0 && d.rate_decay <= 1.0) {
            return bad(format!("drift factor {} outside (0, 1]", d.rate_decay));
        }
        if !(0.0..=1.0).contains(&d.permute_fraction) {
            return bad(format!("permute fraction {} outside [0, 1]", d.permute_fraction));
        }
        if !(self.workspace > 0.0 && self.mean_speed > 0.0 && self.reference_speed > 0.0) {
            return bad("workspace and speeds must be positive".into());
        }
        Ok(())
    }
}

fn mix(seed: u64, day: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed
        .wrapping_add(day.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Segment {
    start: f64,
    duration: f64,
    from: [f64; 2],
    to: [f64; 2],
}

struct Trajectory {
    segments: Vec<Segment>,
}

impl Trajectory {
    fn generate(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.workspace;
        let mut pos = [0.0, 0.0];
        let mut t = 0.0;
        let mut segments = Vec::new();
        while t < cfg.duration_s + 1.0 {
            let to = [rng.random_range(-w..w), rng.random_range(-w..w)];
            let dist = ((to[0] - pos[0]).powi(2) + (to[1] - pos[1]).powi(2)).sqrt();
            let duration = (dist / cfg.mean_speed).max(0.25);
            let dwell = rng.random_range(0.0..0.15);
            segments.push(Segment {
                start: t,
                duration,
                from: pos,
                to,
            });
            t += duration + dwell;
            pos = to;
        }
        Self { segments }
    }

    fn segment_at(&self, t: f64, hint: &mut usize) -> &Segment {
        while *hint + 1 < self.segments.len() && self.segments[*hint + 1].start <= t {
            *hint += 1;
        }
        &self.segments[*hint]
    }

    /// Position and velocity of the minimum-jerk profile at `t`.
    fn state(&self, t: f64, hint: &mut usize) -> ([f64; 2], [f64; 2]) {
        let s = self.segment_at(t, hint);
        let tau = ((t - s.start) / s.duration).clamp(0.0, 1.0);
        let shape = tau.powi(3) * (10.0 - 15.0 * tau + 6.0 * tau * tau);
        let dshape = if t - s.start >= s.duration {
            0.0
        } else {
            30.0 * tau * tau * (1.0 - tau) * (1.0 - tau) / s.duration
        };
        let mut p = [0.0; 2];
        let mut v = [0.0; 2];
        for a in 0..2 {
            let d = s.to[a] - s.from[a];
            p[a] = s.from[a] + d * shape;
            v[a] = d * dshape;
        }
        (p, v)
    }

    fn target_at(&self, t: f64, hint: &mut usize) -> [f64; 2] {
        self.segment_at(t, hint).to
    }
}

/// Channel → neuron assignment for `day` (identity on day 0).
pub fn channel_mapping(cfg: &SynthConfig, day: usize) -> Vec<usize> {
    let c = cfg.channels;
    let mut map: Vec<usize> = (0..c).collect();
    let moved = (cfg.drift.permute_fraction * c as f64).round() as usize;
    if moved < 2 {
        return map;
    }
    for d in 1..=day {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.drift.permutation_seed, d as u64, 3));
        let mut chosen: Vec<usize> = (0..c).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(moved);
        // rotate the chosen channels' assignments so every one of them moves
        let first = map[chosen[0]];
        for i in 0..moved - 1 {
            map[chosen[i]] = map[chosen[i + 1]];
        }
        map[chosen[moved - 1]] = first;
    }
    map
}

/// Generates day `day` of the synthetic study; deterministic in
/// `(cfg.seed, day)`.
pub fn generate_synthetic_session(cfg: &SynthConfig, day: usize) -> Result<RawSession, DataError> {
    cfg.validate()?;
    let mut traj_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, day as u64, 1));
    let mut spike_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, day as u64, 2));
    let traj = Trajectory::generate(cfg, &mut traj_rng);

    let n_kin = expected_kin_samples(cfg.duration_s);
    let mut hint = 0;
    let mut thint = 0;
    let kinematics = (0..n_kin)
        .map(|i| {
            let t = i as f64 / KIN_RATE_HZ;
            let (p, _) = traj.state(t, &mut hint);
            KinematicSample {
                t_s: t,
                finger: p,
                cursor: p,
                target: traj.target_at(t, &mut thint),
            }
        })
        .collect();

    let mapping = channel_mapping(cfg, day);
    let gain = cfg.drift.rate_decay.powi(day as i32);
    let dirs: Vec<[f64; 2]> = mapping
        .iter()
        .map(|&n| {
            let pd = cfg.tuning[n].preferred_direction;
            [pd.cos(), pd.sin()]
        })
        .collect();

    let n_ms = (cfg.duration_s * 1000.0).floor() as usize;
    let mut spike_events: Vec<Vec<f64>> = vec![Vec::new(); cfg.channels];
    let mut integrators = vec![0.0f64; cfg.channels];
    let mut hint = 0;
    let mut in_ms = Vec::new();
    for ms in 0..n_ms {
        let (_, v) = traj.state((ms as f64 + 0.5) / 1000.0, &mut hint);
        for (ch, events) in spike_events.iter_mut().enumerate() {
            let tune = &cfg.tuning[mapping[ch]];
            let drive = (v[0] * dirs[ch][0] + v[1] * dirs[ch][1]) / cfg.reference_speed;
            let rate = (tune.baseline_hz + tune.modulation_hz * drive).max(0.0) * gain;
            let expected = rate / 1000.0;
            let count = if cfg.poisson_noise {
                if expected > 0.0 {
                    Poisson::new(expected)
                        .map(|p| p.sample(&mut spike_rng) as usize)
                        .unwrap_or(0)
                } else {
                    0
                }
            } else {
                integrators[ch] += expected;
                let k = integrators[ch].floor();
                integrators[ch] -= k;
                k as usize
            };
            if count == 0 {
                continue;
            }
            in_ms.clear();
            for i in 0..count {
                let offset = if cfg.poisson_noise {
                    spike_rng.random::<f64>()
                } else {
                    (i as f64 + 0.5) / count as f64
                };
                in_ms.push((ms as f64 + offset) / 1000.0);
            }
            in_ms.sort_by(f64::total_cmp);
            for &t in &in_ms {
                if t < cfg.duration_s && events.last().is_none_or(|&l| t > l) {
                    events.push(t);
                }
            }
        }
    }

    Ok(RawSession {
        session_id: format!("synth-d{day:02}"),
        date_index: day,
        spike_events,
        kinematics,
        duration_s: cfg.duration_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(rate: f64, channels: usize, duration_s: f64) -> SynthConfig {
        let mut cfg = SynthConfig::with_random_tuning(channels, duration_s, 7);
        for t in &mut cfg.tuning {
            t.baseline_hz = rate;
            t.modulation_hz = 0.0;
        }
        cfg
    }

    #[test]
    fn unmodulated_rate_matches_baseline() {
        let (rate, dur) = (20.0, 60.0);
        let s = generate_synthetic_session(&flat(rate, 8, dur), 0).unwrap();
        let se = (rate * dur).sqrt() / dur;
        for (c, ev) in s.spike_events.iter().enumerate() {
            let empirical = ev.len() as f64 / dur;
            assert!((empirical - rate).abs() < 3.0 * se, "channel {c}: {empirical}");
        }
    }

    #[test]
    fn same_seed_same_day_is_identical() {
        let cfg = SynthConfig::with_random_tuning(6, 5.0, 11);
        assert_eq!(
            generate_synthetic_session(&cfg, 0).unwrap(),
            generate_synthetic_session(&cfg, 0).unwrap()
        );
        assert_ne!(
            generate_synthetic_session(&cfg, 0).unwrap(),
            generate_synthetic_session(&cfg, 1).unwrap()
        );
    }

    #[test]
    fn rate_decay_halves_rates() {
        let (rate, dur, ch) = (20.0, 60.0, 8);
        let mut cfg = flat(rate, ch, dur);
        cfg.drift.rate_decay = 0.5;
        let d1 = generate_synthetic_session(&cfg, 1).unwrap();
        let mean = d1.num_events() as f64 / (dur * ch as f64);
        // pooled Poisson standard error of the per-channel mean rate
        let se = (rate * 0.5 * dur * ch as f64).sqrt() / (dur * ch as f64);
        assert!((mean - rate * 0.5).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn sessions_are_valid() {
        let cfg = SynthConfig::with_random_tuning(4, 3.3, 1);
        let s = generate_synthetic_session(&cfg, 2).unwrap();
        s.validate().unwrap();
        assert_eq!(s.kinematics.len(), expected_kin_samples(3.3));
    }

    #[test]
    fn deterministic_mode_places_expected_counts() {
        let mut cfg = flat(25.0, 3, 10.0);
        cfg.poisson_noise = false;
        let s = generate_synthetic_session(&cfg, 0).unwrap();
        for ev in &s.spike_events {
            assert!((ev.len() as i64 - 250).abs() <= 1);
        }
    }

    #[test]
    fn mapping_permutes_requested_fraction() {
        let mut cfg = SynthConfig::with_random_tuning(20, 1.0, 1);
        cfg.drift.permute_fraction = 0.25;
        assert_eq!(channel_mapping(&cfg, 0), (0..20).collect::<Vec<_>>());
        let m1 = channel_mapping(&cfg, 1);
        let moved = m1.iter().enumerate().filter(|(i, &n)| *i != n).count();
        assert_eq!(moved, 5);
        let mut sorted = m1.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_drift_factor_rejected() {
        let mut cfg = SynthConfig::with_random_tuning(2, 1.0, 1);
        cfg.drift.rate_decay = 1.5;
        assert!(matches!(cfg.validate(), Err(DataError::Invalid(_))));
    }
}
