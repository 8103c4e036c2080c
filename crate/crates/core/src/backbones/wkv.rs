//! The RWKV `wkv` recurrence.
//!
//! Buffers are time-major: element `(t, b, c)` lives at
//! `(t * batch + b) * channels + c`. `w` is the positive per-channel decay
//! and `u` the bonus applied to the current step.

use crate::tensor::{CustomOp, Scalar, Tensor};

/// Initial running maximum; finite so that `exp(MIN - x)` underflows to 0
/// instead of producing NaN through `inf - inf`.
fn min_exponent<F: Scalar>() -> F {
    F::lit(-1e30)
}

/// Direct evaluation of
/// `wkv_t = (Σ_{i<t} e^{-(t-1-i)w + k_i} v_i + e^{u+k_t} v_t) / (Σ_{i<t} e^{-(t-1-i)w + k_i} + e^{u+k_t})`
/// for a single sequence of `steps × channels`. Overflows for large `k`.
pub fn wkv_direct(k: &[f64], v: &[f64], w: &[f64], u: &[f64], steps: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; steps * channels];
    for t in 0..steps {
        for c in 0..channels {
            let cur = (u[c] + k[t * channels + c]).exp();
            let mut num = cur * v[t * channels + c];
            let mut den = cur;
            for i in 0..t {
                let e = (-((t - 1 - i) as f64) * w[c] + k[i * channels + c]).exp();
                num += e * v[i * channels + c];
                den += e;
            }
            out[t * channels + c] = num / den;
        }
    }
    out
}

/// Stabilized streaming evaluation of the same quantity.
///
/// The accumulators hold `num · e^{-p}` and `den · e^{-p}` for a running
/// exponent `p`, so no `e^{k}` is ever formed directly.
pub fn wkv_scan<F: Scalar>(
    k: &[F],
    v: &[F],
    w: &[F],
    u: &[F],
    steps: usize,
    batch: usize,
    channels: usize,
) -> Vec<F> {
    let lanes = batch * channels;
    let mut state = WkvState::new(lanes);
    let mut out = vec![F::zero(); steps * lanes];
    for t in 0..steps {
        let r = t * lanes..(t + 1) * lanes;
        state.step(&k[r.clone()], &v[r.clone()], w, u, channels, &mut out[r]);
    }
    out
}

/// Accumulators for `lanes` independent channels.
#[derive(Debug, Clone, PartialEq)]
pub struct WkvState<F> {
    pub num: Vec<F>,
    pub den: Vec<F>,
    pub max: Vec<F>,
}

impl<F: Scalar> WkvState<F> {
    pub fn new(lanes: usize) -> Self {
        Self {
            num: vec![F::zero(); lanes],
            den: vec![F::zero(); lanes],
            max: vec![min_exponent(); lanes],
        }
    }

    pub fn reset(&mut self) {
        self.num.iter_mut().for_each(|x| *x = F::zero());
        self.den.iter_mut().for_each(|x| *x = F::zero());
        self.max.iter_mut().for_each(|x| *x = min_exponent());
    }

    /// Consumes one step; `w` and `u` are indexed by `lane % channels`.
    pub fn step(&mut self, k: &[F], v: &[F], w: &[F], u: &[F], channels: usize, out: &mut [F]) {
        for j in 0..k.len() {
            let c = j % channels;
            let (aa, bb, pp) = (self.num[j], self.den[j], self.max[j]);
            let ww = u[c] + k[j];
            let q = pp.max(ww);
            let e1 = (pp - q).exp();
            let e2 = (ww - q).exp();
            out[j] = (e1 * aa + e2 * v[j]) / (e1 * bb + e2);

            let ww = pp - w[c];
            let q = ww.max(k[j]);
            let e1 = (ww - q).exp();
            let e2 = (k[j] - q).exp();
            self.num[j] = e1 * aa + e2 * v[j];
            self.den[j] = e1 * bb + e2;
            self.max[j] = q;
        }
    }
}

/// Tape node for `wkv(k, v, w, u)`; inputs in that order.
pub(crate) struct WkvOp {
    pub steps: usize,
    pub batch: usize,
    pub channels: usize,
}

impl<F: Scalar> CustomOp<F> for WkvOp {
    fn name(&self) -> &'static str {
        "wkv"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _output: &Tensor<F>, gy: &[F]) -> Vec<Option<Vec<F>>> {
        let (k, v, w, u) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data());
        let (steps, ch) = (self.steps, self.channels);
        let lanes = self.batch * ch;
        let n = steps * lanes;
        // Log-space bookkeeping with the decay negated: the state is
        // multiplied by e^{nw} per step.
        let nw: Vec<F> = w.iter().map(|&x| -x).collect();

        let mut y = vec![F::zero(); n];
        let mut z = vec![F::zero(); n];
        let mut zexp = vec![F::zero(); n];
        let mut gw = vec![F::zero(); ch];
        let mut gu = vec![F::zero(); ch];
        {
            let mut p = vec![F::zero(); lanes];
            let mut q = vec![F::zero(); lanes];
            let mut dpdw = vec![F::zero(); lanes];
            let mut dqdw = vec![F::zero(); lanes];
            let mut o = vec![min_exponent::<F>(); lanes];
            for t in 0..steps {
                for j in 0..lanes {
                    let c = j % ch;
                    let i = t * lanes + j;
                    let no = o[j].max(k[i] + u[c]);
                    let a = (o[j] - no).exp();
                    let b = (k[i] + u[c] - no).exp();
                    let iden = F::one() / (a * q[j] + b);
                    y[i] = (a * p[j] + b * v[i]) * iden;
                    z[i] = iden;
                    zexp[i] = k[i] + u[c] - no;
                    gw[c] += gy[i] * (dpdw[j] - dqdw[j] * y[i]) * iden * a;
                    gu[c] += gy[i] * (v[i] - y[i]) * b * iden;

                    let no = (nw[c] + o[j]).max(k[i]);
                    let a = (nw[c] + o[j] - no).exp();
                    let b = (k[i] - no).exp();
                    dpdw[j] = a * (p[j] + dpdw[j]);
                    dqdw[j] = a * (q[j] + dqdw[j]);
                    p[j] = a * p[j] + b * v[i];
                    q[j] = a * q[j] + b;
                    o[j] = no;
                }
            }
        }

        let mut gk = vec![F::zero(); n];
        let mut gv = vec![F::zero(); n];
        let mut gp = vec![F::zero(); lanes];
        let mut gq = vec![F::zero(); lanes];
        let mut o = vec![min_exponent::<F>(); lanes];
        for t in (0..steps).rev() {
            for j in 0..lanes {
                let c = j % ch;
                let i = t * lanes + j;
                let a = gy[i] * z[i] * zexp[i].exp();
                let b = (k[i] + o[j]).exp();
                gk[i] = a * (v[i] - y[i]) + b * (gp[j] * v[i] + gq[j]);
                gv[i] = a + b * gp[j];

                let no = (nw[c] + o[j]).max(zexp[i] - k[i] - u[c]);
                let a = (nw[c] + o[j] - no).exp();
                let b = gy[i] * z[i] * (zexp[i] - k[i] - u[c] - no).exp();
                gp[j] = a * gp[j] + b;
                gq[j] = a * gq[j] - b * y[i];
                o[j] = no;
            }
        }
        // d/dw of the positive decay is the negative of d/d(nw).
        let gw = gw.into_iter().map(|x| -x).collect();
        vec![Some(gk), Some(gv), Some(gw), Some(gu)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_returns_v() {
        let out = wkv_scan(&[3.0f64, -2.0], &[0.7, 1.5], &[0.5, 0.1], &[0.2, 0.9], 1, 1, 2);
        assert_eq!(out, vec![0.7, 1.5]);
    }

    #[test]
    fn two_step_hand_value() {
        let out = wkv_scan(&[0.0f64, 0.0], &[1.0, 3.0], &[0.0], &[0.0], 2, 1, 1);
        assert!((out[1] - 2.0).abs() < 1e-12);
        let direct = wkv_direct(&[0.0, 0.0], &[1.0, 3.0], &[0.0], &[0.0], 2, 1);
        assert!((direct[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn large_keys_stay_finite() {
        let k = [500.0f64, 800.0, 700.0];
        let out = wkv_scan(&k, &[1.0, 2.0, 3.0], &[1.0], &[0.0], 3, 1, 1);
        assert!(out.iter().all(|x| x.is_finite()));
        assert!((out[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn batch_lanes_are_independent() {
        // two sequences interleaved time-major vs. run separately
        let (k1, v1) = ([0.1f64, -0.4, 0.9], [1.0, -2.0, 0.5]);
        let (k2, v2) = ([1.1f64, 0.3, -0.2], [0.3, 0.8, -1.0]);
        let w = [0.7];
        let u = [0.1];
        let mut k = Vec::new();
        let mut v = Vec::new();
        for t in 0..3 {
            k.extend([k1[t], k2[t]]);
            v.extend([v1[t], v2[t]]);
        }
        let both = wkv_scan(&k, &v, &w, &u, 3, 2, 1);
        let a = wkv_scan(&k1, &v1, &w, &u, 3, 1, 1);
        let b = wkv_scan(&k2, &v2, &w, &u, 3, 1, 1);
        for t in 0..3 {
            assert_eq!(both[2 * t], a[t]);
            assert_eq!(both[2 * t + 1], b[t]);
        }
    }
}
