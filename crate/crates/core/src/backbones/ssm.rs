//! Linear state-space scans.
//!
//! [`ssm_scan_sequential`] and [`ssm_scan_blocked`] evaluate the generic
//! diagonal recurrence `s_t = ā_t ⊙ s_{t-1} + b_t`, `y_t = c_t · s_t`.
//! [`SelectiveScanOp`] is the fused, input-dependent form used inside the
//! Mamba block, where `ā = exp(Δ A)` and `b = Δ B x`.

use crate::tensor::{CustomOp, Scalar, Tensor};

/// Step-by-step evaluation; all operands are `steps × d`, row-major.
pub fn ssm_scan_sequential<F: Scalar>(a_bar: &[F], bu: &[F], c: &[F], steps: usize, d: usize) -> Vec<F> {
    let mut s = vec![F::zero(); d];
    let mut y = Vec::with_capacity(steps);
    for t in 0..steps {
        let r = t * d..(t + 1) * d;
        let mut acc = F::zero();
        for ((sj, (&a, &b)), &cj) in s.iter_mut().zip(a_bar[r.clone()].iter().zip(&bu[r.clone()])).zip(&c[r]) {
            *sj = a * *sj + b;
            acc += cj * *sj;
        }
        y.push(acc);
    }
    y
}

/// Blocked evaluation through the associative combine
/// `(a₁, b₁) ∘ (a₂, b₂) = (a₁a₂, a₂b₁ + b₂)`.
///
/// Each block is reduced independently from a zero state, block summaries
/// are chained with an exclusive scan, and the carried state is then
/// folded back into every position of its block.
pub fn ssm_scan_blocked<F: Scalar>(
    a_bar: &[F],
    bu: &[F],
    c: &[F],
    steps: usize,
    d: usize,
    block: usize,
) -> Vec<F> {
    let block = block.max(1);
    let nblocks = steps.div_ceil(block);
    // local prefix (A, B) per position, starting from the identity (1, 0)
    let mut pa = vec![F::zero(); steps * d];
    let mut pb = vec![F::zero(); steps * d];
    for blk in 0..nblocks {
        let (lo, hi) = (blk * block, ((blk + 1) * block).min(steps));
        let mut acc_a = vec![F::one(); d];
        let mut acc_b = vec![F::zero(); d];
        for t in lo..hi {
            for j in 0..d {
                let i = t * d + j;
                acc_a[j] *= a_bar[i];
                acc_b[j] = a_bar[i] * acc_b[j] + bu[i];
                pa[i] = acc_a[j];
                pb[i] = acc_b[j];
            }
        }
    }
    // state entering each block
    let mut carry = vec![vec![F::zero(); d]; nblocks];
    for blk in 1..nblocks {
        let last = (blk * block - 1) * d;
        for j in 0..d {
            carry[blk][j] = pa[last + j] * carry[blk - 1][j] + pb[last + j];
        }
    }
    (0..steps)
        .map(|t| {
            let s0 = &carry[t / block];
            (0..d)
                .map(|j| {
                    let i = t * d + j;
                    c[i] * (pa[i] * s0[j] + pb[i])
                })
                .fold(F::zero(), |s, x| s + x)
        })
        .collect()
}

/// Shapes of a batched selective scan. Sequence tensors are time-major
/// `(steps·batch) × width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ScanDims {
    pub steps: usize,
    pub batch: usize,
    pub inner: usize,
    pub state: usize,
}

/// Runs `s ← exp(Δ A) ⊙ s + Δ B x`, `y = C · s` over the whole sequence.
///
/// `x`, `delta`: rows × inner; `a`: inner × state; `bm`, `cm`: rows × state.
/// When `keep` is set, the state before every step is returned as well.
pub(crate) fn selective_scan<F: Scalar>(
    x: &[F],
    delta: &[F],
    a: &[F],
    bm: &[F],
    cm: &[F],
    dims: ScanDims,
    keep: bool,
) -> (Vec<F>, Vec<F>) {
    let ScanDims { steps, batch, inner, state } = dims;
    let lane = inner * state;
    let mut s = vec![F::zero(); batch * lane];
    let mut y = vec![F::zero(); steps * batch * inner];
    let mut saved = if keep { Vec::with_capacity(steps * batch * lane) } else { Vec::new() };
    for t in 0..steps {
        if keep {
            saved.extend_from_slice(&s);
        }
        for b in 0..batch {
            let row = t * batch + b;
            selective_step(
                &x[row * inner..(row + 1) * inner],
                &delta[row * inner..(row + 1) * inner],
                a,
                &bm[row * state..(row + 1) * state],
                &cm[row * state..(row + 1) * state],
                &mut s[b * lane..(b + 1) * lane],
                &mut y[row * inner..(row + 1) * inner],
            );
        }
    }
    (y, saved)
}

/// One timestep for one sequence; `s` is `inner × state`.
pub(crate) fn selective_step<F: Scalar>(x: &[F], delta: &[F], a: &[F], bm: &[F], cm: &[F], s: &mut [F], y: &mut [F]) {
    let n = bm.len();
    for d in 0..x.len() {
        let dl = delta[d];
        let dx = dl * x[d];
        let sd = &mut s[d * n..(d + 1) * n];
        let ad = &a[d * n..(d + 1) * n];
        let mut acc = F::zero();
        for j in 0..n {
            sd[j] = (dl * ad[j]).exp() * sd[j] + dx * bm[j];
            acc += cm[j] * sd[j];
        }
        y[d] = acc;
    }
}

/// Tape node for the selective scan; inputs `[x, delta, a, bm, cm]`.
pub(crate) struct SelectiveScanOp<F> {
    pub dims: ScanDims,
    /// State before each step, `steps × batch × inner × state`.
    pub states: Vec<F>,
}

impl<F: Scalar> CustomOp<F> for SelectiveScanOp<F> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _output: &Tensor<F>, gy: &[F]) -> Vec<Option<Vec<F>>> {
        let (x, delta, a, bm, cm) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        let ScanDims { steps, batch, inner, state: n } = self.dims;
        let lane = inner * n;
        let mut gx = vec![F::zero(); x.len()];
        let mut gdelta = vec![F::zero(); delta.len()];
        let mut ga = vec![F::zero(); a.len()];
        let mut gb = vec![F::zero(); bm.len()];
        let mut gc = vec![F::zero(); cm.len()];
        let mut ds = vec![F::zero(); batch * lane];
        let mut s_cur = vec![F::zero(); lane];
        for t in (0..steps).rev() {
            for b in 0..batch {
                let row = t * batch + b;
                let prev = &self.states[(t * batch + b) * lane..(t * batch + b + 1) * lane];
                let (xr, dr) = (&x[row * inner..(row + 1) * inner], &delta[row * inner..(row + 1) * inner]);
                let (br, cr) = (&bm[row * n..(row + 1) * n], &cm[row * n..(row + 1) * n]);
                let gyr = &gy[row * inner..(row + 1) * inner];
                let dsb = &mut ds[b * lane..(b + 1) * lane];
                for d in 0..inner {
                    let (dl, xd) = (dr[d], xr[d]);
                    let mut gdl = F::zero();
                    let mut gxd = F::zero();
                    for j in 0..n {
                        let idx = d * n + j;
                        let abar = (dl * a[idx]).exp();
                        s_cur[idx] = abar * prev[idx] + dl * xd * br[j];
                        // y_d = Σ_j c_j s_dj
                        gc[row * n + j] += gyr[d] * s_cur[idx];
                        let g = dsb[idx] + gyr[d] * cr[j];
                        let gabar = g * prev[idx] * abar;
                        gdl += gabar * a[idx] + g * xd * br[j];
                        ga[idx] += gabar * dl;
                        gb[row * n + j] += g * dl * xd;
                        gxd += g * dl * br[j];
                        dsb[idx] = g * abar;
                    }
                    gdelta[row * inner + d] += gdl;
                    gx[row * inner + d] += gxd;
                }
            }
        }
        vec![Some(gx), Some(gdelta), Some(ga), Some(gb), Some(gc)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_decay_hand_value() {
        let y = ssm_scan_sequential(&[0.5f64; 3], &[1.0, 0.0, 0.0], &[1.0; 3], 3, 1);
        assert_eq!(y, vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn zero_transition_is_memoryless() {
        let bu = [0.3f64, -1.0, 2.0, 0.5];
        let c = [2.0f64, 1.0, -1.0, 4.0];
        let y = ssm_scan_sequential(&[0.0; 4], &bu, &c, 4, 1);
        for t in 0..4 {
            assert_eq!(y[t], c[t] * bu[t]);
        }
    }

    #[test]
    fn blocked_matches_sequential_on_uneven_blocks() {
        let steps = 23;
        let d = 3;
        let a: Vec<f64> = (0..steps * d).map(|i| 0.5 + 0.4 * ((i as f64) * 0.7).sin()).collect();
        let b: Vec<f64> = (0..steps * d).map(|i| ((i as f64) * 1.3).cos()).collect();
        let c: Vec<f64> = (0..steps * d).map(|i| ((i as f64) * 0.37).sin()).collect();
        let seq = ssm_scan_sequential(&a, &b, &c, steps, d);
        for block in [1, 4, 5, 23, 40] {
            let blk = ssm_scan_blocked(&a, &b, &c, steps, d, block);
            for (p, q) in seq.iter().zip(&blk) {
                assert!((p - q).abs() < 1e-12, "block {block}");
            }
        }
    }
}
