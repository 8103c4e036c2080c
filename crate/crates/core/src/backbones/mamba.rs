//! Selective state-space (Mamba) blocks.
//!
//! Each pre-norm residual block expands `LN(x)` into a scan branch and a
//! gate branch. The scan branch goes through a causal depthwise
//! convolution and SiLU, then the selective SSM with input-dependent
//! `Δ = softplus(W_Δ · (W_x u)_{0..r} + b_Δ)`, `B` and `C`:
//!
//! ```text
//! s_t = exp(Δ_t A) ⊙ s_{t−1} + Δ_t B_t u_t      y_t = C_t · s_t + D ⊙ u_t
//! ```
//!
//! with `A = −exp(A_log)` and the first-order `B̄ = Δ B`. The output is
//! `W_out (y ⊙ SiLU(z))`.

use super::gru::sigmoid;
use super::ssm::{selective_scan, selective_step, ScanDims, SelectiveScanOp};
use super::{Builder, Init, Linear, ModelConfig, Norm};
use crate::tensor::{Graph, ParamId, Params, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Clone)]
struct MambaLayer {
    ln: Norm,
    in_proj: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
    x_proj: Linear,
    dt_proj: Linear,
    a_log: ParamId,
    d_skip: ParamId,
    out_proj: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Mamba {
    input: Linear,
    layers: Vec<MambaLayer>,
    ln_out: Norm,
    head: Linear,
    inner: usize,
    d_state: usize,
    dt_rank: usize,
    conv_width: usize,
}

/// Per-layer streaming state.
#[derive(Debug, Clone)]
pub(crate) struct MambaState<F> {
    /// Last `conv_width − 1` conv inputs, most recent first.
    conv: Vec<Vec<F>>,
    /// `inner × d_state`.
    ssm: Vec<F>,
}

impl<F: Scalar> MambaState<F> {
    pub fn reset(&mut self) {
        self.conv.iter_mut().flatten().for_each(|x| *x = F::zero());
        self.ssm.iter_mut().for_each(|x| *x = F::zero());
    }
}

fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

/// Bias giving `softplus(b) = Δ` for Δ spaced geometrically in [1e-3, 1e-1].
fn dt_bias(d: usize) -> Vec<f64> {
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    (0..d)
        .map(|i| {
            let frac = if d > 1 { i as f64 / (d - 1) as f64 } else { 0.5 };
            let dt = (lo + (hi - lo) * frac).exp();
            dt + (-(-dt).exp_m1()).ln()
        })
        .collect()
}

impl Mamba {
    pub fn build<F: Scalar>(cfg: &ModelConfig, b: &mut Builder<F>) -> Self {
        let (e, d, n, k, r) = (cfg.embed, cfg.inner(), cfg.d_state, cfg.conv_width, cfg.dt_rank());
        let input = b.linear("input", cfg.input_channels, e, true);
        let a_init: Vec<f64> = (0..d).flat_map(|_| (1..=n).map(|j| (j as f64).ln())).collect();
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("mamba{l}");
                MambaLayer {
                    ln: b.norm(&format!("{p}.ln"), e),
                    in_proj: b.linear(&format!("{p}.in_proj"), e, 2 * d, false),
                    conv_w: b.param(&format!("{p}.conv.weight"), &[k, d], Init::Uniform(1.0 / (k as f64).sqrt())),
                    conv_b: b.param(&format!("{p}.conv.bias"), &[d], Init::Zeros),
                    x_proj: b.linear(&format!("{p}.x_proj"), d, r + 2 * n, false),
                    dt_proj: {
                        let w = b.param(&format!("{p}.dt_proj.weight"), &[r, d], Init::Xavier);
                        let bias = b.param(&format!("{p}.dt_proj.bias"), &[d], Init::Values(dt_bias(d)));
                        Linear { w, b: Some(bias) }
                    },
                    a_log: b.param(&format!("{p}.a_log"), &[d, n], Init::Values(a_init.clone())),
                    d_skip: b.param(&format!("{p}.d"), &[d], Init::Ones),
                    out_proj: b.linear(&format!("{p}.out_proj"), d, e, false),
                }
            })
            .collect();
        let ln_out = b.norm("ln_out", e);
        let head = b.linear("head", e, 2, true);
        Self {
            input,
            layers,
            ln_out,
            head,
            inner: d,
            d_state: n,
            dt_rank: r,
            conv_width: k,
        }
    }

    /// `x` is time-major `(steps·batch) × C`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, steps: usize, batch: usize) -> Result<Var, TensorError> {
        let (d, n, r) = (self.inner, self.d_state, self.dt_rank);
        let mut h = self.input.apply(g, x)?;
        for l in &self.layers {
            let a = l.ln.apply(g, h)?;
            let xz = l.in_proj.apply(g, a)?;
            let xi = g.slice_cols(xz, 0, d)?;
            let z = g.slice_cols(xz, d, 2 * d)?;

            // causal depthwise convolution: Σ_j w_j ⊙ x_{t−j}
            let cw = g.param(l.conv_w);
            let mut acc = None;
            for j in 0..self.conv_width {
                let shifted = g.shift_rows(xi, j * batch);
                let wj = g.slice_rows(cw, j, j + 1)?;
                let term = g.mul(shifted, wj)?;
                acc = Some(match acc {
                    None => term,
                    Some(s) => g.add(s, term)?,
                });
            }
            let cb = g.param(l.conv_b);
            let conv = g.add(acc.expect("conv_width ≥ 1"), cb)?;
            let u = g.silu(conv);

            let proj = l.x_proj.apply(g, u)?;
            let dt_low = g.slice_cols(proj, 0, r)?;
            let bm = g.slice_cols(proj, r, r + n)?;
            let cm = g.slice_cols(proj, r + n, r + 2 * n)?;
            let dt = l.dt_proj.apply(g, dt_low)?;
            let delta = g.softplus(dt);
            let a_log = g.param(l.a_log);
            let a_pos = g.exp(a_log);
            let a_mat = g.scale(a_pos, -F::one());

            let dims = ScanDims {
                steps,
                batch,
                inner: d,
                state: n,
            };
            let (y, states) = selective_scan(
                g.value(u).data(),
                g.value(delta).data(),
                g.value(a_mat).data(),
                g.value(bm).data(),
                g.value(cm).data(),
                dims,
                g.is_training(),
            );
            let y = Tensor::from_vec(&[steps * batch, d], y)?;
            let y = g.custom(&[u, delta, a_mat, bm, cm], y, Box::new(SelectiveScanOp { dims, states }));

            let dsk = g.param(l.d_skip);
            let skip = g.mul(u, dsk)?;
            let y = g.add(y, skip)?;
            let gate = g.silu(z);
            let y = g.mul(y, gate)?;
            let o = l.out_proj.apply(g, y)?;
            h = g.add(h, o)?;
        }
        let out = self.ln_out.apply(g, h)?;
        self.head.apply(g, out)
    }

    pub fn new_state<F: Scalar>(&self) -> Vec<MambaState<F>> {
        self.layers
            .iter()
            .map(|_| MambaState {
                conv: vec![vec![F::zero(); self.inner]; self.conv_width - 1],
                ssm: vec![F::zero(); self.inner * self.d_state],
            })
            .collect()
    }

    pub fn step<F: Scalar>(&self, p: &Params<F>, state: &mut [MambaState<F>], x: &[F]) -> Vec<F> {
        let (d, n, r) = (self.inner, self.d_state, self.dt_rank);
        let mut h = self.input.apply_vec(p, x);
        for (l, st) in self.layers.iter().zip(state.iter_mut()) {
            let a = l.ln.apply_vec(p, &h);
            let xz = l.in_proj.apply_vec(p, &a);
            let (xi, z) = xz.split_at(d);

            let cw = p.get(l.conv_w);
            let cb = p.get(l.conv_b).data();
            let u: Vec<F> = (0..d)
                .map(|c| {
                    let mut acc = xi[c] * cw.at(0, c);
                    for j in 1..self.conv_width {
                        acc += st.conv[j - 1][c] * cw.at(j, c);
                    }
                    silu(acc + cb[c])
                })
                .collect();
            if !st.conv.is_empty() {
                st.conv.pop();
                st.conv.insert(0, xi.to_vec());
            }

            let proj = l.x_proj.apply_vec(p, &u);
            let delta: Vec<F> = l.dt_proj.apply_vec(p, &proj[..r]).into_iter().map(softplus).collect();
            let a_mat: Vec<F> = p.get(l.a_log).data().iter().map(|v| -v.exp()).collect();
            let mut y = vec![F::zero(); d];
            selective_step(&u, &delta, &a_mat, &proj[r..r + n], &proj[r + n..r + 2 * n], &mut st.ssm, &mut y);
            let dsk = p.get(l.d_skip).data();
            for c in 0..d {
                y[c] = (y[c] + u[c] * dsk[c]) * silu(z[c]);
            }
            let o = l.out_proj.apply_vec(p, &y);
            h.iter_mut().zip(o).for_each(|(h, o)| *h += o);
        }
        let out = self.ln_out.apply_vec(p, &h);
        self.head.apply_vec(p, &out)
    }
}
