//! RWKV (v4-style blocks).
//!
//! Each layer is `x += TimeMix(LN₁(x))` then `x += ChannelMix(LN₂(x))`.
//! Both sub-blocks token-shift their input: `mix(μ) = μ ⊙ x_t + (1 − μ) ⊙ x_{t−1}`
//! with `x_{−1} = 0`. Time mixing computes
//! `W_o (σ(r) ⊙ wkv(k, v, w, u))` with `r, k, v = W_{r,k,v} · mix(μ_{r,k,v})`;
//! channel mixing is `σ(W_r' mix(μ_r')) ⊙ W_v' relu(W_k' mix(μ_k'))²`.
//! The decay is stored as `log w` so that `w = exp(·)` stays positive.

use super::gru::sigmoid;
use super::wkv::{wkv_scan, WkvOp, WkvState};
use super::{vecmat, Builder, Init, Linear, ModelConfig, Norm};
use crate::tensor::{Graph, ParamId, Params, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Clone)]
struct RwkvLayer {
    ln1: Norm,
    mu_k: ParamId,
    mu_v: ParamId,
    mu_r: ParamId,
    wk: Linear,
    wv: Linear,
    wr: Linear,
    wo: Linear,
    log_decay: ParamId,
    bonus: ParamId,
    ln2: Norm,
    cmu_k: ParamId,
    cmu_r: ParamId,
    ck: Linear,
    cv: Linear,
    cr: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Rwkv {
    input: Linear,
    layers: Vec<RwkvLayer>,
    ln_out: Norm,
    head: Linear,
    embed: usize,
}

/// Per-layer streaming state.
#[derive(Debug, Clone)]
pub(crate) struct RwkvState<F> {
    att_prev: Vec<F>,
    ffn_prev: Vec<F>,
    wkv: WkvState<F>,
}

impl<F: Scalar> RwkvState<F> {
    pub fn reset(&mut self) {
        self.att_prev.iter_mut().for_each(|x| *x = F::zero());
        self.ffn_prev.iter_mut().for_each(|x| *x = F::zero());
        self.wkv.reset();
    }
}

/// Depth-dependent initial values for the mixing and decay vectors.
fn ramps(e: usize, layer: usize, layers: usize) -> [Vec<f64>; 7] {
    let r01 = if layers > 1 { layer as f64 / (layers - 1) as f64 } else { 0.0 };
    let r10 = 1.0 - layer as f64 / layers as f64;
    let ddd: Vec<f64> = (0..e).map(|i| i as f64 / e as f64).collect();
    let mu_k = ddd.iter().map(|d| d.powf(r10)).collect();
    let mu_v = ddd.iter().map(|d| d.powf(r10) + 0.3 * r01).collect();
    let mu_r = ddd.iter().map(|d| d.powf(0.5 * r10)).collect();
    let span = (e.max(2) - 1) as f64;
    let log_decay = (0..e)
        .map(|i| -5.0 + 8.0 * (i as f64 / span).powf(0.7 + 1.3 * r01))
        .collect();
    let bonus = (0..e).map(|i| 0.3f64.ln() + (((i + 1) % 3) as f64 - 1.0) * 0.5).collect();
    let cmu = ddd.iter().map(|d| d.powf(r10)).collect::<Vec<_>>();
    [mu_k, mu_v, mu_r, log_decay, bonus, cmu.clone(), cmu]
}

/// `prev + diff ⊙ μ` with `diff = cur − prev`.
fn mix_var<F: Scalar>(g: &mut Graph<'_, F>, prev: Var, diff: Var, mu: ParamId) -> Result<Var, TensorError> {
    let m = g.param(mu);
    let scaled = g.mul(diff, m)?;
    g.add(prev, scaled)
}

fn mix_vec<F: Scalar>(cur: &[F], prev: &[F], mu: &Tensor<F>) -> Vec<F> {
    cur.iter()
        .zip(prev)
        .zip(mu.data())
        .map(|((&c, &p), &m)| p + (c - p) * m)
        .collect()
}

impl Rwkv {
    pub fn build<F: Scalar>(cfg: &ModelConfig, b: &mut Builder<F>) -> Self {
        let (e, f) = (cfg.embed, cfg.ffn_hidden());
        let input = b.linear("input", cfg.input_channels, e, true);
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("rwkv{l}");
                let [mu_k, mu_v, mu_r, log_decay, bonus, cmu_k, cmu_r] = ramps(e, l, cfg.layers);
                RwkvLayer {
                    ln1: b.norm(&format!("{p}.ln1"), e),
                    mu_k: b.param(&format!("{p}.att.mu_k"), &[e], Init::Values(mu_k)),
                    mu_v: b.param(&format!("{p}.att.mu_v"), &[e], Init::Values(mu_v)),
                    mu_r: b.param(&format!("{p}.att.mu_r"), &[e], Init::Values(mu_r)),
                    wk: b.linear(&format!("{p}.att.w_k"), e, e, false),
                    wv: b.linear(&format!("{p}.att.w_v"), e, e, false),
                    wr: b.linear(&format!("{p}.att.w_r"), e, e, false),
                    wo: b.linear(&format!("{p}.att.w_o"), e, e, false),
                    log_decay: b.param(&format!("{p}.att.log_decay"), &[e], Init::Values(log_decay)),
                    bonus: b.param(&format!("{p}.att.bonus"), &[e], Init::Values(bonus)),
                    ln2: b.norm(&format!("{p}.ln2"), e),
                    cmu_k: b.param(&format!("{p}.ffn.mu_k"), &[e], Init::Values(cmu_k)),
                    cmu_r: b.param(&format!("{p}.ffn.mu_r"), &[e], Init::Values(cmu_r)),
                    ck: b.linear(&format!("{p}.ffn.w_k"), e, f, false),
                    cv: b.linear(&format!("{p}.ffn.w_v"), f, e, false),
                    cr: b.linear(&format!("{p}.ffn.w_r"), e, e, false),
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
            embed: e,
        }
    }

    /// `x` is time-major `(steps·batch) × C`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, steps: usize, batch: usize) -> Result<Var, TensorError> {
        let mut h = self.input.apply(g, x)?;
        for l in &self.layers {
            let a = l.ln1.apply(g, h)?;
            let prev = g.shift_rows(a, batch);
            let diff = g.sub(a, prev)?;
            let xk = mix_var(g, prev, diff, l.mu_k)?;
            let xv = mix_var(g, prev, diff, l.mu_v)?;
            let xr = mix_var(g, prev, diff, l.mu_r)?;
            let k = l.wk.apply(g, xk)?;
            let v = l.wv.apply(g, xv)?;
            let r = l.wr.apply(g, xr)?;
            let log_w = g.param(l.log_decay);
            let w = g.exp(log_w);
            let u = g.param(l.bonus);
            let out = wkv_scan(
                g.value(k).data(),
                g.value(v).data(),
                g.value(w).data(),
                g.value(u).data(),
                steps,
                batch,
                self.embed,
            );
            let out = Tensor::from_vec(&[steps * batch, self.embed], out)?;
            let op = WkvOp {
                steps,
                batch,
                channels: self.embed,
            };
            let wkv = g.custom(&[k, v, w, u], out, Box::new(op));
            let gate = g.sigmoid(r);
            let gated = g.mul(gate, wkv)?;
            let o = l.wo.apply(g, gated)?;
            h = g.add(h, o)?;

            let a = l.ln2.apply(g, h)?;
            let prev = g.shift_rows(a, batch);
            let diff = g.sub(a, prev)?;
            let xk = mix_var(g, prev, diff, l.cmu_k)?;
            let xr = mix_var(g, prev, diff, l.cmu_r)?;
            let kk = l.ck.apply(g, xk)?;
            let kk = g.relu(kk);
            let kk = g.square(kk)?;
            let vv = l.cv.apply(g, kk)?;
            let rr = l.cr.apply(g, xr)?;
            let rr = g.sigmoid(rr);
            let o = g.mul(rr, vv)?;
            h = g.add(h, o)?;
        }
        let n = self.ln_out.apply(g, h)?;
        self.head.apply(g, n)
    }

    pub fn new_state<F: Scalar>(&self) -> Vec<RwkvState<F>> {
        let e = self.embed;
        self.layers
            .iter()
            .map(|_| RwkvState {
                att_prev: vec![F::zero(); e],
                ffn_prev: vec![F::zero(); e],
                wkv: WkvState::new(e),
            })
            .collect()
    }

    pub fn step<F: Scalar>(&self, p: &Params<F>, state: &mut [RwkvState<F>], x: &[F]) -> Vec<F> {
        let e = self.embed;
        let mut h = self.input.apply_vec(p, x);
        for (l, st) in self.layers.iter().zip(state.iter_mut()) {
            let a = l.ln1.apply_vec(p, &h);
            let xk = mix_vec(&a, &st.att_prev, p.get(l.mu_k));
            let xv = mix_vec(&a, &st.att_prev, p.get(l.mu_v));
            let xr = mix_vec(&a, &st.att_prev, p.get(l.mu_r));
            st.att_prev = a;
            let k = l.wk.apply_vec(p, &xk);
            let v = l.wv.apply_vec(p, &xv);
            let r = l.wr.apply_vec(p, &xr);
            let w: Vec<F> = p.get(l.log_decay).data().iter().map(|x| x.exp()).collect();
            let mut wkv = vec![F::zero(); e];
            st.wkv.step(&k, &v, &w, p.get(l.bonus).data(), e, &mut wkv);
            let gated: Vec<F> = r.iter().zip(&wkv).map(|(&r, &y)| sigmoid(r) * y).collect();
            let o = l.wo.apply_vec(p, &gated);
            h.iter_mut().zip(o).for_each(|(h, o)| *h += o);

            let a = l.ln2.apply_vec(p, &h);
            let xk = mix_vec(&a, &st.ffn_prev, p.get(l.cmu_k));
            let xr = mix_vec(&a, &st.ffn_prev, p.get(l.cmu_r));
            st.ffn_prev = a;
            let kk: Vec<F> = l
                .ck
                .apply_vec(p, &xk)
                .into_iter()
                .map(|v| {
                    let r = v.max(F::zero());
                    r * r
                })
                .collect();
            let vv = vecmat(&kk, p.get(l.cv.w));
            let rr = l.cr.apply_vec(p, &xr);
            h.iter_mut()
                .zip(rr.iter().zip(vv))
                .for_each(|(h, (&r, v))| *h += sigmoid(r) * v);
        }
        let n = self.ln_out.apply_vec(p, &h);
        self.head.apply_vec(p, &n)
    }
}
