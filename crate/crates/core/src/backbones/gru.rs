//! Gated recurrent unit.
//!
//! Per step, with every affine map carrying its own bias:
//!
//! ```text
//! z = σ(W_z x + U_z h)        r = σ(W_r x + U_r h)
//! h̃ = tanh(W x + U (r ⊙ h))   h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```
//!
//! Input terms are computed for the whole window with one GEMM per gate;
//! the recurrence itself is a fused tape node with hand-written BPTT.

use super::{vecmat, Builder, Init, Linear, ModelConfig};
use crate::tensor::{gemm, CustomOp, Graph, Params, ParamId, Scalar, Tensor, TensorError, Trans, Var};

#[derive(Debug, Clone)]
pub(crate) struct GruLayer {
    wz: Linear,
    wr: Linear,
    wh: Linear,
    uz: ParamId,
    ur: ParamId,
    uh: ParamId,
    bz: ParamId,
    br: ParamId,
    bh: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Gru {
    input: Option<Linear>,
    layers: Vec<GruLayer>,
    head: Linear,
    hidden: usize,
}

impl Gru {
    pub fn build<F: Scalar>(cfg: &ModelConfig, b: &mut Builder<F>) -> Self {
        let h = cfg.embed;
        let input = cfg
            .input_projection
            .then(|| b.linear("input", cfg.input_channels, h, true));
        let mut width = cfg.gru_input();
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("gru{l}");
            let wz = b.linear(&format!("{p}.w_z"), width, h, true);
            let uz = b.param(&format!("{p}.u_z"), &[h, h], Init::Xavier);
            let bz = b.param(&format!("{p}.u_z.bias"), &[h], Init::Zeros);
            let wr = b.linear(&format!("{p}.w_r"), width, h, true);
            let ur = b.param(&format!("{p}.u_r"), &[h, h], Init::Xavier);
            let br = b.param(&format!("{p}.u_r.bias"), &[h], Init::Zeros);
            let wh = b.linear(&format!("{p}.w"), width, h, true);
            let uh = b.param(&format!("{p}.u"), &[h, h], Init::Xavier);
            let bh = b.param(&format!("{p}.u.bias"), &[h], Init::Zeros);
            layers.push(GruLayer { wz, wr, wh, uz, ur, uh, bz, br, bh });
            width = h;
        }
        let head = b.linear("head", h, 2, true);
        Self { input, layers, head, hidden: h }
    }

    /// `x` is time-major `(steps·batch) × C`; returns time-major `… × 2`.
    pub fn forward<'p, F: Scalar>(
        &self,
        g: &mut Graph<'p, F>,
        x: Var,
        steps: usize,
        batch: usize,
    ) -> Result<Var, TensorError> {
        let mut h = match &self.input {
            Some(p) => p.apply(g, x)?,
            None => x,
        };
        for layer in &self.layers {
            let gz = layer.wz.apply(g, h)?;
            let bz = g.param(layer.bz);
            let gz = g.add(gz, bz)?;
            let gr = layer.wr.apply(g, h)?;
            let br = g.param(layer.br);
            let gr = g.add(gr, br)?;
            let gh = layer.wh.apply(g, h)?;
            let bh = g.param(layer.bh);
            let gh = g.add(gh, bh)?;
            let (uz, ur, uh) = (g.param(layer.uz), g.param(layer.ur), g.param(layer.uh));
            let ins = [gz, gr, gh, uz, ur, uh];
            let vals: Vec<&Tensor<F>> = ins.iter().map(|&v| g.value(v)).collect();
            let (out, saved) = gru_scan(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], steps, batch, g.is_training());
            let op = GruOp { steps, batch, hidden: self.hidden, saved };
            h = g.custom(&ins, out, Box::new(op));
        }
        self.head.apply(g, h)
    }

    pub fn new_state<F: Scalar>(&self) -> Vec<Vec<F>> {
        vec![vec![F::zero(); self.hidden]; self.layers.len()]
    }

    pub fn step<F: Scalar>(&self, p: &Params<F>, state: &mut [Vec<F>], x: &[F]) -> Vec<F> {
        let mut inp = match &self.input {
            Some(l) => l.apply_vec(p, x),
            None => x.to_vec(),
        };
        for (layer, h) in self.layers.iter().zip(state.iter_mut()) {
            // input term + recurrent bias + recurrent term
            let pre = |w: &Linear, bias: ParamId, u: ParamId, hv: &[F]| {
                let mut a = w.apply_vec(p, &inp);
                let rec = vecmat(hv, p.get(u));
                for ((a, &b), r) in a.iter_mut().zip(p.get(bias).data()).zip(rec) {
                    *a += b + r;
                }
                a
            };
            let az = pre(&layer.wz, layer.bz, layer.uz, h);
            let r: Vec<F> = pre(&layer.wr, layer.br, layer.ur, h).into_iter().map(sigmoid).collect();
            let rh: Vec<F> = r.iter().zip(h.iter()).map(|(&r, &h)| r * h).collect();
            let ah = pre(&layer.wh, layer.bh, layer.uh, &rh);
            for j in 0..h.len() {
                let z = sigmoid(az[j]);
                let cand = ah[j].tanh();
                h[j] = h[j] + z * (cand - h[j]);
            }
            inp = h.clone();
        }
        self.head.apply_vec(p, &inp)
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Saved activations for the backward pass, each `(steps·batch) × hidden`.
struct GruSaved<F> {
    z: Vec<F>,
    r: Vec<F>,
    cand: Vec<F>,
}

/// Runs the recurrence from `h_0 = 0` given precomputed input terms.
#[allow(clippy::too_many_arguments)]
fn gru_scan<F: Scalar>(
    gz: &Tensor<F>,
    gr: &Tensor<F>,
    gh: &Tensor<F>,
    uz: &Tensor<F>,
    ur: &Tensor<F>,
    uh: &Tensor<F>,
    steps: usize,
    batch: usize,
    keep: bool,
) -> (Tensor<F>, Option<GruSaved<F>>) {
    let hd = uz.cols();
    let blk = batch * hd;
    let mut out = vec![F::zero(); steps * blk];
    let mut saved = keep.then(|| GruSaved {
        z: vec![F::zero(); steps * blk],
        r: vec![F::zero(); steps * blk],
        cand: vec![F::zero(); steps * blk],
    });
    let mut h = vec![F::zero(); blk];
    let mut az = vec![F::zero(); blk];
    let mut ar = vec![F::zero(); blk];
    let mut ah = vec![F::zero(); blk];
    let mut rh = vec![F::zero(); blk];
    for t in 0..steps {
        let rows = t * blk..(t + 1) * blk;
        az.copy_from_slice(&gz.data()[rows.clone()]);
        ar.copy_from_slice(&gr.data()[rows.clone()]);
        ah.copy_from_slice(&gh.data()[rows.clone()]);
        if t > 0 {
            gemm(&h, batch, hd, Trans::No, uz.data(), hd, hd, Trans::No, &mut az, true);
            gemm(&h, batch, hd, Trans::No, ur.data(), hd, hd, Trans::No, &mut ar, true);
        }
        for j in 0..blk {
            ar[j] = sigmoid(ar[j]);
            rh[j] = ar[j] * h[j];
        }
        if t > 0 {
            gemm(&rh, batch, hd, Trans::No, uh.data(), hd, hd, Trans::No, &mut ah, true);
        }
        for j in 0..blk {
            let z = sigmoid(az[j]);
            let c = ah[j].tanh();
            az[j] = z;
            ah[j] = c;
            h[j] = h[j] + z * (c - h[j]);
        }
        out[rows.clone()].copy_from_slice(&h);
        if let Some(s) = saved.as_mut() {
            s.z[rows.clone()].copy_from_slice(&az);
            s.r[rows.clone()].copy_from_slice(&ar);
            s.cand[rows].copy_from_slice(&ah);
        }
    }
    (Tensor::from_vec(&[steps * batch, hd], out).expect("sized above"), saved)
}

/// Tape node; inputs `[gz, gr, gh, U_z, U_r, U]`, output all hidden states.
struct GruOp<F> {
    steps: usize,
    batch: usize,
    hidden: usize,
    saved: Option<GruSaved<F>>,
}

impl<F: Scalar> CustomOp<F> for GruOp<F> {
    fn name(&self) -> &'static str {
        "gru_scan"
    }

    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, gout: &[F]) -> Vec<Option<Vec<F>>> {
        let s = self.saved.as_ref().expect("training-mode forward saves activations");
        let (uz, ur, uh) = (inputs[3].data(), inputs[4].data(), inputs[5].data());
        let (hd, batch) = (self.hidden, self.batch);
        let blk = batch * hd;
        let n = self.steps * blk;
        let hs = output.data();
        let mut ggz = vec![F::zero(); n];
        let mut ggr = vec![F::zero(); n];
        let mut ggh = vec![F::zero(); n];
        let mut guz = vec![F::zero(); hd * hd];
        let mut gur = vec![F::zero(); hd * hd];
        let mut guh = vec![F::zero(); hd * hd];
        let zero = vec![F::zero(); blk];
        let mut carry = vec![F::zero(); blk];
        let mut dh_prev = vec![F::zero(); blk];
        let mut rh = vec![F::zero(); blk];
        let mut drh = vec![F::zero(); blk];
        for t in (0..self.steps).rev() {
            let rows = t * blk..(t + 1) * blk;
            let hp: &[F] = if t == 0 { &zero } else { &hs[(t - 1) * blk..t * blk] };
            let (z, r, c) = (&s.z[rows.clone()], &s.r[rows.clone()], &s.cand[rows.clone()]);
            let daz = &mut ggz[rows.clone()];
            let dar = &mut ggr[rows.clone()];
            let dah = &mut ggh[rows.clone()];
            for j in 0..blk {
                let dh = gout[t * blk + j] + carry[j];
                daz[j] = dh * (c[j] - hp[j]) * z[j] * (F::one() - z[j]);
                dah[j] = dh * z[j] * (F::one() - c[j] * c[j]);
                dh_prev[j] = dh * (F::one() - z[j]);
                rh[j] = r[j] * hp[j];
            }
            // candidate path: a_h += (r ⊙ h) U
            gemm(dah, batch, hd, Trans::No, uh, hd, hd, Trans::Yes, &mut drh, false);
            gemm(&rh, batch, hd, Trans::Yes, dah, batch, hd, Trans::No, &mut guh, true);
            for j in 0..blk {
                dar[j] = drh[j] * hp[j] * r[j] * (F::one() - r[j]);
                dh_prev[j] += drh[j] * r[j];
            }
            gemm(daz, batch, hd, Trans::No, uz, hd, hd, Trans::Yes, &mut dh_prev, true);
            gemm(dar, batch, hd, Trans::No, ur, hd, hd, Trans::Yes, &mut dh_prev, true);
            gemm(hp, batch, hd, Trans::Yes, daz, batch, hd, Trans::No, &mut guz, true);
            gemm(hp, batch, hd, Trans::Yes, dar, batch, hd, Trans::No, &mut gur, true);
            std::mem::swap(&mut carry, &mut dh_prev);
        }
        vec![Some(ggz), Some(ggr), Some(ggh), Some(guz), Some(gur), Some(guh)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_hand_value() {
        // W_z = U_z = W_r = U_r = 0, W = 1, U = 0, x = 1
        let one = |v: f64| Tensor::from_vec(&[1, 1], vec![v]).unwrap();
        let (out, _) = gru_scan(&one(0.0), &one(0.0), &one(1.0), &one(0.0), &one(0.0), &one(0.0), 1, 1, false);
        let h1 = out.data()[0];
        assert!((h1 - 0.5 * 1f64.tanh()).abs() < 1e-12);
        assert!((h1 - 0.3808).abs() < 1e-4);
    }
}
