//! Encoder-decoder Transformer.
//!
//! The projected input plus a learned positional embedding feeds both the
//! encoder and the decoder. Blocks are pre-norm residual: each sub-layer
//! sees `LN(x)` and adds its (dropped-out) result back to `x`. Decoder
//! self-attention is causal; cross-attention over the encoder output and
//! encoder self-attention are not. Rows are batch-major throughout.

use super::attention::{multihead_attention, AttentionDims, AttentionOp};
use super::{Builder, Init, Linear, ModelConfig, Norm};
use crate::tensor::{Graph, ParamId, Scalar, TensorError, Var};

#[derive(Debug, Clone)]
struct Attn {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: Linear,
}

#[derive(Debug, Clone)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
pub(crate) struct Transformer {
    input: Linear,
    pos: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: Norm,
    dec: Vec<DecLayer>,
    dec_ln: Norm,
    head: Linear,
    heads: usize,
    width: usize,
    dropout: f64,
}

/// Shapes shared by every sub-layer of one forward pass.
#[derive(Clone, Copy)]
struct Ctx {
    steps: usize,
    batch: usize,
    heads: usize,
    width: usize,
    dropout: f64,
}

impl Attn {
    fn build<F: Scalar>(b: &mut Builder<F>, name: &str, e: usize) -> Self {
        Self {
            q: b.param(&format!("{name}.w_q"), &[e, e], Init::Xavier),
            k: b.param(&format!("{name}.w_k"), &[e, e], Init::Xavier),
            v: b.param(&format!("{name}.w_v"), &[e, e], Init::Xavier),
            o: b.linear(&format!("{name}.w_o"), e, e, true),
        }
    }

    fn apply<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, mem: Var, causal: bool, c: Ctx) -> Result<Var, TensorError> {
        let wq = g.param(self.q);
        let wk = g.param(self.k);
        let wv = g.param(self.v);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(mem, wk)?;
        let v = g.matmul(mem, wv)?;
        let dims = AttentionDims {
            batch: c.batch,
            heads: c.heads,
            sq: c.steps,
            sk: c.steps,
            width: c.width,
            causal,
        };
        let out = multihead_attention(g.value(q).data(), g.value(k).data(), g.value(v).data(), &dims);
        let out = crate::tensor::Tensor::from_vec(&[c.batch * c.steps, c.width], out)?;
        let a = g.custom(&[q, k, v], out, Box::new(AttentionOp { dims }));
        self.o.apply(g, a)
    }
}

impl Ffn {
    fn build<F: Scalar>(b: &mut Builder<F>, name: &str, e: usize, f: usize) -> Self {
        Self {
            up: b.linear(&format!("{name}.up"), e, f, true),
            down: b.linear(&format!("{name}.down"), f, e, true),
        }
    }

    fn apply<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var, TensorError> {
        let h = self.up.apply(g, x)?;
        let h = g.relu(h);
        self.down.apply(g, h)
    }
}

/// `x + dropout(f)`.
fn residual<F: Scalar>(g: &mut Graph<'_, F>, x: Var, f: Var, c: Ctx) -> Result<Var, TensorError> {
    let f = g.dropout(f, F::lit(c.dropout));
    g.add(x, f)
}

impl Transformer {
    pub fn build<F: Scalar>(cfg: &ModelConfig, b: &mut Builder<F>) -> Self {
        let (e, f) = (cfg.embed, cfg.ffn_hidden());
        let input = b.linear("input", cfg.input_channels, e, true);
        let pos = b.param("pos_embedding", &[cfg.max_timesteps, e], Init::Xavier);
        let enc = (0..cfg.layers)
            .map(|l| {
                let p = format!("enc{l}");
                EncLayer {
                    ln1: b.norm(&format!("{p}.ln1"), e),
                    attn: Attn::build(b, &format!("{p}.attn"), e),
                    ln2: b.norm(&format!("{p}.ln2"), e),
                    ffn: Ffn::build(b, &format!("{p}.ffn"), e, f),
                }
            })
            .collect();
        let enc_ln = b.norm("enc.ln_out", e);
        let dec = (0..cfg.layers)
            .map(|l| {
                let p = format!("dec{l}");
                DecLayer {
                    ln1: b.norm(&format!("{p}.ln1"), e),
                    self_attn: Attn::build(b, &format!("{p}.self_attn"), e),
                    ln2: b.norm(&format!("{p}.ln2"), e),
                    cross: Attn::build(b, &format!("{p}.cross_attn"), e),
                    ln3: b.norm(&format!("{p}.ln3"), e),
                    ffn: Ffn::build(b, &format!("{p}.ffn"), e, f),
                }
            })
            .collect();
        let dec_ln = b.norm("dec.ln_out", e);
        let head = b.linear("head", e, 2, true);
        Self {
            input,
            pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            head,
            heads: cfg.heads,
            width: e,
            dropout: cfg.dropout_rate,
        }
    }

    /// `x` is batch-major `(batch·steps) × C`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, steps: usize, batch: usize) -> Result<Var, TensorError> {
        let c = Ctx {
            steps,
            batch,
            heads: self.heads,
            width: self.width,
            dropout: self.dropout,
        };
        let a = self.input.apply(g, x)?;
        let table = g.param(self.pos);
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..steps).collect();
        let pe = g.gather_rows(table, &positions)?;
        let sum = g.add(a, pe)?;
        let inp = g.dropout(sum, F::lit(c.dropout));

        let mut h = inp;
        for l in &self.enc {
            let n = l.ln1.apply(g, h)?;
            let a = l.attn.apply(g, n, n, false, c)?;
            h = residual(g, h, a, c)?;
            let n = l.ln2.apply(g, h)?;
            let f = l.ffn.apply(g, n)?;
            h = residual(g, h, f, c)?;
        }
        let mem = self.enc_ln.apply(g, h)?;

        let mut h = inp;
        for l in &self.dec {
            let n = l.ln1.apply(g, h)?;
            let a = l.self_attn.apply(g, n, n, true, c)?;
            h = residual(g, h, a, c)?;
            let n = l.ln2.apply(g, h)?;
            let a = l.cross.apply(g, n, mem, false, c)?;
            h = residual(g, h, a, c)?;
            let n = l.ln3.apply(g, h)?;
            let f = l.ffn.apply(g, n)?;
            h = residual(g, h, f, c)?;
        }
        let out = self.dec_ln.apply(g, h)?;
        self.head.apply(g, out)
    }
}
