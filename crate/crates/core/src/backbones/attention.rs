//! Fused multi-head scaled dot-product attention.
//!
//! `q` is `(batch·sq) × width`, `k` and `v` are `(batch·sk) × width`, all
//! batch-major. Head `h` owns columns `h·dh .. (h+1)·dh`. Nothing is saved
//! for the backward pass; the probabilities are recomputed per head so a
//! 1024-step window costs one `sq × sk` buffer at a time.

use crate::tensor::{gemm, softmax_in_place, CustomOp, Scalar, Tensor, Trans};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionDims {
    pub batch: usize,
    pub heads: usize,
    pub sq: usize,
    pub sk: usize,
    pub width: usize,
    /// Query `i` sees keys `0..=i` only.
    pub causal: bool,
}

impl AttentionDims {
    fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

fn gather_head<F: Scalar>(src: &[F], rows: std::ops::Range<usize>, width: usize, col: usize, dh: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(rows.len() * dh);
    for r in rows {
        out.extend_from_slice(&src[r * width + col..r * width + col + dh]);
    }
    out
}

fn scatter_head<F: Scalar>(dst: &mut [F], src: &[F], row0: usize, width: usize, col: usize, dh: usize) {
    for (i, chunk) in src.chunks(dh).enumerate() {
        let r = row0 + i;
        dst[r * width + col..r * width + col + dh]
            .iter_mut()
            .zip(chunk)
            .for_each(|(d, &s)| *d += s);
    }
}

/// Row-softmax of `q kᵀ / √dh` for one head, with the causal mask applied.
fn probabilities<F: Scalar>(qh: &[F], kh: &[F], dims: &AttentionDims) -> Vec<F> {
    let (sq, sk, dh) = (dims.sq, dims.sk, dims.head_width());
    let mut p = vec![F::zero(); sq * sk];
    gemm(qh, sq, dh, Trans::No, kh, sk, dh, Trans::Yes, &mut p, false);
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    for (i, row) in p.chunks_mut(sk).enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = if dims.causal && j > i { F::neg_infinity() } else { *x * scale };
        }
        softmax_in_place(row);
    }
    p
}

/// Concatenated per-head outputs, `(batch·sq) × width`.
pub fn multihead_attention<F: Scalar>(q: &[F], k: &[F], v: &[F], dims: &AttentionDims) -> Vec<F> {
    let (w, dh) = (dims.width, dims.head_width());
    let mut out = vec![F::zero(); dims.batch * dims.sq * w];
    for b in 0..dims.batch {
        let qr = b * dims.sq..(b + 1) * dims.sq;
        let kr = b * dims.sk..(b + 1) * dims.sk;
        for h in 0..dims.heads {
            let col = h * dh;
            let qh = gather_head(q, qr.clone(), w, col, dh);
            let kh = gather_head(k, kr.clone(), w, col, dh);
            let vh = gather_head(v, kr.clone(), w, col, dh);
            let p = probabilities(&qh, &kh, dims);
            let mut oh = vec![F::zero(); dims.sq * dh];
            gemm(&p, dims.sq, dims.sk, Trans::No, &vh, dims.sk, dh, Trans::No, &mut oh, false);
            scatter_head(&mut out, &oh, qr.start, w, col, dh);
        }
    }
    out
}

/// Tape node; inputs `[q, k, v]`.
pub(crate) struct AttentionOp {
    pub dims: AttentionDims,
}

impl<F: Scalar> CustomOp<F> for AttentionOp {
    fn name(&self) -> &'static str {
        "multihead_attention"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _output: &Tensor<F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let dims = &self.dims;
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (w, dh, sq, sk) = (dims.width, dims.head_width(), dims.sq, dims.sk);
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut gq = vec![F::zero(); q.len()];
        let mut gk = vec![F::zero(); k.len()];
        let mut gv = vec![F::zero(); v.len()];
        for b in 0..dims.batch {
            let qr = b * sq..(b + 1) * sq;
            let kr = b * sk..(b + 1) * sk;
            for h in 0..dims.heads {
                let col = h * dh;
                let qh = gather_head(q, qr.clone(), w, col, dh);
                let kh = gather_head(k, kr.clone(), w, col, dh);
                let vh = gather_head(v, kr.clone(), w, col, dh);
                let goh = gather_head(g, qr.clone(), w, col, dh);
                let p = probabilities(&qh, &kh, dims);

                let mut gvh = vec![F::zero(); sk * dh];
                gemm(&p, sq, sk, Trans::Yes, &goh, sq, dh, Trans::No, &mut gvh, false);
                let mut gp = vec![F::zero(); sq * sk];
                gemm(&goh, sq, dh, Trans::No, &vh, sk, dh, Trans::Yes, &mut gp, false);
                for (prow, grow) in p.chunks(sk).zip(gp.chunks_mut(sk)) {
                    let dot = prow.iter().zip(grow.iter()).fold(F::zero(), |s, (&a, &b)| s + a * b);
                    for (gs, &pp) in grow.iter_mut().zip(prow) {
                        *gs = pp * (*gs - dot) * scale;
                    }
                }
                let mut gqh = vec![F::zero(); sq * dh];
                gemm(&gp, sq, sk, Trans::No, &kh, sk, dh, Trans::No, &mut gqh, false);
                let mut gkh = vec![F::zero(); sk * dh];
                gemm(&gp, sq, sk, Trans::Yes, &qh, sq, dh, Trans::No, &mut gkh, false);

                scatter_head(&mut gq, &gqh, qr.start, w, col, dh);
                scatter_head(&mut gk, &gkh, kr.start, w, col, dh);
                scatter_head(&mut gv, &gvh, kr.start, w, col, dh);
            }
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(sq: usize, sk: usize, width: usize, heads: usize) -> AttentionDims {
        AttentionDims {
            batch: 1,
            heads,
            sq,
            sk,
            width,
            causal: false,
        }
    }

    #[test]
    fn equal_logits_average_values() {
        // zero queries make every logit equal
        let q = vec![0.0f64; 2 * 2];
        let k = vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0];
        let v = vec![1.0, 10.0, 2.0, 20.0, 6.0, 60.0];
        let out = multihead_attention(&q, &k, &v, &dims(2, 3, 2, 1));
        for row in out.chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 30.0).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logit_selects_row() {
        // one key aligned with the query at logit +50 after scaling
        let q = vec![50.0f64];
        let k = vec![0.0, 1.0, 0.0];
        let v = vec![4.0, -7.0, 9.0];
        let out = multihead_attention(&q, &k, &v, &dims(1, 3, 1, 1));
        assert!((out[0] + 7.0).abs() < 1e-6);
    }

    #[test]
    fn causal_first_query_sees_first_key() {
        let q = vec![1.0f64, 2.0, 3.0];
        let k = vec![0.3, -0.2, 0.9];
        let v = vec![5.0, 6.0, 7.0];
        let d = AttentionDims { causal: true, ..dims(3, 3, 1, 1) };
        let out = multihead_attention(&q, &k, &v, &d);
        assert_eq!(out[0], 5.0);
    }
}
