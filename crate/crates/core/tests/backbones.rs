use ndbench::backbones::{multihead_attention, AttentionDims, BackboneError};
use ndbench::tensor::finite_diff_check;
use ndbench::{Graph, Mode, Model, ModelConfig, ModelKind, Params, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gradcheck(kind: ModelKind) -> f64 {
    let cfg = ModelConfig::tiny(kind, 4, 8);
    let mut model = Model::<f64>::new(cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // A generic point: at initialization some SSM gradients sit below
    // finite-difference roundoff.
    for id in model.params.ids().collect::<Vec<_>>() {
        for v in model.params.get_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let x = random(&[2, 8, 4], &mut rng);
    let y = random(&[16, 2], &mut rng);
    let loss = |p: &Params<f64>, want: bool| {
        let mut g = Graph::new(p, Mode::Train, 0);
        let out = model.forward(&mut g, &x).map_err(|e| match e {
            BackboneError::Tensor(t) => t,
            other => panic!("{other}"),
        })?;
        let target = g.constant(y.clone());
        let l = g.mse(out, target)?;
        let v = g.value(l).data()[0];
        if !want {
            return Ok((v, None));
        }
        g.backward(l)?;
        Ok((v, Some(g.param_grads())))
    };
    let report = finite_diff_check(&model.params, 1e-5, loss).unwrap();
    assert!(report.checked > 100);
    report.max_relative_error
}

#[test]
fn gru_gradients_match_finite_differences() {
    let err = gradcheck(ModelKind::Gru);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let err = gradcheck(ModelKind::Transformer);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn rwkv_gradients_match_finite_differences() {
    let err = gradcheck(ModelKind::Rwkv);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn mamba_gradients_match_finite_differences() {
    let err = gradcheck(ModelKind::Mamba);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn streaming_reproduces_batch_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in [ModelKind::Gru, ModelKind::Rwkv, ModelKind::Mamba] {
        let cfg = ModelConfig {
            layers: 2,
            ..ModelConfig::tiny(kind, 5, 8)
        };
        let model = Model::<f64>::new(cfg, 3).unwrap();
        let x = random(&[20, 5], &mut rng);
        let batch = model.predict(&x).unwrap();
        let mut state = model.initial_state().unwrap();
        let streamed = model.stream(&mut state, &x).unwrap();
        assert_eq!(state.steps(), 20);
        for (a, b) in batch.data().iter().zip(streamed.data()) {
            assert!((a - b).abs() < 1e-9, "{kind}: {a} vs {b}");
        }
        state.reset();
        let again = model.stream(&mut state, &x).unwrap();
        assert_eq!(again.data(), streamed.data(), "{kind}");
    }
}

#[test]
fn recurrent_outputs_ignore_future_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for kind in [ModelKind::Gru, ModelKind::Rwkv, ModelKind::Mamba] {
        let model = Model::<f64>::new(ModelConfig::tiny(kind, 3, 8), 1).unwrap();
        let x = random(&[12, 3], &mut rng);
        let base = model.predict(&x).unwrap();
        for t in 1..12 {
            let mut bumped = x.clone();
            for c in 0..3 {
                bumped.data_mut()[t * 3 + c] += 2.5;
            }
            let out = model.predict(&bumped).unwrap();
            assert_eq!(&out.data()[..t * 2], &base.data()[..t * 2], "{kind} t={t}");
            assert_ne!(&out.data()[t * 2..], &base.data()[t * 2..], "{kind} t={t}");
        }
    }
}

fn naive_attention(q: &[f64], k: &[f64], v: &[f64], d: &AttentionDims) -> Vec<f64> {
    let dh = d.width / d.heads;
    let mut out = vec![0.0; d.batch * d.sq * d.width];
    for b in 0..d.batch {
        for h in 0..d.heads {
            for i in 0..d.sq {
                let qi = &q[(b * d.sq + i) * d.width + h * dh..][..dh];
                let limit = if d.causal { i + 1 } else { d.sk };
                let logits: Vec<f64> = (0..limit)
                    .map(|j| {
                        let kj = &k[(b * d.sk + j) * d.width + h * dh..][..dh];
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, w) in e.iter().enumerate() {
                    let vj = &v[(b * d.sk + j) * d.width + h * dh..][..dh];
                    for c in 0..dh {
                        out[(b * d.sq + i) * d.width + h * dh + c] += w / z * vj[c];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..24 {
        let dims = AttentionDims {
            batch: 1 + case % 3,
            heads: [1, 2, 4][case % 3],
            sq: 3 + case,
            sk: 3 + case,
            width: 8,
            causal: case % 2 == 0,
        };
        let n = dims.batch * dims.sq * dims.width;
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fast = multihead_attention(&q, &k, &v, &dims);
        let slow = naive_attention(&q, &k, &v, &dims);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-6, "case {case}");
        }
    }
}

#[test]
fn f32_and_f64_predictions_agree() {
    let x64 = random(&[2, 10, 4], &mut ChaCha8Rng::seed_from_u64(4));
    let x32 = Tensor::from_vec(&[2, 10, 4], x64.data().iter().map(|&v| v as f32).collect()).unwrap();
    for kind in ModelKind::ALL {
        let m32 = Model::<f32>::new(ModelConfig::tiny(kind, 4, 8), 6).unwrap();
        let m64: Model<f64> = m32.cast();
        let a = m32.predict(&x32).unwrap();
        let b = m64.predict(&x64).unwrap();
        for (a, b) in a.data().iter().zip(b.data()) {
            assert!((*a as f64 - b).abs() < 1e-4, "{kind}");
        }
    }
}
