//! The four sequence decoders: GRU, encoder-decoder Transformer, RWKV and
//! a selective state-space (Mamba) stack.
//!
//! Every backbone maps a batch of normalized spike windows `B × S × C` to
//! velocities `B × S × 2`. GRU, RWKV and Mamba also run one bin at a time
//! through [`Model::step`] with a [`RecurrentState`].
//!
//! Weights are stored `[in, out]` so affine maps are `x · W + b` on rows.
//! The recurrent models work internally on time-major rows
//! (`row = t · B + b`), which turns "previous timestep" into a shift by
//! `B` rows.

mod attention;
mod config;
mod gru;
mod mamba;
mod rwkv;
mod ssm;
mod transformer;
mod wkv;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::tensor::{gemm, Graph, Mode, ParamId, Params, Scalar, Tensor, TensorError, Trans, Var};

pub use attention::{multihead_attention, AttentionDims};
pub use config::{param_count, ModelConfig, ModelKind};
pub use ssm::{ssm_scan_blocked, ssm_scan_sequential};
pub use wkv::{wkv_direct, wkv_scan, WkvState};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("window of {steps} steps exceeds the positional table ({max})")]
    TooLong { steps: usize, max: usize },
    #[error("non-finite activation at timestep {timestep}")]
    NonFinite { timestep: usize },
    #[error("{0} does not support streaming inference")]
    Unsupported(ModelKind),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---- construction helpers -------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) enum Init {
    /// Glorot uniform over `[fan_in, fan_out]`.
    Xavier,
    Zeros,
    Ones,
    Uniform(f64),
    Values(Vec<f64>),
}

/// Creates named parameter groups in layout order.
pub(crate) struct Builder<F> {
    params: Params<F>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> Builder<F> {
    fn new(seed: u64) -> Self {
        Self {
            params: Params::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let uniform = |rng: &mut ChaCha8Rng, bound: f64| -> Vec<f64> {
            let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let values = match init {
            Init::Xavier => {
                let (fi, fo) = (shape[0], shape.get(1).copied().unwrap_or(1));
                uniform(&mut self.rng, (6.0 / (fi + fo) as f64).sqrt())
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => uniform(&mut self.rng, b),
            Init::Values(v) => {
                assert_eq!(v.len(), n, "init values for {name}");
                v
            }
        };
        let t = Tensor::from_vec(shape, values.into_iter().map(F::lit).collect()).expect("sized from shape");
        self.params.add(name, t)
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize, bias: bool) -> Linear {
        let w = self.param(&format!("{name}.weight"), &[inp, out], Init::Xavier);
        let b = bias.then(|| self.param(&format!("{name}.bias"), &[out], Init::Zeros));
        Linear { w, b }
    }

    pub fn norm(&mut self, name: &str, width: usize) -> Norm {
        let gain = self.param(&format!("{name}.gain"), &[width], Init::Ones);
        let bias = self.param(&format!("{name}.bias"), &[width], Init::Zeros);
        Norm { gain, bias }
    }
}

/// `x · W (+ b)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn apply<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn apply_vec<F: Scalar>(&self, p: &Params<F>, x: &[F]) -> Vec<F> {
        let mut y = vecmat(x, p.get(self.w));
        if let Some(b) = self.b {
            y.iter_mut().zip(p.get(b).data()).for_each(|(y, &b)| *y += b);
        }
        y
    }
}

/// Layer normalization with a learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn apply<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var, TensorError> {
        let n = g.layer_norm(x, F::lit(LN_EPS));
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul(n, gain)?;
        g.add(y, bias)
    }

    pub fn apply_vec<F: Scalar>(&self, p: &Params<F>, x: &[F]) -> Vec<F> {
        let inv = F::one() / F::from_usize(x.len()).unwrap();
        let mean = x.iter().copied().fold(F::zero(), |s, v| s + v) * inv;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).fold(F::zero(), |s, v| s + v) * inv;
        let r = F::one() / (var + F::lit(LN_EPS)).sqrt();
        let (gain, bias) = (p.get(self.gain).data(), p.get(self.bias).data());
        x.iter()
            .enumerate()
            .map(|(j, &v)| (v - mean) * r * gain[j] + bias[j])
            .collect()
    }
}

/// Row vector times `[in, out]` matrix.
pub(crate) fn vecmat<F: Scalar>(x: &[F], w: &Tensor<F>) -> Vec<F> {
    let mut out = vec![F::zero(); w.cols()];
    gemm(x, 1, x.len(), Trans::No, w.data(), w.rows(), w.cols(), Trans::No, &mut out, false);
    out
}

/// `B × S × C` batch-major → `(S·B) × C` time-major.
fn time_major<F: Scalar>(x: &Tensor<F>, batch: usize, steps: usize) -> Tensor<F> {
    let c = x.cols();
    let mut data = Vec::with_capacity(x.len());
    for t in 0..steps {
        for b in 0..batch {
            data.extend_from_slice(x.row(b * steps + t));
        }
    }
    Tensor::from_vec(&[steps * batch, c], data).expect("same element count")
}

/// Batch-major row order expressed as indices into time-major rows.
fn batch_major_index(batch: usize, steps: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| (0..steps).map(move |t| t * batch + b)).collect()
}

// ---- the model ------------------------------------------------------------

#[derive(Debug, Clone)]
enum Arch {
    Gru(gru::Gru),
    Transformer(transformer::Transformer),
    Rwkv(rwkv::Rwkv),
    Mamba(mamba::Mamba),
}

/// A backbone: configuration, named parameters and their layout.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    config: ModelConfig,
    pub params: Params<F>,
    arch: Arch,
}

impl<F: Scalar> Model<F> {
    /// Freshly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut b = Builder::new(seed);
        let arch = match config.kind {
            ModelKind::Gru => Arch::Gru(gru::Gru::build(&config, &mut b)),
            ModelKind::Transformer => Arch::Transformer(transformer::Transformer::build(&config, &mut b)),
            ModelKind::Rwkv => Arch::Rwkv(rwkv::Rwkv::build(&config, &mut b)),
            ModelKind::Mamba => Arch::Mamba(mamba::Mamba::build(&config, &mut b)),
        };
        Ok(Self {
            config,
            params: b.params,
            arch,
        })
    }

    /// Model with the given weights; names and shapes must match `config`.
    pub fn from_params(config: ModelConfig, params: &Params<F>) -> Result<Self, BackboneError> {
        let mut m = Self::new(config, 0)?;
        m.params.assign_from(params)?;
        if !m.params.all_finite() {
            return Err(TensorError::NonFinite("loaded parameters".into()).into());
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }

    /// A graph over this model's parameters.
    pub fn graph(&self, mode: Mode, seed: u64) -> Graph<'_, F> {
        Graph::new(&self.params, mode, seed)
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<(usize, usize), BackboneError> {
        let (batch, steps, c) = match *x.shape() {
            [s, c] => (1, s, c),
            [b, s, c] => (b, s, c),
            _ => return Err(BackboneError::Input(format!("expected B×S×C input, got {:?}", x.shape()))),
        };
        if c != self.config.input_channels {
            return Err(BackboneError::Input(format!(
                "input has {c} channels, model expects {}",
                self.config.input_channels
            )));
        }
        if batch == 0 || steps == 0 {
            return Err(BackboneError::Input("empty input window".into()));
        }
        if self.kind() == ModelKind::Transformer && steps > self.config.max_timesteps {
            return Err(BackboneError::TooLong {
                steps,
                max: self.config.max_timesteps,
            });
        }
        Ok((batch, steps))
    }

    /// Records the forward pass on `g`, which must have been built over
    /// `self.params`. Input `B × S × C` (or `S × C`); output `(B·S) × 2`
    /// in batch-major row order.
    pub fn forward(&self, g: &mut Graph<'_, F>, x: &Tensor<F>) -> Result<Var, BackboneError> {
        let (batch, steps) = self.check_input(x)?;
        let out = match &self.arch {
            Arch::Transformer(m) => {
                let flat = Tensor::from_vec(&[batch * steps, x.cols()], x.data().to_vec())?;
                let xv = g.constant(flat);
                m.forward(g, xv, steps, batch)?
            }
            arch => {
                let xv = g.constant(time_major(x, batch, steps));
                let y = match arch {
                    Arch::Gru(m) => m.forward(g, xv, steps, batch)?,
                    Arch::Rwkv(m) => m.forward(g, xv, steps, batch)?,
                    Arch::Mamba(m) => m.forward(g, xv, steps, batch)?,
                    Arch::Transformer(_) => unreachable!(),
                };
                g.gather_rows(y, &batch_major_index(batch, steps))?
            }
        };
        if let Some(timestep) = first_non_finite(g.value(out), steps) {
            return Err(BackboneError::NonFinite { timestep });
        }
        Ok(out)
    }

    /// Evaluation-mode prediction, `B × S × 2` (or `S × 2` for 2-D input).
    pub fn predict(&self, x: &Tensor<F>) -> Result<Tensor<F>, BackboneError> {
        let mut g = self.graph(Mode::Eval, 0);
        let out = self.forward(&mut g, x)?;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("checked rank") = 2;
        Ok(g.value(out).clone().reshape(&shape)?)
    }

    /// Zero state, equivalent to "no past input".
    pub fn initial_state(&self) -> Result<RecurrentState<F>, BackboneError> {
        let layers = match &self.arch {
            Arch::Gru(m) => LayerStates::Gru(m.new_state()),
            Arch::Rwkv(m) => LayerStates::Rwkv(m.new_state()),
            Arch::Mamba(m) => LayerStates::Mamba(m.new_state()),
            Arch::Transformer(_) => return Err(BackboneError::Unsupported(ModelKind::Transformer)),
        };
        Ok(RecurrentState { layers, steps: 0 })
    }

    /// Advances by one bin and returns that bin's velocity.
    pub fn step(&self, state: &mut RecurrentState<F>, x: &[F]) -> Result<[F; 2], BackboneError> {
        if x.len() != self.config.input_channels {
            return Err(BackboneError::Input(format!(
                "step input has {} channels, model expects {}",
                x.len(),
                self.config.input_channels
            )));
        }
        let p = &self.params;
        let y = match (&self.arch, &mut state.layers) {
            (Arch::Gru(m), LayerStates::Gru(s)) => m.step(p, s, x),
            (Arch::Rwkv(m), LayerStates::Rwkv(s)) => m.step(p, s, x),
            (Arch::Mamba(m), LayerStates::Mamba(s)) => m.step(p, s, x),
            (Arch::Transformer(_), _) => return Err(BackboneError::Unsupported(ModelKind::Transformer)),
            _ => return Err(BackboneError::Input("state belongs to a different backbone".into())),
        };
        let timestep = state.steps;
        state.steps += 1;
        if !(y[0].is_finite() && y[1].is_finite()) {
            return Err(BackboneError::NonFinite { timestep });
        }
        Ok([y[0], y[1]])
    }

    /// Runs [`step`](Self::step) over an `S × C` window from `state`.
    pub fn stream(&self, state: &mut RecurrentState<F>, x: &Tensor<F>) -> Result<Tensor<F>, BackboneError> {
        let mut out = Vec::with_capacity(x.rows() * 2);
        for t in 0..x.rows() {
            out.extend(self.step(state, x.row(t))?);
        }
        Ok(Tensor::from_vec(&[x.rows(), 2], out)?)
    }
}

fn first_non_finite<F: Scalar>(out: &Tensor<F>, steps: usize) -> Option<usize> {
    out.data()
        .chunks(2)
        .enumerate()
        .filter(|(_, r)| !r.iter().all(|v| v.is_finite()))
        .map(|(i, _)| i % steps)
        .min()
}

#[derive(Debug, Clone)]
enum LayerStates<F> {
    Gru(Vec<Vec<F>>),
    Rwkv(Vec<rwkv::RwkvState<F>>),
    Mamba(Vec<mamba::MambaState<F>>),
}

/// Streaming inference state for one sequence.
#[derive(Debug, Clone)]
pub struct RecurrentState<F> {
    layers: LayerStates<F>,
    steps: usize,
}

impl<F: Scalar> RecurrentState<F> {
    pub fn reset(&mut self) {
        self.steps = 0;
        match &mut self.layers {
            LayerStates::Gru(h) => h.iter_mut().flatten().for_each(|x| *x = F::zero()),
            LayerStates::Rwkv(s) => s.iter_mut().for_each(rwkv::RwkvState::reset),
            LayerStates::Mamba(s) => s.iter_mut().for_each(mamba::MambaState::reset),
        }
    }

    /// Bins consumed since the last reset.
    pub fn steps(&self) -> usize {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_count_matches_closed_form() {
        for kind in ModelKind::ALL {
            for cfg in [ModelConfig::default_for(kind, 96), ModelConfig::tiny(kind, 4, 8)] {
                let m = Model::<f32>::new(cfg.clone(), 1).unwrap();
                assert_eq!(m.param_count(), param_count(&cfg), "{kind}");
            }
            let deeper = ModelConfig {
                layers: 3,
                ..ModelConfig::tiny(kind, 5, 8)
            };
            assert_eq!(Model::<f32>::new(deeper.clone(), 1).unwrap().param_count(), param_count(&deeper));
        }
    }

    #[test]
    fn shape_contract_for_every_backbone() {
        for kind in ModelKind::ALL {
            let m = Model::<f64>::new(ModelConfig::tiny(kind, 3, 8), 2).unwrap();
            for (b, s) in [(1, 1), (2, 5), (3, 8)] {
                let x = Tensor::from_vec(&[b, s, 3], (0..b * s * 3).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
                assert_eq!(m.predict(&x).unwrap().shape(), &[b, s, 2], "{kind}");
            }
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        for kind in ModelKind::ALL {
            let m = Model::<f64>::new(ModelConfig::tiny(kind, 3, 8), 4).unwrap();
            let x = Tensor::from_vec(&[2, 6, 3], (0..36).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
            let both = m.predict(&x).unwrap();
            let second = Tensor::from_vec(&[1, 6, 3], x.data()[18..].to_vec()).unwrap();
            let alone = m.predict(&second).unwrap();
            for (a, b) in both.data()[12..].iter().zip(alone.data()) {
                assert!((a - b).abs() < 1e-12, "{kind}");
            }
        }
    }

    #[test]
    fn wrong_channel_count_is_an_input_error() {
        let m = Model::<f32>::new(ModelConfig::tiny(ModelKind::Gru, 3, 4), 0).unwrap();
        let x = Tensor::zeros(&[1, 4, 5]);
        assert!(matches!(m.predict(&x), Err(BackboneError::Input(_))));
    }

    #[test]
    fn transformer_rejects_long_windows_and_streaming() {
        let m = Model::<f32>::new(ModelConfig::tiny(ModelKind::Transformer, 3, 4), 0).unwrap();
        let x = Tensor::zeros(&[1, 65, 3]);
        assert!(matches!(m.predict(&x), Err(BackboneError::TooLong { steps: 65, max: 64 })));
        assert!(matches!(m.initial_state(), Err(BackboneError::Unsupported(ModelKind::Transformer))));
    }

    #[test]
    fn zero_weight_gru_outputs_head_bias() {
        let cfg = ModelConfig::tiny(ModelKind::Gru, 3, 4);
        let mut m = Model::<f64>::new(cfg, 0).unwrap();
        for id in m.params.ids().collect::<Vec<_>>() {
            let v = if m.params.name(id) == "head.bias" { 0.25 } else { 0.0 };
            m.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = v);
        }
        let x = Tensor::from_vec(&[1, 5, 3], (0..15).map(|i| i as f64).collect()).unwrap();
        assert!(m.predict(&x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn non_finite_input_reports_first_timestep() {
        for kind in [ModelKind::Gru, ModelKind::Rwkv, ModelKind::Mamba] {
            let m = Model::<f64>::new(ModelConfig::tiny(kind, 3, 4), 0).unwrap();
            let mut x = Tensor::zeros(&[2, 5, 3]);
            x.data_mut()[(5 + 3) * 3] = f64::NAN; // second window, t = 3
            assert!(matches!(m.predict(&x), Err(BackboneError::NonFinite { timestep: 3 })), "{kind}");
        }
    }
}
