use serde::{Deserialize, Serialize};

use super::{Gradients, Params, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers of the bias-corrected Adam rule, one per parameter group.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &Params<F>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .groups()
                .iter()
                .map(|g| Tensor::zeros(g.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update to every parameter and clears `grads`.
    ///
    /// Fails without touching any parameter if a gradient is missing or
    /// the buffers do not mirror the parameter shapes.
    pub fn step(&mut self, params: &mut Params<F>, grads: &mut Gradients<F>) -> Result<(), TensorError> {
        if self.m.len() != params.len() || grads.len() != params.len() {
            return Err(TensorError::ParamLayout(format!(
                "optimizer holds {} buffers, gradients {}, parameters {}",
                self.m.len(),
                grads.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            let Some(g) = grads.get(id) else {
                return Err(TensorError::MissingGrad(params.name(id).to_string()));
            };
            if g.shape() != params.get(id).shape() || self.m[id.index()].shape() != g.shape() {
                return Err(TensorError::ParamLayout(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    params.name(id),
                    g.shape(),
                    params.get(id).shape()
                )));
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let b1 = F::lit(c.beta1);
        let b2 = F::lit(c.beta2);
        let one = F::one();
        let bc1 = F::lit(1.0 - c.beta1.powi(t));
        let bc2 = F::lit(1.0 - c.beta2.powi(t));
        let lr = F::lit(c.learning_rate);
        let eps = F::lit(c.epsilon);

        for id in params.ids() {
            let i = id.index();
            let g = grads.get(id).expect("checked above");
            let p = params.get_mut(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        grads.zero();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> (Params<f64>, crate::tensor::ParamId) {
        let mut p = Params::new();
        let id = p.add("x", Tensor::from_vec(&[1], vec![x]).unwrap());
        (p, id)
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let (mut p, id) = single(0.5);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let mut g = Gradients::empty(1);
        g.set(id, Tensor::from_vec(&[1], vec![-3.0]).unwrap());
        adam.step(&mut p, &mut g).unwrap();
        assert!((p.get(id).item() - (0.5 + 1e-3)).abs() < 1e-9);
        assert!(g.get(id).is_none(), "grads cleared");
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let (mut p, id) = single(0.5);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let mut g = Gradients::empty(1);
        g.set(id, Tensor::from_vec(&[1], vec![0.0]).unwrap());
        adam.step(&mut p, &mut g).unwrap();
        assert_eq!(p.get(id).item(), 0.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn two_steps_on_parabola_match_hand_iteration() {
        // f(x) = x², f'(x) = 2x, lr = 0.1, x0 = 1.
        let (mut p, id) = single(1.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&p, cfg);
        // Hand-iterated recurrence.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=2 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            expected.push(x);
        }
        let mut prev = 1.0;
        for want in expected {
            let mut g = Gradients::empty(1);
            g.set(id, Tensor::from_vec(&[1], vec![2.0 * p.get(id).item()]).unwrap());
            adam.step(&mut p, &mut g).unwrap();
            let x = p.get(id).item();
            assert!((x - want).abs() < 1e-12);
            assert!(x < prev && x > 0.0);
            prev = x;
        }
    }

    #[test]
    fn missing_gradient_names_group() {
        let mut p = Params::<f64>::new();
        p.add("gru.l0.w_z", Tensor::zeros(&[2]));
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let mut g = Gradients::empty(1);
        let err = adam.step(&mut p, &mut g).unwrap_err();
        assert!(err.to_string().contains("gru.l0.w_z"));
    }
}
