//! wasm-bindgen wrapper behind `www/index.html`.
//!
//! One [`Demo`] holds a synthetic session and at most one trained model.
//! Timing is left to the page (`performance.now()`), since
//! `std::time::Instant` is unavailable on `wasm32-unknown-unknown`.

use ndbench::datapipe::{generate_synthetic_session, preprocess, PrepConfig, PreparedSession, SynthConfig};
use ndbench::harness::{train_single_session, TrainConfig};
use ndbench::{Model, ModelConfig, ModelKind, Tensor};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn demo_config(kind: ModelKind, channels: usize, embed: usize) -> ModelConfig {
    ModelConfig {
        max_timesteps: 1024,
        ..ModelConfig::tiny(kind, channels, embed)
    }
}

/// Parameter count of the reference configuration of `kind`.
#[wasm_bindgen]
pub fn reference_params(kind: &str, channels: usize) -> Result<usize, JsError> {
    let kind: ModelKind = kind.parse().map_err(js_err)?;
    Ok(ndbench::backbones::param_count(&ModelConfig::default_for(kind, channels)))
}

#[wasm_bindgen]
pub struct Demo {
    session: PreparedSession,
    steps: usize,
    model: Option<Model<f64>>,
}

#[wasm_bindgen]
impl Demo {
    /// Generates day 0 of a synthetic recording and preprocesses it.
    #[wasm_bindgen(constructor)]
    pub fn new(channels: usize, duration_s: f64, seed: u32) -> Result<Demo, JsError> {
        let cfg = SynthConfig::with_random_tuning(channels, duration_s, seed.into());
        cfg.validate().map_err(js_err)?;
        let raw = generate_synthetic_session(&cfg, 0).map_err(js_err)?;
        let session = preprocess(&raw, &PrepConfig::default()).map_err(js_err)?;
        Ok(Demo {
            session,
            steps: TrainConfig::single_session().steps,
            model: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.session.channels()
    }

    pub fn test_bins(&self) -> usize {
        self.session.raw_test().len()
    }

    /// Trains `kind` at width `embed`; returns JSON with the per-epoch
    /// losses, test R² and parameter count.
    pub fn train(&mut self, kind: &str, embed: usize, epochs: usize, seed: u32) -> Result<String, JsError> {
        let kind: ModelKind = kind.parse().map_err(js_err)?;
        let model_cfg = demo_config(kind, self.session.channels(), embed);
        model_cfg.validate().map_err(js_err)?;
        let cfg = TrainConfig {
            epochs,
            seed: seed.into(),
            ..TrainConfig::single_session()
        };
        let out = train_single_session(&self.session, &model_cfg, &cfg).map_err(js_err)?;
        let model = out.checkpoint.model().map_err(js_err)?.cast::<f64>();
        let s = out.evaluation.scores;
        let summary = json!({
            "kind": kind.name(),
            "params": model.param_count(),
            "losses": out.log.epoch_losses,
            "r2_x": s.r2_x,
            "r2_y": s.r2_y,
            "r2_avg": s.r2_avg,
        });
        self.steps = cfg.steps;
        self.model = Some(model);
        Ok(summary.to_string())
    }

    /// Decodes the first `max_bins` held-out bins window by window.
    /// Returns `[pred_x, pred_y, true_x, true_y]` per bin, flattened.
    pub fn decode(&self, max_bins: usize) -> Result<Vec<f64>, JsError> {
        let model = self.model.as_ref().ok_or_else(|| JsError::new("train a model first"))?;
        let test = self.session.raw_test();
        let bins = (max_bins.min(test.len()) / self.steps) * self.steps;
        let mut out = Vec::with_capacity(bins * 4);
        for start in (0..bins).step_by(self.steps) {
            let rows: Vec<&[f64]> = (start..start + self.steps).map(|t| test.inputs.row(t)).collect();
            let y = model.predict(&Tensor::from_rows(&rows)).map_err(js_err)?;
            for i in 0..self.steps {
                out.extend_from_slice(y.row(i));
                out.extend_from_slice(test.targets.row(start + i));
            }
        }
        Ok(out)
    }

    /// One forward pass of the trained model over an `steps`-bin window of
    /// zeros, for latency probes timed by the caller.
    pub fn forward_window(&self, steps: usize) -> Result<f64, JsError> {
        let model = self.model.as_ref().ok_or_else(|| JsError::new("train a model first"))?;
        let x = Tensor::zeros(&[steps, self.session.channels()]);
        let y = model.predict(&x).map_err(js_err)?;
        Ok(y.data()[y.len() - 1])
    }
}
