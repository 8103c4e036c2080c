use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::HarnessError;
use crate::backbones::{Model, ModelConfig};
use crate::datapipe::NormStats;
use crate::tensor::{read_container, write_container, Params};

/// Where a set of weights came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Content hashes of every session the weights were trained on.
    pub data_hashes: Vec<String>,
    /// Epochs completed.
    pub epoch: usize,
    /// Learning rate of the successful attempt.
    pub learning_rate: f64,
    pub attempts: usize,
    pub version: String,
}

/// Trained weights plus everything needed to evaluate them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params<f32>,
    /// Normalization statistics by session id.
    pub norms: BTreeMap<String, NormStats>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    norms: BTreeMap<String, NormStats>,
    provenance: Provenance,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model<f32>, HarnessError> {
        Ok(Model::from_params(self.config.clone(), &self.params)?)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let config = serde_json::to_value(&self.config).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        let meta = json!(Meta {
            norms: self.norms.clone(),
            provenance: self.provenance.clone(),
        });
        write_container(w, config, meta, &self.params)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, HarnessError> {
        let (header, params) = read_container::<f32, _>(r)?;
        let bad = |e: serde_json::Error| HarnessError::Checkpoint(e.to_string());
        let config: ModelConfig = serde_json::from_value(header.config).map_err(bad)?;
        let meta: Meta = serde_json::from_value(header.meta).map_err(bad)?;
        let ckpt = Self {
            config,
            params,
            norms: meta.norms,
            provenance: meta.provenance,
        };
        // layout check against a fresh build of the config
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, HarnessError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::ModelKind;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::tiny(ModelKind::Rwkv, 3, 8);
        let model = Model::<f32>::new(cfg.clone(), 4).unwrap();
        let norm = NormStats {
            channel_mean: vec![0.1, 0.2, 0.3],
            channel_std: vec![1.0, 2.0, 0.5],
            vel_mean: [0.25, -1.0],
            vel_std: [3.0, 4.0],
        };
        Checkpoint {
            config: cfg,
            params: model.params,
            norms: BTreeMap::from([("day0".to_string(), norm)]),
            provenance: Provenance {
                seed: 4,
                data_hashes: vec!["abc".into()],
                epoch: 2,
                learning_rate: 1e-3,
                attempts: 1,
                version: "test".into(),
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let mut c = sample();
        c.config.embed = 16;
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::read_from(bytes.as_slice()).is_err());
    }
}
