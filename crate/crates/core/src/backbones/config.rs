use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BackboneError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gru,
    Transformer,
    Rwkv,
    Mamba,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Gru, ModelKind::Transformer, ModelKind::Rwkv, ModelKind::Mamba];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gru => "gru",
            ModelKind::Transformer => "transformer",
            ModelKind::Rwkv => "rwkv",
            ModelKind::Mamba => "mamba",
        }
    }

    /// Whether the backbone can advance one bin at a time.
    pub fn is_recurrent(self) -> bool {
        self != ModelKind::Transformer
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = BackboneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(ModelKind::Gru),
            "transformer" => Ok(ModelKind::Transformer),
            "rwkv" => Ok(ModelKind::Rwkv),
            "mamba" => Ok(ModelKind::Mamba),
            other => Err(BackboneError::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Architecture hyperparameters. Fields irrelevant to a kind are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_channels: usize,
    /// Stacked blocks; for the Transformer, encoder and decoder layers each.
    pub layers: usize,
    /// GRU hidden size, Transformer `d_model`, RWKV/Mamba embedding width.
    pub embed: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `embed` (Transformer, RWKV).
    pub ffn_ratio: f64,
    pub d_state: usize,
    pub conv_width: usize,
    pub expand: usize,
    pub dropout_rate: f64,
    /// Positional table length (Transformer).
    pub max_timesteps: usize,
    /// GRU only: project inputs to `embed` before the first layer.
    #[serde(default)]
    pub input_projection: bool,
}

impl ModelConfig {
    /// Reference configuration for `kind` with `channels` input channels.
    pub fn default_for(kind: ModelKind, channels: usize) -> Self {
        let base = Self {
            kind,
            input_channels: channels,
            layers: 1,
            embed: 256,
            heads: 1,
            ffn_ratio: 1.0,
            d_state: 8,
            conv_width: 4,
            expand: 2,
            dropout_rate: 0.0,
            max_timesteps: 1024,
            input_projection: false,
        };
        match kind {
            ModelKind::Gru => base,
            ModelKind::Transformer => Self {
                layers: 3,
                embed: 128,
                heads: 2,
                ffn_ratio: 1.0,
                dropout_rate: 0.1,
                ..base
            },
            ModelKind::Rwkv => Self {
                layers: 2,
                embed: 88,
                ffn_ratio: 6.5,
                ..base
            },
            ModelKind::Mamba => Self {
                layers: 2,
                embed: 144,
                ..base
            },
        }
    }

    /// Same family at a reduced width, for gradient checks and quick tests.
    pub fn tiny(kind: ModelKind, channels: usize, embed: usize) -> Self {
        Self {
            input_channels: channels,
            layers: 1,
            embed,
            heads: if kind == ModelKind::Transformer { 2 } else { 1 },
            ffn_ratio: if kind == ModelKind::Rwkv { 2.0 } else { 1.0 },
            d_state: 4,
            conv_width: 3,
            dropout_rate: 0.0,
            max_timesteps: 64,
            ..Self::default_for(kind, channels)
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: String| Err(BackboneError::Config(m));
        if self.input_channels == 0 || self.layers == 0 || self.embed == 0 {
            return bad("input_channels, layers and embed must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        match self.kind {
            ModelKind::Transformer => {
                if self.heads == 0 || !self.embed.is_multiple_of(self.heads) {
                    return bad(format!("embed {} not divisible by heads {}", self.embed, self.heads));
                }
                if self.max_timesteps == 0 || self.ffn_hidden() == 0 {
                    return bad("max_timesteps and feed-forward width must be at least 1".into());
                }
            }
            ModelKind::Rwkv if self.ffn_hidden() == 0 => {
                return bad("feed-forward width must be at least 1".into());
            }
            ModelKind::Mamba if self.d_state == 0 || self.conv_width == 0 || self.expand == 0 => {
                return bad("d_state, conv_width and expand must be at least 1".into());
            }
            _ => {}
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.ffn_ratio * self.embed as f64).round() as usize
    }

    /// Mamba inner width.
    pub fn inner(&self) -> usize {
        self.expand * self.embed
    }

    /// Mamba low-rank Δ projection width, `⌈embed / 16⌉`.
    pub fn dt_rank(&self) -> usize {
        self.embed.div_ceil(16)
    }

    /// Width of the representation fed to the first GRU layer.
    pub fn gru_input(&self) -> usize {
        if self.input_projection {
            self.embed
        } else {
            self.input_channels
        }
    }
}

/// Exact number of scalar parameters of a model built from `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (c, e, l) = (cfg.input_channels, cfg.embed, cfg.layers);
    let head = e * 2 + 2;
    let proj = c * e + e;
    let ln = 2 * e;
    match cfg.kind {
        ModelKind::Gru => {
            let first = cfg.gru_input();
            let layer = |i: usize| 3 * (i * e + e * e + 2 * e);
            let input = if cfg.input_projection { proj } else { 0 };
            input + layer(first) + (l - 1) * layer(e) + head
        }
        ModelKind::Transformer => {
            let f = cfg.ffn_hidden();
            let attn = 4 * e * e + e;
            let ffn = e * f + f + f * e + e;
            let enc = attn + ffn + 2 * ln;
            let dec = 2 * attn + ffn + 3 * ln;
            proj + cfg.max_timesteps * e + l * (enc + dec) + 2 * ln + head
        }
        ModelKind::Rwkv => {
            let f = cfg.ffn_hidden();
            let time = 3 * e + 4 * e * e + 2 * e;
            let chan = 2 * e + e * f + f * e + e * e;
            proj + l * (time + chan + 2 * ln) + ln + head
        }
        ModelKind::Mamba => {
            let (d, n, k, r) = (cfg.inner(), cfg.d_state, cfg.conv_width, cfg.dt_rank());
            let layer = e * 2 * d + d * k + d + d * (r + 2 * n) + r * d + d + d * n + d + d * e + ln;
            proj + l * layer + ln + head
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gru_reference_count_is_closed_form() {
        let cfg = ModelConfig::default_for(ModelKind::Gru, 96);
        assert_eq!(param_count(&cfg), 3 * (96 * 256 + 256 * 256 + 2 * 256) + (256 * 2 + 2));
        assert_eq!(param_count(&cfg), 272_386);
    }

    #[test]
    fn doubling_gru_width_is_superlinear() {
        let a = ModelConfig::default_for(ModelKind::Gru, 96);
        let b = ModelConfig { embed: 512, ..a.clone() };
        assert!(param_count(&b) > 2 * param_count(&a));
    }

    #[test]
    fn rwkv_and_mamba_near_reference_budgets() {
        let r = param_count(&ModelConfig::default_for(ModelKind::Rwkv, 96)) as f64;
        let m = param_count(&ModelConfig::default_for(ModelKind::Mamba, 96)) as f64;
        assert!((r / 294_000.0 - 1.0).abs() < 0.10, "rwkv {r}");
        assert!((m / 306_000.0 - 1.0).abs() < 0.10, "mamba {m}");
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default_for(ModelKind::Transformer, 96)
        };
        assert!(matches!(cfg.validate(), Err(BackboneError::Config(_))));
    }

    #[test]
    fn kind_parses_case_insensitively() {
        assert_eq!("Mamba".parse::<ModelKind>().unwrap(), ModelKind::Mamba);
        assert!("lstm".parse::<ModelKind>().is_err());
    }
}
