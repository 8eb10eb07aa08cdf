//! Flat `key = value` run configuration mirroring the training and model
//! settings. `#` starts a comment; unknown keys are errors.

use std::fmt::Write as _;

use cxr_core::model::ModelConfig;
use cxr_core::train::TrainConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    /// Desk-scale model with the default optimizer settings and 60 epochs.
    pub fn desk() -> Self {
        Self {
            train: TrainConfig {
                epochs: 60,
                ..TrainConfig::default()
            },
            model: ModelConfig::desk(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text` on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: n + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|message| Error::Config { line: n + 1, message })?;
        }
        self.train.validate()?;
        self.model.encoder.validate()?;
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        let t = &mut self.train;
        let e = &mut self.model.encoder;
        let d = &mut self.model.decoder;
        match key {
            "lr_encoder" => t.lr_encoder = num(key, value)?,
            "lr_decoder" => t.lr_decoder = num(key, value)?,
            "lr_pretrain" => t.lr_pretrain = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "pretrain_epochs" => t.pretrain_epochs = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "split" => {
                let parts: Vec<f64> = value.split(',').map(|p| num(key, p.trim())).collect::<std::result::Result<_, _>>()?;
                let [a, b, c] = parts[..] else {
                    return Err("split: expected three comma-separated ratios".into());
                };
                t.split = (a, b, c);
            }
            "adam_beta1" => t.adam.beta1 = num(key, value)?,
            "adam_beta2" => t.adam.beta2 = num(key, value)?,
            "adam_eps" => t.adam.eps = num(key, value)?,
            "clip_norm" => {
                t.clip_norm = match value {
                    "none" | "off" => None,
                    v => Some(num(key, v)?),
                }
            }
            "min_count" => t.min_count = num(key, value)?,
            "max_len" => t.max_len = num(key, value)?,
            "beam_width" => t.beam_width = num(key, value)?,
            "n_blocks" => e.n_blocks = num(key, value)?,
            "layers_per_block" => e.layers_per_block = num(key, value)?,
            "growth_rate" => e.growth_rate = num(key, value)?,
            "input_size" => e.input_size = num(key, value)?,
            "frozen_blocks" => e.frozen_blocks = num(key, value)?,
            "stem_channels" => e.stem_channels = num(key, value)?,
            "hidden" => d.hidden = num(key, value)?,
            "embed" => d.embed = num(key, value)?,
            "gate_bias" => d.gate_bias = num(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Every key, one per line; parsing the output gives back an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let e = &self.model.encoder;
        let d = &self.model.decoder;
        let clip = t.clip_norm.map_or_else(|| "none".to_string(), |c| format!("{c:?}"));
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("lr_encoder", format!("{:?}", t.lr_encoder));
        kv("lr_decoder", format!("{:?}", t.lr_decoder));
        kv("lr_pretrain", format!("{:?}", t.lr_pretrain));
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("pretrain_epochs", t.pretrain_epochs.to_string());
        kv("seed", t.seed.to_string());
        kv("split", format!("{:?},{:?},{:?}", t.split.0, t.split.1, t.split.2));
        kv("adam_beta1", format!("{:?}", t.adam.beta1));
        kv("adam_beta2", format!("{:?}", t.adam.beta2));
        kv("adam_eps", format!("{:?}", t.adam.eps));
        kv("clip_norm", clip);
        kv("min_count", t.min_count.to_string());
        kv("max_len", t.max_len.to_string());
        kv("beam_width", t.beam_width.to_string());
        kv("n_blocks", e.n_blocks.to_string());
        kv("layers_per_block", e.layers_per_block.to_string());
        kv("growth_rate", e.growth_rate.to_string());
        kv("input_size", e.input_size.to_string());
        kv("frozen_blocks", e.frozen_blocks.to_string());
        kv("stem_channels", e.stem_channels.to_string());
        kv("hidden", d.hidden.to_string());
        kv("embed", d.embed.to_string());
        kv("gate_bias", d.gate_bias.to_string());
        s
    }
}
