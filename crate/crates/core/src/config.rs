//! Plain-text `key = value` run configuration.
//!
//! Keys are the field names of [`ModelConfig`] and [`TrainConfig`]; `#`
//! starts a comment. Unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: invalid value `{value}` for `{key}`")]
    Value { line: usize, key: String, value: String },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl RunConfig {
    /// Applies `text` on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: content.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            self.set(line, key, value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply(text)?;
        Ok(c)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "lp_order" => m.lp_order = parse(line, key, value)?,
            "context_dim" => m.context_dim = parse(line, key, value)?,
            "gru1_dim" => m.gru1_dim = parse(line, key, value)?,
            "gru2_dim" => m.gru2_dim = parse(line, key, value)?,
            "mixtures" => m.mixtures = parse(line, key, value)?,
            "frame_shift" => m.frame_shift = parse(line, key, value)?,
            "chunk_len" => t.chunk_len = parse(line, key, value)?,
            "batch_size" => t.batch_size = parse(line, key, value)?,
            "lambda_pl" => t.lambda_pl = parse(line, key, value)?,
            "noise_sigma" => t.noise_sigma = parse(line, key, value)?,
            "total_steps" => t.total_steps = parse(line, key, value)?,
            "eval_every" => t.eval_every = parse(line, key, value)?,
            "seed" => t.seed = parse(line, key, value)?,
            "base_lr" => t.base_lr = parse(line, key, value)?,
            "warmup_steps" => t.warmup_steps = parse(line, key, value)?,
            "fft_size" => t.fft_size = parse(line, key, value)?,
            "stft_hop" => t.stft_hop = parse(line, key, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Every key in a fixed order; floats use round-trip formatting.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("lp_order", m.lp_order.to_string());
        put("context_dim", m.context_dim.to_string());
        put("gru1_dim", m.gru1_dim.to_string());
        put("gru2_dim", m.gru2_dim.to_string());
        put("mixtures", m.mixtures.to_string());
        put("frame_shift", m.frame_shift.to_string());
        put("chunk_len", t.chunk_len.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lambda_pl", format!("{:?}", t.lambda_pl));
        put("noise_sigma", format!("{:?}", t.noise_sigma));
        put("total_steps", t.total_steps.to_string());
        put("eval_every", t.eval_every.to_string());
        put("seed", t.seed.to_string());
        put("base_lr", format!("{:?}", t.base_lr));
        put("warmup_steps", t.warmup_steps.to_string());
        put("fft_size", t.fft_size.to_string());
        put("stft_hop", t.stft_hop.to_string());
        s
    }
}
