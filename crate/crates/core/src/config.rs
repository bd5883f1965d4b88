//! Plain-text run configuration: UTF-8 `key = value` lines, `#` comments,
//! later duplicates win, unknown keys rejected.

use std::path::Path;

use crate::attention::PoolMode;
use crate::error::{Error, Result};
use crate::synth::SyntheticSpec;
use crate::train::TrainConfig;

/// Everything a training run needs: the train config plus the synthetic
/// dataset description. Dataset geometry and class count always follow the
/// model's.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub data: SyntheticSpec,
}

impl RunSpec {
    pub fn desk_default() -> Self {
        RunSpec {
            train: TrainConfig::desk_default(),
            data: SyntheticSpec::desk_default(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = Self::desk_default();
        for (key, value) in parse_kv(text)? {
            spec.apply(&key, &value)?;
        }
        spec.sync_data_to_model();
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()
    }

    /// Copies geometry and class count from the model config into the data
    /// spec; they are a single setting from the user's point of view.
    pub fn sync_data_to_model(&mut self) {
        let m = &self.train.model;
        self.data.frames = m.frames;
        self.data.height = m.height;
        self.data.width = m.width;
        self.data.channels = m.channels;
        self.data.num_classes = m.num_classes;
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.train.model;
        match key {
            "F" => m.frames = parse_usize(key, value)?,
            "H" => m.height = parse_usize(key, value)?,
            "W" => m.width = parse_usize(key, value)?,
            "C" => m.channels = parse_usize(key, value)?,
            "d" => m.embed_dim = parse_usize(key, value)?,
            "blocks" => m.blocks = parse_usize(key, value)?,
            "heads" => m.heads = parse_usize(key, value)?,
            "window_f" => m.window.f = parse_usize(key, value)?,
            "window_h" => m.window.h = parse_usize(key, value)?,
            "window_w" => m.window.w = parse_usize(key, value)?,
            "pool_mode" => {
                m.pool_mode = match value {
                    "average" => PoolMode::Average,
                    "learned" => PoolMode::Learned,
                    other => {
                        return Err(Error::config(format!(
                            "pool_mode must be \"average\" or \"learned\", got {other:?}"
                        )))
                    }
                }
            }
            "num_classes" => m.num_classes = parse_usize(key, value)?,
            "seed" => {
                let seed = parse_u64(key, value)?;
                m.seed = seed;
                self.train.seed = seed;
            }
            "lr" => self.train.lr = parse_f64(key, value)?,
            "momentum" => self.train.momentum = parse_f64(key, value)?,
            "epochs" => self.train.epochs = parse_usize(key, value)?,
            "batch_size" => self.train.batch_size = parse_usize(key, value)?,
            "lambda" => self.train.lambda = parse_f64(key, value)?,
            "clips_per_class" => self.data.clips_per_class = parse_usize(key, value)?,
            "class_signal_scale" => self.data.class_signal_scale = parse_f64(key, value)?,
            "noise_scale" => self.data.noise_scale = parse_f64(key, value)?,
            "temporal_drift" => self.data.temporal_drift = parse_f64(key, value)?,
            "data_seed" => self.data.seed = parse_u64(key, value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key} must be a non-negative integer, got {value:?}")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key} must be a non-negative integer, got {value:?}")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key} must be a number, got {value:?}")))
}

/// Splits config text into `(key, value)` pairs. Blank lines and `#`
/// comments (whole-line or trailing) are dropped; surrounding whitespace is
/// trimmed from keys and values.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", lineno + 1)));
        }
        entries.push((key.to_string(), value.trim().to_string()));
    }
    Ok(entries)
}
