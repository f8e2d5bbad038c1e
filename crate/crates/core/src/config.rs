//! `key = value` run configuration shared by the CLI commands.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected. Every key
//! and its default:
//!
//! | key | default |
//! |-----|---------|
//! | `vocab_size` (upper bound; actual size comes from the data) | 512 |
//! | `d_model`, `n_heads`, `n_layers`, `max_seq_len` | 64, 4, 2, 512 |
//! | `n_classes` | 11 |
//! | `quantize_base`, `tune` | false, full |
//! | `lora_rank`, `lora_alpha`, `block_size` | 8, 16, 64 |
//! | `batch_size`, `learning_rate` | 4, 2e-4 |
//! | `weight_decay`, `epochs` | preset (scorer 0.05 / 10, feedback 1e-3 / 20) |
//! | `early_stop_patience` | 10 |
//! | `seed` | 0 |
//! | `adam_beta1`, `adam_beta2`, `adam_eps` | 0.9, 0.999, 1e-8 |
//! | `grad_clip_norm` | none |
//! | `data`, `scale` | none, unit |
//! | `upsample`, `upsample_bins` | false, 10 |
//! | `mode`, `use_rubric` | with_grade, true |
//! | `train_grades` (`gold` or `predicted`) | gold |
//! | `decode`, `temperature`, `max_new_tokens`, `decode_seed` | greedy, 1.0, 32, 0 |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{ScaleKind, DEFAULT_UPSAMPLE_BINS};
use crate::error::{Error, Result};
use crate::model::{DecodeConfig, DecodeMode, ModelConfig};
use crate::pipeline::{GeneratorMode, GradeSource, DEFAULT_FEEDBACK_BUDGET};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub scale: ScaleKind,
    pub upsample: bool,
    pub upsample_bins: usize,
    pub mode: GeneratorMode,
    pub use_rubric: bool,
    /// Grades shown in with-grade training prompts.
    pub train_grades: GradeSource,
    pub decode: DecodeConfig,
}

impl RunConfig {
    /// Defaults with the given training preset.
    pub fn with_preset(train: TrainConfig) -> Self {
        Self {
            model: ModelConfig::default(),
            train,
            data: None,
            scale: ScaleKind::UnitInterval,
            upsample: false,
            upsample_bins: DEFAULT_UPSAMPLE_BINS,
            mode: GeneratorMode::WithGrade,
            use_rubric: true,
            train_grades: GradeSource::Gold,
            decode: DecodeConfig {
                max_new_tokens: DEFAULT_FEEDBACK_BUDGET,
                ..DecodeConfig::default()
            },
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidRunConfig(format!("bad value {v:?} for {key}")))
        }
        let t = &mut self.train;
        match key {
            "head_kind" => {
                return Err(Error::InvalidRunConfig(
                    "head_kind is chosen by the task, not the config".into(),
                ))
            }
            "vocab_size" | "d_model" | "n_heads" | "n_layers" | "max_seq_len" | "n_classes" | "quantize_base"
            | "tune" | "lora_rank" | "lora_alpha" | "block_size" => self
                .model
                .set(key, value)
                .map_err(|e| Error::InvalidRunConfig(e.to_string()))?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "early_stop_patience" => t.early_stop_patience = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "grad_clip_norm" => {
                t.grad_clip_norm = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "data" => self.data = Some(PathBuf::from(value)),
            "scale" => self.scale = parse(key, value)?,
            "upsample" => self.upsample = parse(key, value)?,
            "upsample_bins" => self.upsample_bins = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "use_rubric" => self.use_rubric = parse(key, value)?,
            "train_grades" => self.train_grades = parse(key, value)?,
            "decode" => {
                self.decode.mode = match value {
                    "greedy" => DecodeMode::Greedy,
                    "sample" => DecodeMode::Sample,
                    _ => return Err(Error::InvalidRunConfig(format!("bad decode mode {value:?}"))),
                }
            }
            "temperature" => self.decode.temperature = parse(key, value)?,
            "max_new_tokens" => self.decode.max_new_tokens = parse(key, value)?,
            "decode_seed" => self.decode.seed = parse(key, value)?,
            _ => return Err(Error::InvalidRunConfig(format!("unknown key {key:?}"))),
        }
        t.max_seq_len = self.model.max_seq_len;
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidRunConfig(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidRunConfig(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::InvalidRunConfig(e.to_string());
        self.train.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        if self.upsample_bins < 2 {
            return Err(Error::InvalidRunConfig("upsample_bins must be at least 2".into()));
        }
        Ok(())
    }
}
