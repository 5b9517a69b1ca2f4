//! Run configuration.
//!
//! Configs live in plain text files of dotted `key = value` lines (`#`
//! comments allowed). Any key can be overridden with `--set key=value`;
//! unknown keys are rejected at parse time.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::numerics::adam::AdamHyper;
use crate::objectives::{CollabDistance, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width d.
    pub d: usize,
    /// Geometry FC hidden size d_g.
    pub d_g: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub vocab_trainable: bool,
    /// Row-softmax the VAT attention score matrix (off by default).
    pub att_softmax: bool,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub collab_distance: CollabDistance,
    /// Use calibrated logits for the prediction-level collaborative loss.
    pub p_scl_calibrated: bool,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PredictConfig {
    pub alpha: f64,
    /// Sample-averaged accuracy instead of the per-class protocol (debugging).
    pub sample_averaged: bool,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainParams {
    pub batch_size: usize,
    pub epochs: usize,
    /// Evaluate on the test split every this many epochs.
    pub eval_interval: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DataConfig {
    pub feature_dir: Option<PathBuf>,
    pub semantics: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub split: Option<PathBuf>,
    /// ℓ2-normalize loaded attribute word vectors.
    pub normalize_vocab: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub predict: PredictConfig,
    pub optim: AdamHyper,
    pub train: TrainParams,
    pub data: DataConfig,
    pub synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            precision: Precision::F64,
            model: ModelConfig {
                d: 128,
                d_g: 64,
                layers: 1,
                heads: 1,
                dropout: 0.3,
                vocab_trainable: true,
                att_softmax: false,
            },
            loss: LossConfig {
                weights: LossWeights::default(),
                collab_distance: CollabDistance::L2,
                p_scl_calibrated: false,
            },
            predict: PredictConfig {
                alpha: 0.9,
                sample_averaged: false,
            },
            optim: AdamHyper::default(),
            train: TrainParams {
                batch_size: 50,
                epochs: 200,
                eval_interval: 10,
            },
            data: DataConfig::default(),
            synth: SyntheticSpec::default(),
        }
    }
}

fn parse_usize(key: &str, raw: &str) -> Result<usize> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: expected an unsigned integer, got {raw:?}")))
}

fn parse_u64(key: &str, raw: &str) -> Result<u64> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: expected an unsigned integer, got {raw:?}")))
}

fn parse_f64(key: &str, raw: &str) -> Result<f64> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {raw:?}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {raw:?}"))),
    }
}

impl RunConfig {
    /// Applies one dotted-key assignment.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        match key {
            "seed" => self.seed = parse_u64(key, raw)?,
            "precision" => {
                self.precision = match raw {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision must be f32|f64, got {raw:?}"))),
                }
            }
            "model.d" => self.model.d = parse_usize(key, raw)?,
            "model.d_g" => self.model.d_g = parse_usize(key, raw)?,
            "model.layers" => self.model.layers = parse_usize(key, raw)?,
            "model.heads" => self.model.heads = parse_usize(key, raw)?,
            "model.dropout" => self.model.dropout = parse_f64(key, raw)?,
            "model.vocab_trainable" => self.model.vocab_trainable = parse_bool(key, raw)?,
            "model.att_softmax" => self.model.att_softmax = parse_bool(key, raw)?,
            "loss.lambda_ar" => self.loss.weights.lambda_ar = parse_f64(key, raw)?,
            "loss.lambda_sc" => self.loss.weights.lambda_sc = parse_f64(key, raw)?,
            "loss.lambda_vat" => self.loss.weights.lambda_vat = parse_f64(key, raw)?,
            "loss.lambda_f_scl" => self.loss.weights.lambda_f_scl = parse_f64(key, raw)?,
            "loss.lambda_p_scl" => self.loss.weights.lambda_p_scl = parse_f64(key, raw)?,
            "loss.collab_distance" => self.loss.collab_distance = raw.parse()?,
            "loss.p_scl_calibrated" => self.loss.p_scl_calibrated = parse_bool(key, raw)?,
            "predict.alpha" => self.predict.alpha = parse_f64(key, raw)?,
            "predict.sample_averaged" => self.predict.sample_averaged = parse_bool(key, raw)?,
            "optim.lr" => self.optim.lr = parse_f64(key, raw)?,
            "optim.beta1" => self.optim.beta1 = parse_f64(key, raw)?,
            "optim.beta2" => self.optim.beta2 = parse_f64(key, raw)?,
            "optim.epsilon" => self.optim.epsilon = parse_f64(key, raw)?,
            "train.batch_size" => self.train.batch_size = parse_usize(key, raw)?,
            "train.epochs" => self.train.epochs = parse_usize(key, raw)?,
            "train.eval_interval" => self.train.eval_interval = parse_usize(key, raw)?,
            "data.feature_dir" => self.data.feature_dir = Some(PathBuf::from(raw)),
            "data.semantics" => self.data.semantics = Some(PathBuf::from(raw)),
            "data.vocab" => self.data.vocab = Some(PathBuf::from(raw)),
            "data.split" => self.data.split = Some(PathBuf::from(raw)),
            "data.normalize_vocab" => self.data.normalize_vocab = parse_bool(key, raw)?,
            "synth.attributes" => self.synth.attributes = parse_usize(key, raw)?,
            "synth.grid_h" => self.synth.grid_h = parse_usize(key, raw)?,
            "synth.grid_w" => self.synth.grid_w = parse_usize(key, raw)?,
            "synth.channels" => self.synth.channels = parse_usize(key, raw)?,
            "synth.seen_classes" => self.synth.seen_classes = parse_usize(key, raw)?,
            "synth.unseen_classes" => self.synth.unseen_classes = parse_usize(key, raw)?,
            "synth.images_per_class" => self.synth.images_per_class = parse_usize(key, raw)?,
            "synth.density" => self.synth.density = parse_f64(key, raw)?,
            "synth.noise" => self.synth.noise_scale = parse_f64(key, raw)?,
            "synth.vocab_dim" => self.synth.vocab_dim = parse_usize(key, raw)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a whole config file's text on top of the defaults.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Cross-field constraints, checked once after all overrides.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config(format!(
                "model.dropout must lie in [0, 1), got {}",
                self.model.dropout
            )));
        }
        if self.model.d == 0 || self.model.heads == 0 || !self.model.d.is_multiple_of(self.model.heads) {
            return Err(Error::Config(format!(
                "model.heads ({}) must divide model.d ({})",
                self.model.heads, self.model.d
            )));
        }
        if self.model.layers == 0 || self.model.d_g == 0 {
            return Err(Error::Config("model.layers and model.d_g must be positive".into()));
        }
        self.loss.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.predict.alpha) {
            return Err(Error::Config(format!(
                "predict.alpha must lie in [0, 1], got {}",
                self.predict.alpha
            )));
        }
        if self.optim.lr <= 0.0
            || !(0.0..1.0).contains(&self.optim.beta1)
            || !(0.0..1.0).contains(&self.optim.beta2)
            || self.optim.epsilon <= 0.0
        {
            return Err(Error::Config(format!(
                "invalid optimizer settings: lr={} betas=({}, {}) epsilon={}",
                self.optim.lr, self.optim.beta1, self.optim.beta2, self.optim.epsilon
            )));
        }
        if self.train.batch_size == 0 || self.train.eval_interval == 0 {
            return Err(Error::Config(
                "train.batch_size and train.eval_interval must be positive".into(),
            ));
        }
        self.uses_real_data()?;
        Ok(())
    }

    /// True when the config points at an on-disk dataset; the four data paths
    /// must be given together.
    pub fn uses_real_data(&self) -> Result<bool> {
        let given = [
            self.data.feature_dir.is_some(),
            self.data.semantics.is_some(),
            self.data.vocab.is_some(),
            self.data.split.is_some(),
        ];
        let count = given.iter().filter(|&&g| g).count();
        match count {
            0 => Ok(false),
            4 => Ok(true),
            _ => Err(Error::Config(
                "data.feature_dir, data.semantics, data.vocab, and data.split must be set together".into(),
            )),
        }
    }

    /// Synthetic spec with the run's root seed patched in.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.synth
        }
    }
}
