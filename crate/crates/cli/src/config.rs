//! Flat `section.key = value` run configuration.
//!
//! Layers merge as defaults < file < `--set` overrides, then
//! `SETPREDICT_SEED` replaces `train.seed`. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use setpredict_core::eval::EvalOptions;
use setpredict_core::exec::Execution;
use setpredict_core::losses::LossConfig;
use setpredict_core::matching::CostWeights;
use setpredict_core::model::{ModelConfig, TrainConfig};
use setpredict_core::preprocess::{DistanceMetric, PreprocessMode, SmudgeConfig};
use setpredict_core::querygen::{NoiseConfig, PositionalEncodingSpec, QueryVariant};
use setpredict_core::synth::SceneSpec;

pub const SEED_ENV: &str = "SETPREDICT_SEED";

/// Every key, its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.d_model", "32", "embedding width"),
    ("model.heads", "2", "attention heads"),
    ("model.enc_layers", "2", "encoder layers"),
    ("model.dec_layers", "2", "decoder layers"),
    ("model.levels", "2", "feature levels for deformable attention"),
    ("model.sample_points", "4", "sample points per head per level"),
    ("model.patch", "8", "patch size in pixels"),
    ("model.ffn_dim", "64", "feed-forward hidden width"),
    ("query.variant", "AnchorsPosNegNoise", "GridPoints, LearnedPoints, AnchorBoxes, AnchorsPositiveNoise or AnchorsPosNegNoise"),
    ("query.count", "10", "matching queries per image"),
    ("noise.lambda1", "0.4", "positive noise scale"),
    ("noise.lambda2", "0.8", "negative noise outer scale"),
    ("noise.groups", "1", "denoising groups"),
    ("noise.amd_k", "0", "AMD(k) filter on positive anchors, 0 = off"),
    ("pe.dim", "8", "sinusoid width per anchor coordinate"),
    ("pe.temperature", "20", "sinusoid temperature"),
    ("loss.w_class", "1", "classification weight"),
    ("loss.w_l1", "5", "L1 box weight"),
    ("loss.w_giou", "2", "GIoU weight"),
    ("loss.w_dn", "1", "denoising loss weight"),
    ("loss.noobj_weight", "0.1", "down-weighting of no-object targets"),
    ("loss.aux_layers", "true", "add the loss of every decoder layer"),
    ("matcher.w_class", "2", "matching cost class weight"),
    ("matcher.w_l1", "5", "matching cost L1 weight"),
    ("matcher.w_giou", "2", "matching cost GIoU weight"),
    ("train.steps", "2000", "optimizer steps"),
    ("train.batch", "4", "images per step"),
    ("train.lr", "1e-4", "AdamW learning rate"),
    ("train.weight_decay", "1e-4", "AdamW decoupled weight decay"),
    ("train.clip_norm", "0", "global gradient norm cap, 0 = off"),
    ("train.seed", "0", "seed for init, batching and query noise"),
    ("train.eval_every", "100", "steps between evaluations, 0 = only at the end"),
    ("train.holdout", "0.1", "fraction of the dataset held out for evaluation"),
    ("train.parallel", "true", "compute per-image gradients on the thread pool"),
    ("data.path", "", "COCO annotation file; empty = synthesize from synth.*"),
    ("data.classes", "table,figure,text", "class names, in category id order"),
    ("checkpoint.path", "run", "run directory for checkpoints and logs"),
    ("preprocess.mode", "raw", "raw, dilate, smudge or both"),
    ("preprocess.decay", "4", "smudge ramp length in pixels"),
    ("preprocess.metric", "l2", "smudge distance: l1, linf or l2"),
    ("synth.count", "200", "synthetic pages"),
    ("synth.seed", "0", "synthetic dataset seed"),
    ("synth.min_objects", "1", "objects per page, lower bound"),
    ("synth.max_objects", "8", "objects per page, upper bound"),
    ("synth.page_width", "256", "page width in pixels"),
    ("synth.page_height", "256", "page height in pixels"),
    ("synth.min_size", "8", "smallest object side in pixels"),
    ("eval.max_detections", "100", "detections kept per image"),
    ("eval.score_threshold", "0.5", "score cut for precision/recall/F1"),
    ("eval.iou", "0.5", "IoU for precision/recall/F1"),
    ("detect.threshold", "0.5", "minimum score of an emitted detection"),
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("{origin}: line {line}: expected `key = value`, got `{text}`")]
    Syntax { origin: String, line: usize, text: String },
    #[error("config key `{key}`: cannot parse `{value}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("cannot read config {0}: {1}")]
    Read(PathBuf, String),
}

/// Fully merged key/value map.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(a, _)| a).trim()
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` (each `key=value`), then the
    /// seed environment variable.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e.to_string()))?;
            cfg.merge_text(&text, &path.display().to_string())?;
        }
        for (i, o) in overrides.iter().enumerate() {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: "--set".into(),
                line: i + 1,
                text: o.clone(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.set("train.seed", seed.trim())?;
        }
        cfg.model()?;
        cfg.train()?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: origin.into(),
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key {key} is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e: T::Err| ConfigError::Value {
            key: key.into(),
            value: v.into(),
            reason: e.to_string(),
        })
    }

    fn check<T>(&self, key: &str, r: setpredict_core::Result<T>) -> Result<T, ConfigError> {
        r.map_err(|e| ConfigError::Value {
            key: key.into(),
            value: self.raw(key).into(),
            reason: e.to_string(),
        })
    }

    pub fn model(&self) -> Result<ModelConfig, ConfigError> {
        let cfg = ModelConfig {
            d_model: self.get("model.d_model")?,
            heads: self.get("model.heads")?,
            enc_layers: self.get("model.enc_layers")?,
            dec_layers: self.get("model.dec_layers")?,
            levels: self.get("model.levels")?,
            sample_points: self.get("model.sample_points")?,
            patch: self.get("model.patch")?,
            ffn_dim: self.get("model.ffn_dim")?,
            num_classes: self.class_names().len(),
            num_queries: self.get("query.count")?,
            variant: self.get("query.variant")?,
            pe: PositionalEncodingSpec {
                dim_per_coordinate: self.get("pe.dim")?,
                temperature: self.get("pe.temperature")?,
            },
        };
        self.check("model.d_model", cfg.validate())?;
        Ok(cfg)
    }

    pub fn variant(&self) -> Result<QueryVariant, ConfigError> {
        self.get("query.variant")
    }

    pub fn train(&self) -> Result<TrainConfig, ConfigError> {
        let cfg = TrainConfig {
            batch: self.get("train.batch")?,
            lr: self.get("train.lr")?,
            weight_decay: self.get("train.weight_decay")?,
            clip_norm: self.get("train.clip_norm")?,
            seed: self.get("train.seed")?,
            noise: NoiseConfig {
                lambda1: self.get("noise.lambda1")?,
                lambda2: self.get("noise.lambda2")?,
                groups: self.get("noise.groups")?,
                amd_k: self.get("noise.amd_k")?,
            },
            loss: LossConfig {
                w_class: self.get("loss.w_class")?,
                w_l1: self.get("loss.w_l1")?,
                w_giou: self.get("loss.w_giou")?,
                w_dn: self.get("loss.w_dn")?,
                noobj_weight: self.get("loss.noobj_weight")?,
                aux_layers: self.get("loss.aux_layers")?,
                matcher: CostWeights {
                    w_class: self.get("matcher.w_class")?,
                    w_l1: self.get("matcher.w_l1")?,
                    w_giou: self.get("matcher.w_giou")?,
                },
            },
        };
        self.check("train.lr", cfg.validate())?;
        Ok(cfg)
    }

    pub fn execution(&self) -> Result<Execution, ConfigError> {
        Ok(if self.get::<bool>("train.parallel")? {
            Execution::Parallel
        } else {
            Execution::Sequential
        })
    }

    pub fn preprocess(&self) -> Result<(PreprocessMode, SmudgeConfig), ConfigError> {
        let metric: DistanceMetric = self.get("preprocess.metric")?;
        Ok((
            self.get("preprocess.mode")?,
            SmudgeConfig {
                decay: self.get("preprocess.decay")?,
                metric,
            },
        ))
    }

    pub fn scene(&self) -> Result<SceneSpec, ConfigError> {
        let spec = SceneSpec {
            page_width: self.get("synth.page_width")?,
            page_height: self.get("synth.page_height")?,
            min_objects: self.get("synth.min_objects")?,
            max_objects: self.get("synth.max_objects")?,
            seed: self.get("synth.seed")?,
            min_size: self.get("synth.min_size")?,
            ..SceneSpec::default()
        };
        self.check("synth.max_objects", spec.validate())?;
        Ok(spec)
    }

    pub fn eval_options(&self) -> Result<EvalOptions, ConfigError> {
        Ok(EvalOptions {
            max_detections: self.get("eval.max_detections")?,
            score_threshold: self.get("eval.score_threshold")?,
            pr_iou: self.get("eval.iou")?,
            ..EvalOptions::default()
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        self.raw("data.classes")
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    pub fn data_path(&self) -> Option<PathBuf> {
        let p = self.raw("data.path");
        (!p.is_empty()).then(|| PathBuf::from(p))
    }

    pub fn run_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("checkpoint.path"))
    }
}

/// The effective configuration, one `key = value` per line in key order.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
