//! Run configuration: UTF-8 `key = value` lines with `#` comments.
//! Unknown keys are errors so typos fail fast.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gcl::{Aggregation, ViewSet};
use crate::numerics::AdamWConfig;
use crate::oci::AdaptOptions;
use crate::pipeline::{InferenceMode, SegmentOptions, SessionScope};
use crate::scl::ContextGating;
use crate::vlm::ModelConfig;

/// Full configuration: method hyperparameters, backbone structure, and
/// the synthetic-suite protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // method
    pub k: usize,
    pub delta: f64,
    pub tau: f64,
    pub p: usize,
    pub r: usize,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub aggregation: Aggregation,
    pub z: usize,
    pub gcl_softmax: bool,
    pub session_scope: SessionScope,
    pub context_gating: ContextGating,
    pub adapt_seed: u64,
    // backbone
    pub model_seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub positional_embeddings: bool,
    // suite
    pub seed: u64,
    pub scenes: usize,
    pub classes: usize,
    pub scene_height: usize,
    pub scene_width: usize,
    pub texture_noise: f64,
    pub window: usize,
    pub stride: usize,
    pub synonyms: Option<PathBuf>,
    pub k_sweep: Vec<usize>,
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 4,
            delta: 0.5,
            tau: 0.01,
            p: 2,
            r: 8,
            beta: 16.0,
            lr: 3e-4,
            weight_decay: 0.01,
            iterations: 1,
            aggregation: Aggregation::Mean,
            z: 5,
            gcl_softmax: false,
            session_scope: SessionScope::Window,
            context_gating: ContextGating::PerDimension,
            adapt_seed: 1001,
            model_seed: 7,
            image_size: 224,
            patch_size: 16,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            vocab_size: 4096,
            positional_embeddings: true,
            seed: 42,
            scenes: 32,
            classes: 4,
            scene_height: 224,
            scene_width: 224,
            texture_noise: 0.05,
            window: 224,
            stride: 112,
            synonyms: None,
            k_sweep: Vec::new(),
            timing: false,
        }
    }
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::ConfigError(format!("cannot parse '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::ConfigError(format!(
            "cannot parse '{value}' as a boolean for key '{key}'"
        ))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::ConfigError(format!("line {}: expected 'key = value'", idx + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::ConfigError(format!(
                    "line {}: duplicate key '{key}'",
                    idx + 1
                )));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "k" => self.k = parse_scalar(key, value)?,
            "delta" => self.delta = parse_scalar(key, value)?,
            "tau" => self.tau = parse_scalar(key, value)?,
            "p" => self.p = parse_scalar(key, value)?,
            "r" => self.r = parse_scalar(key, value)?,
            "beta" => self.beta = parse_scalar(key, value)?,
            "lr" => self.lr = parse_scalar(key, value)?,
            "weight_decay" => self.weight_decay = parse_scalar(key, value)?,
            "iterations" => self.iterations = parse_scalar(key, value)?,
            "aggregation" => {
                self.aggregation = match value {
                    "mean" => Aggregation::Mean,
                    "max" => Aggregation::Max,
                    _ => {
                        return Err(Error::ConfigError(format!(
                            "aggregation must be 'mean' or 'max', got '{value}'"
                        )))
                    }
                }
            }
            "z" => self.z = parse_scalar(key, value)?,
            "gcl_softmax" => self.gcl_softmax = parse_bool(key, value)?,
            "session_scope" => {
                self.session_scope = match value {
                    "window" => SessionScope::Window,
                    "image" => SessionScope::Image,
                    _ => {
                        return Err(Error::ConfigError(format!(
                            "session_scope must be 'window' or 'image', got '{value}'"
                        )))
                    }
                }
            }
            "context_gating" => {
                self.context_gating = match value {
                    "per_dim" => ContextGating::PerDimension,
                    "per_synonym" => ContextGating::PerSynonym,
                    _ => {
                        return Err(Error::ConfigError(format!(
                            "context_gating must be 'per_dim' or 'per_synonym', got '{value}'"
                        )))
                    }
                }
            }
            "adapt_seed" => self.adapt_seed = parse_scalar(key, value)?,
            "model_seed" => self.model_seed = parse_scalar(key, value)?,
            "image_size" => self.image_size = parse_scalar(key, value)?,
            "patch_size" => self.patch_size = parse_scalar(key, value)?,
            "embed_dim" => self.embed_dim = parse_scalar(key, value)?,
            "num_blocks" => self.num_blocks = parse_scalar(key, value)?,
            "num_heads" => self.num_heads = parse_scalar(key, value)?,
            "vocab_size" => self.vocab_size = parse_scalar(key, value)?,
            "positional_embeddings" => self.positional_embeddings = parse_bool(key, value)?,
            "seed" => self.seed = parse_scalar(key, value)?,
            "scenes" => self.scenes = parse_scalar(key, value)?,
            "classes" => self.classes = parse_scalar(key, value)?,
            "scene_height" => self.scene_height = parse_scalar(key, value)?,
            "scene_width" => self.scene_width = parse_scalar(key, value)?,
            "texture_noise" => self.texture_noise = parse_scalar(key, value)?,
            "window" => self.window = parse_scalar(key, value)?,
            "stride" => self.stride = parse_scalar(key, value)?,
            "synonyms" => {
                self.synonyms = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "k_sweep" => {
                self.k_sweep = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse_scalar("k_sweep", v.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "timing" => self.timing = parse_bool(key, value)?,
            _ => {
                return Err(Error::ConfigError(format!("unknown key '{key}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        ViewSet::new(self.k)?;
        for &k in &self.k_sweep {
            ViewSet::new(k)?;
        }
        self.model_config().validate()?;
        self.adapt_options()?.validate()?;
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::ConfigError(format!("bad learning rate {}", self.lr)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::ConfigError(format!(
                "bad weight decay {}",
                self.weight_decay
            )));
        }
        if self.z == 0 {
            return Err(Error::ConfigError("z must be at least 1".into()));
        }
        if self.window != self.image_size {
            return Err(Error::ConfigError(format!(
                "window {} must equal the model input size {}",
                self.window, self.image_size
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            vocab_size: self.vocab_size,
            positional_embeddings: self.positional_embeddings,
            seed: self.model_seed,
        }
    }

    pub fn adapt_options(&self) -> Result<AdaptOptions> {
        Ok(AdaptOptions {
            views: ViewSet::new(self.k)?,
            aggregation: self.aggregation,
            gcl_softmax: self.gcl_softmax,
            delta: self.delta,
            tau: self.tau,
            last_blocks: self.p,
            rank: self.r,
            lora_scale: self.beta,
            iterations: self.iterations,
            optimizer: AdamWConfig {
                learning_rate: self.lr,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            gating: self.context_gating,
            adapt_seed: self.adapt_seed,
        })
    }

    pub fn segment_options(&self, mode: InferenceMode) -> Result<SegmentOptions> {
        Ok(SegmentOptions {
            adapt: self.adapt_options()?,
            window: self.window,
            stride: self.stride,
            scope: self.session_scope,
            mode,
        })
    }

    /// Canonical `key = value` listing in schema order, used for config
    /// echo in reports.
    pub fn echo(&self) -> String {
        let aggregation = match self.aggregation {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
        };
        let scope = match self.session_scope {
            SessionScope::Window => "window",
            SessionScope::Image => "image",
        };
        let gating = match self.context_gating {
            ContextGating::PerDimension => "per_dim",
            ContextGating::PerSynonym => "per_synonym",
        };
        let synonyms = self
            .synonyms
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let k_sweep = self
            .k_sweep
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "k = {}\ndelta = {}\ntau = {}\np = {}\nr = {}\nbeta = {}\nlr = {}\n\
             weight_decay = {}\niterations = {}\naggregation = {aggregation}\nz = {}\n\
             gcl_softmax = {}\nsession_scope = {scope}\ncontext_gating = {gating}\n\
             adapt_seed = {}\nmodel_seed = {}\nimage_size = {}\npatch_size = {}\n\
             embed_dim = {}\nnum_blocks = {}\nnum_heads = {}\nvocab_size = {}\n\
             positional_embeddings = {}\nseed = {}\nscenes = {}\nclasses = {}\n\
             scene_height = {}\nscene_width = {}\ntexture_noise = {}\nwindow = {}\n\
             stride = {}\nsynonyms = {synonyms}\nk_sweep = {k_sweep}\ntiming = {}\n",
            self.k,
            self.delta,
            self.tau,
            self.p,
            self.r,
            self.beta,
            self.lr,
            self.weight_decay,
            self.iterations,
            self.z,
            self.gcl_softmax,
            self.adapt_seed,
            self.model_seed,
            self.image_size,
            self.patch_size,
            self.embed_dim,
            self.num_blocks,
            self.num_heads,
            self.vocab_size,
            self.positional_embeddings,
            self.seed,
            self.scenes,
            self.classes,
            self.scene_height,
            self.scene_width,
            self.texture_noise,
            self.window,
            self.stride,
            self.timing,
        )
    }
}
