//! Plain-text run configuration.
//!
//! One `section.key = value` per line; `#` starts a comment. Keys not listed
//! in [`RunConfig::to_text`] are rejected, as are repeated keys.

use std::fs;
use std::path::{Path, PathBuf};

use crate::adapter::AdapterConfig;
use crate::backbone::BackboneConfig;
use crate::data::{Distortion, KindMix};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::optim::OptimConfig;
use crate::train::{EvalConfig, F1Mode, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub lambda_edge: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            train_count: 1000,
            val_count: 200,
            epochs: 5,
            lr_init: 1e-3,
            lr_min: 1e-5,
            lambda_edge: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub mix: KindMix,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_count: 2000,
            test_count: 500,
            mix: KindMix::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Pretrained backbone used by `train`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: PathBuf::from("data"),
            out: PathBuf::from("runs"),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub log_every: usize,
    pub batch_size: usize,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub loss: LossConfig,
    /// `total_steps` is the number of adapter training steps.
    pub optim: OptimConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub paths: Paths,
    pub eval_mode: F1Mode,
    pub eval_distortions: Vec<Distortion>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            log_every: 50,
            batch_size: 1,
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            paths: Paths::default(),
            eval_mode: F1Mode::PerImage,
            eval_distortions: Vec::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'section.key = value'", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: '{key}' given twice", no + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "run.seed" => self.seed = parse(key, v)?,
            "run.log_every" => self.log_every = parse(key, v)?,
            "run.batch_size" => self.batch_size = parse(key, v)?,
            "backbone.image_size" => self.backbone.image_size = parse(key, v)?,
            "backbone.patch_size" => self.backbone.patch_size = parse(key, v)?,
            "backbone.embed_dim" => self.backbone.embed_dim = parse(key, v)?,
            "backbone.depth" => self.backbone.depth = parse(key, v)?,
            "backbone.heads" => self.backbone.heads = parse(key, v)?,
            "backbone.mlp_ratio" => self.backbone.mlp_ratio = parse(key, v)?,
            "backbone.decoder_channels" => self.backbone.decoder_channels = list(key, v)?,
            "adapter.kind" => self.adapter.kind = parse(key, v)?,
            "adapter.placement" => self.adapter.placement = parse(key, v)?,
            "adapter.width" => self.adapter.width = parse(key, v)?,
            "adapter.lora_rank" => self.adapter.lora_rank = parse(key, v)?,
            "adapter.rho_init" => self.adapter.rho_init = parse(key, v)?,
            "adapter.alpha_init" => self.adapter.alpha_init = parse(key, v)?,
            "loss.lambda_edge" => self.loss.lambda_edge = parse(key, v)?,
            "loss.bce_eps" => self.loss.eps = parse(key, v)?,
            "optim.lr_init" => self.optim.lr_init = parse(key, v)?,
            "optim.lr_min" => self.optim.lr_min = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.steps" => self.optim.total_steps = parse(key, v)?,
            "pretrain.train_count" => self.pretrain.train_count = parse(key, v)?,
            "pretrain.val_count" => self.pretrain.val_count = parse(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.lr_init" => self.pretrain.lr_init = parse(key, v)?,
            "pretrain.lr_min" => self.pretrain.lr_min = parse(key, v)?,
            "pretrain.lambda_edge" => self.pretrain.lambda_edge = parse(key, v)?,
            "data.train_count" => self.data.train_count = parse(key, v)?,
            "data.test_count" => self.data.test_count = parse(key, v)?,
            "data.authentic" => self.data.mix.weights[0] = parse(key, v)?,
            "data.copy_move" => self.data.mix.weights[1] = parse(key, v)?,
            "data.splice" => self.data.mix.weights[2] = parse(key, v)?,
            "data.removal" => self.data.mix.weights[3] = parse(key, v)?,
            "paths.data" => self.paths.data = PathBuf::from(v),
            "paths.out" => self.paths.out = PathBuf::from(v),
            "paths.checkpoint" => self.paths.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "eval.mode" => {
                self.eval_mode = match v {
                    "per_image" => F1Mode::PerImage,
                    "pooled" => F1Mode::Pooled,
                    _ => return Err(Error::Config(format!("{key}: expected per_image or pooled, got '{v}'"))),
                }
            }
            "eval.distortions" => self.eval_distortions = list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let a = &self.adapter;
        let o = &self.optim;
        let p = &self.pretrain;
        let w = &self.data.mix.weights;
        let entries: Vec<(&str, String)> = vec![
            ("run.seed", self.seed.to_string()),
            ("run.log_every", self.log_every.to_string()),
            ("run.batch_size", self.batch_size.to_string()),
            ("backbone.image_size", b.image_size.to_string()),
            ("backbone.patch_size", b.patch_size.to_string()),
            ("backbone.embed_dim", b.embed_dim.to_string()),
            ("backbone.depth", b.depth.to_string()),
            ("backbone.heads", b.heads.to_string()),
            ("backbone.mlp_ratio", b.mlp_ratio.to_string()),
            ("backbone.decoder_channels", join(&b.decoder_channels)),
            ("adapter.kind", a.kind.to_string()),
            ("adapter.placement", a.placement.to_string()),
            ("adapter.width", a.width.to_string()),
            ("adapter.lora_rank", a.lora_rank.to_string()),
            ("adapter.rho_init", a.rho_init.to_string()),
            ("adapter.alpha_init", a.alpha_init.to_string()),
            ("loss.lambda_edge", self.loss.lambda_edge.to_string()),
            ("loss.bce_eps", self.loss.eps.to_string()),
            ("optim.lr_init", o.lr_init.to_string()),
            ("optim.lr_min", o.lr_min.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("optim.steps", o.total_steps.to_string()),
            ("pretrain.train_count", p.train_count.to_string()),
            ("pretrain.val_count", p.val_count.to_string()),
            ("pretrain.epochs", p.epochs.to_string()),
            ("pretrain.lr_init", p.lr_init.to_string()),
            ("pretrain.lr_min", p.lr_min.to_string()),
            ("pretrain.lambda_edge", p.lambda_edge.to_string()),
            ("data.train_count", self.data.train_count.to_string()),
            ("data.test_count", self.data.test_count.to_string()),
            ("data.authentic", w[0].to_string()),
            ("data.copy_move", w[1].to_string()),
            ("data.splice", w[2].to_string()),
            ("data.removal", w[3].to_string()),
            ("paths.data", self.paths.data.display().to_string()),
            ("paths.out", self.paths.out.display().to_string()),
            (
                "paths.checkpoint",
                self.paths
                    .checkpoint
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string()),
            ),
            (
                "eval.mode",
                match self.eval_mode {
                    F1Mode::PerImage => "per_image",
                    F1Mode::Pooled => "pooled",
                }
                .to_string(),
            ),
            ("eval.distortions", join(&self.eval_distortions)),
        ];
        entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(strip(e)));
        wrap(self.backbone.validate())?;
        wrap(self.adapter.validate())?;
        wrap(self.loss.validate())?;
        wrap(self.optim.validate())?;
        wrap(self.data.mix.validate())?;
        wrap(self.pretrain_train_config().validate())?;
        wrap(self.train_config().validate())?;
        if self.pretrain.train_count == 0 || self.pretrain.val_count == 0 {
            return Err(Error::Config("pretrain counts must be positive".into()));
        }
        if self.data.train_count == 0 || self.data.test_count == 0 {
            return Err(Error::Config("data counts must be positive".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.optim.total_steps,
            batch_size: self.batch_size,
            log_every: self.log_every,
            seed: self.seed,
            loss: self.loss.clone(),
            optim: self.optim.clone(),
        }
    }

    /// Full-model training on the proxy task.
    pub fn pretrain_train_config(&self) -> TrainConfig {
        let steps = self.pretrain.epochs * self.pretrain.train_count.div_ceil(self.batch_size);
        TrainConfig {
            steps,
            batch_size: self.batch_size,
            log_every: self.log_every,
            seed: self.seed,
            loss: LossConfig {
                lambda_edge: self.pretrain.lambda_edge,
                ..self.loss.clone()
            },
            optim: OptimConfig {
                lr_init: self.pretrain.lr_init,
                lr_min: self.pretrain.lr_min,
                total_steps: steps.max(1),
                ..self.optim.clone()
            },
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            mode: self.eval_mode,
            distortions: self.eval_distortions.clone(),
            seed: self.seed,
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) | Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}
