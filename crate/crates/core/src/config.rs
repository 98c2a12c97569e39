//! Run configuration: everything needed to reproduce a training and
//! evaluation run, serialized as prefixed `key=value` lines.

use std::path::Path;

use thiserror::Error;

use crate::denoiser::{DenoiserConfig, DenoiserError};
use crate::diffusion::{DiffusionError, ScheduleConfig};
use crate::kv::{self, KvError, KvWriter};
use crate::synth::{GeneratorConfig, SynthError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Generator(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Schedule(#[from] DiffusionError),
    #[error("invalid run config: {0}")]
    Invalid(String),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub algorithm: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Weight λ of the variational term.
    pub vlb_weight: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Validation and checkpoint period in steps; `0` disables it.
    pub val_every: usize,
    pub val_pairs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            algorithm: "adamw".into(),
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 32,
            steps: 20_000,
            vlb_weight: 1e-3,
            grad_clip: 0.0,
            val_every: 1000,
            val_pairs: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub steps_list: Vec<usize>,
    pub semantic_lens: Vec<usize>,
    pub eval_pairs: usize,
    pub downstream_scenes: usize,
    pub topk: usize,
    pub hz: f64,
    /// Clamp for predicted clean features during sampling, in normalized
    /// units; `0` disables it.
    pub x0_clip: f64,
    pub detect_threshold: f64,
    /// Detection-to-object matching radius, meters.
    pub match_radius: f64,
    /// Fine-tune budget for shorter semantic vectors, as a fraction of
    /// `optim.steps`.
    pub finetune_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            steps_list: vec![2, 3, 4, 5, 10],
            semantic_lens: vec![512, 256, 128, 64, 32, 16],
            eval_pairs: 200,
            downstream_scenes: 500,
            topk: 25,
            hz: 10.0,
            x0_clip: 7.0,
            detect_threshold: 0.5,
            match_radius: 2.0,
            finetune_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub train: u64,
    pub val: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { data: 1, init: 2, train: 3, val: 4, eval: 5 }
    }
}

impl Seeds {
    /// Derives every seed from one base value.
    pub fn from_base(base: u64) -> Self {
        Seeds {
            data: base,
            init: base.wrapping_add(1),
            train: base.wrapping_add(2),
            val: base.wrapping_add(3),
            eval: base.wrapping_add(4),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            // Raw activations have std ~0.09; this brings them to unit scale.
            model: DenoiserConfig { feature_scale: 0.1, ..Default::default() },
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    /// Reduced budget that trains on a single CPU core in well under an hour.
    pub fn desk() -> Self {
        let mut cfg = RunConfig::default();
        cfg.model.hidden_dim = 64;
        cfg.model.depth = 2;
        cfg.model.heads = 4;
        cfg.model.mlp_ratio = 4;
        cfg.model.freq_dim = 32;
        cfg.optim.lr = 5e-4;
        cfg.optim.batch_size = 8;
        cfg.optim.steps = 6000;
        cfg.optim.grad_clip = 1.0;
        cfg.optim.val_every = 1000;
        cfg
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.generator.validate()?;
        self.model.validate()?;
        self.schedule.build()?;
        let g = &self.generator;
        if (g.height, g.width, g.channels) != self.model.grid_shape() {
            return Err(ConfigError::Invalid("generator and model grids differ".into()));
        }
        let o = &self.optim;
        if o.algorithm != "adamw" {
            return Err(ConfigError::Invalid(format!("unknown optimizer {:?}", o.algorithm)));
        }
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(ConfigError::Invalid("optimizer hyperparameters out of range".into()));
        }
        if o.batch_size == 0 || o.weight_decay < 0.0 || o.grad_clip < 0.0 || o.vlb_weight < 0.0 {
            return Err(ConfigError::Invalid("batch size must be positive and weights non-negative".into()));
        }
        let e = &self.eval;
        if e.steps_list.is_empty() || e.semantic_lens.is_empty() || e.steps_list.iter().any(|&s| s < 2) {
            return Err(ConfigError::Invalid("eval grids need at least one entry, steps ≥ 2".into()));
        }
        if e.semantic_lens.iter().any(|&l| l == 0 || l > self.model.semantic_len) {
            return Err(ConfigError::Invalid("eval lengths must lie in 1..=model.semantic_len".into()));
        }
        if !(e.hz > 0.0) || e.x0_clip < 0.0 || !(e.match_radius > 0.0) || !(e.finetune_fraction > 0.0) {
            return Err(ConfigError::Invalid("eval parameters out of range".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool, KvError> {
        let Some((section, k)) = key.split_once('.') else { return Ok(false) };
        let v = value;
        let p = |k: &str, v: &str| -> Result<f64, KvError> { kv::parse_value(k, v) };
        Ok(match section {
            "gen" => self.generator.set(k, v)?,
            "model" => self.model.set(k, v)?,
            "schedule" => self.schedule.set(k, v)?,
            "optim" => {
                let o = &mut self.optim;
                match k {
                    "algorithm" => o.algorithm = v.to_string(),
                    "lr" => o.lr = p(key, v)?,
                    "beta1" => o.beta1 = p(key, v)?,
                    "beta2" => o.beta2 = p(key, v)?,
                    "eps" => o.eps = p(key, v)?,
                    "weight_decay" => o.weight_decay = p(key, v)?,
                    "batch_size" => o.batch_size = kv::parse_value(key, v)?,
                    "steps" => o.steps = kv::parse_value(key, v)?,
                    "vlb_weight" => o.vlb_weight = p(key, v)?,
                    "grad_clip" => o.grad_clip = p(key, v)?,
                    "val_every" => o.val_every = kv::parse_value(key, v)?,
                    "val_pairs" => o.val_pairs = kv::parse_value(key, v)?,
                    _ => return Ok(false),
                }
                true
            }
            "eval" => {
                let e = &mut self.eval;
                match k {
                    "steps_list" => e.steps_list = kv::parse_list(key, v)?,
                    "semantic_lens" => e.semantic_lens = kv::parse_list(key, v)?,
                    "eval_pairs" => e.eval_pairs = kv::parse_value(key, v)?,
                    "downstream_scenes" => e.downstream_scenes = kv::parse_value(key, v)?,
                    "topk" => e.topk = kv::parse_value(key, v)?,
                    "hz" => e.hz = p(key, v)?,
                    "x0_clip" => e.x0_clip = p(key, v)?,
                    "detect_threshold" => e.detect_threshold = p(key, v)?,
                    "match_radius" => e.match_radius = p(key, v)?,
                    "finetune_fraction" => e.finetune_fraction = p(key, v)?,
                    _ => return Ok(false),
                }
                true
            }
            "seed" => {
                let s = &mut self.seeds;
                match k {
                    "data" => s.data = kv::parse_value(key, v)?,
                    "init" => s.init = kv::parse_value(key, v)?,
                    "train" => s.train = kv::parse_value(key, v)?,
                    "val" => s.val = kv::parse_value(key, v)?,
                    "eval" => s.eval = kv::parse_value(key, v)?,
                    _ => return Ok(false),
                }
                true
            }
            _ => false,
        })
    }

    /// Applies `key=value` text on top of `self`.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), ConfigError> {
        for (key, value) in kv::parse_lines(text)? {
            if !self.set(&key, &value)? {
                return Err(KvError::UnknownKey(key).into());
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        self.generator.write_kv(&mut w, "gen.");
        self.model.write_kv(&mut w, "model.");
        self.schedule.write_kv(&mut w, "schedule.");
        let o = &self.optim;
        w.put("optim.algorithm", &o.algorithm)
            .put("optim.lr", o.lr)
            .put("optim.beta1", o.beta1)
            .put("optim.beta2", o.beta2)
            .put("optim.eps", o.eps)
            .put("optim.weight_decay", o.weight_decay)
            .put("optim.batch_size", o.batch_size)
            .put("optim.steps", o.steps)
            .put("optim.vlb_weight", o.vlb_weight)
            .put("optim.grad_clip", o.grad_clip)
            .put("optim.val_every", o.val_every)
            .put("optim.val_pairs", o.val_pairs);
        let e = &self.eval;
        w.put("eval.steps_list", kv::join_list(&e.steps_list))
            .put("eval.semantic_lens", kv::join_list(&e.semantic_lens))
            .put("eval.eval_pairs", e.eval_pairs)
            .put("eval.downstream_scenes", e.downstream_scenes)
            .put("eval.topk", e.topk)
            .put("eval.hz", e.hz)
            .put("eval.x0_clip", e.x0_clip)
            .put("eval.detect_threshold", e.detect_threshold)
            .put("eval.match_radius", e.match_radius)
            .put("eval.finetune_fraction", e.finetune_fraction);
        let s = &self.seeds;
        w.put("seed.data", s.data)
            .put("seed.init", s.init)
            .put("seed.train", s.train)
            .put("seed.val", s.val)
            .put("seed.eval", s.eval);
        w.finish()
    }
}
