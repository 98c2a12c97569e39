//! Training loop: fresh synthetic pairs every step, uniform timesteps,
//! hybrid loss, AdamW at a constant learning rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::config::{ConfigError, RunConfig};
use crate::denoiser::{Denoiser, DenoiserError, TrainExample};
use crate::diffusion::{standard_normal, DiffusionError, LossTerms, NoiseSchedule};
use crate::nn::Module;
use crate::optim::AdamW;
use crate::recon::{self, Codec, ReconError, ReconOptions};
use crate::synth::{generate_scene_pair, scene_seed, ScenePair, SynthError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("initial model does not match the configured architecture")]
    InitMismatch,
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Recon(#[from] ReconError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossTerms,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValRecord {
    pub step: usize,
    /// Mean noise-prediction MSE on the fixed validation examples.
    pub simple: f64,
    /// Mean 5-step reconstruction MSE on the validation pairs.
    pub mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub val: Vec<ValRecord>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,total,simple,vlb,grad_norm\n");
        for r in &self.steps {
            out += &format!("{},{},{},{},{}\n", r.step, r.loss.total, r.loss.simple, r.loss.vlb, r.grad_norm);
        }
        out
    }

    pub fn val_csv(&self) -> String {
        let mut out = String::from("step,val_simple,val_mse\n");
        for r in &self.val {
            out += &format!("{},{},{}\n", r.step, r.simple, r.mse);
        }
        out
    }
}

pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Validation(&'a ValRecord, &'a Denoiser<f32>),
}

/// Fixed held-out examples for validation.
pub struct ValidationSet {
    pairs: Vec<ScenePair>,
    timesteps: Vec<usize>,
    eps: Vec<ndarray::Array3<f32>>,
}

pub const VAL_SAMPLING_STEPS: usize = 5;

impl ValidationSet {
    pub fn new(cfg: &RunConfig) -> Result<Self, TrainError> {
        let n = cfg.optim.val_pairs;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.val);
        let pairs = (0..n)
            .map(|i| generate_scene_pair(&cfg.generator, scene_seed(cfg.seeds.val, i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let t_max = cfg.schedule.num_steps;
        let timesteps = (0..n).map(|i| 1 + (i * t_max) / n.max(1)).collect();
        let eps = (0..n).map(|_| standard_normal(cfg.model.grid_shape(), &mut rng)).collect();
        Ok(ValidationSet { pairs, timesteps, eps })
    }

    pub fn evaluate(&self, model: &Denoiser<f32>, schedule: &NoiseSchedule, cfg: &RunConfig, step: usize) -> Result<ValRecord, TrainError> {
        if self.pairs.is_empty() {
            return Ok(ValRecord { step, simple: f64::NAN, mse: f64::NAN });
        }
        let codec = Codec::new(model.clone(), schedule.clone());
        let mut simple = 0.0;
        let mut mse = 0.0;
        for (i, pair) in self.pairs.iter().enumerate() {
            let (ego, co) = (model.normalize(&pair.ego.data), model.normalize(&pair.co.data));
            let ex = TrainExample { ego: &ego, co: &co, delta: pair.delta, t: self.timesteps[i], eps: &self.eps[i] };
            simple += model.example_loss(&ex, schedule, cfg.optim.vlb_weight, None)?.simple;

            let bytes = recon::transmit(&codec, &pair.co, pair.delta, None)?;
            let opts = ReconOptions::new(VAL_SAMPLING_STEPS, cfg.seeds.val ^ i as u64).with_clip(cfg.eval.x0_clip);
            let out = recon::reconstruct(&codec, &pair.ego, &bytes, &opts)?;
            mse += crate::eval::mse(&out.data, &pair.co.data);
        }
        let n = self.pairs.len() as f64;
        Ok(ValRecord { step, simple: simple / n, mse: mse / n })
    }
}

/// Trains from `init` (or a fresh initialization) for `cfg.optim.steps`
/// steps.
pub fn train(
    cfg: &RunConfig,
    init: Option<Denoiser<f32>>,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    let mut model = match init {
        Some(m) if m.config == cfg.model => m,
        Some(_) => return Err(TrainError::InitMismatch),
        None => Denoiser::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seeds.init))?,
    };
    model.zero_grad();
    let mut opt = AdamW::new(&cfg.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.train);
    let val = ValidationSet::new(cfg)?;
    let mut log = TrainLog::default();
    let o = &cfg.optim;
    let t_max = schedule.num_steps();

    let validate = |model: &Denoiser<f32>,
                    step: usize,
                    log: &mut TrainLog,
                    observer: &mut dyn FnMut(TrainEvent<'_>)|
     -> Result<(), TrainError> {
        let rec = val.evaluate(model, &schedule, cfg, step)?;
        log.val.push(rec);
        observer(TrainEvent::Validation(&rec, model));
        Ok(())
    };
    if o.val_every > 0 && o.val_pairs > 0 {
        validate(&model, 0, &mut log, observer)?;
    }

    let weight = 1.0 / o.batch_size as f64;
    for step in 1..=o.steps {
        let mut sum = LossTerms { total: 0.0, simple: 0.0, vlb: 0.0 };
        for i in 0..o.batch_size {
            let index = ((step - 1) * o.batch_size + i) as u64;
            let pair = generate_scene_pair(&cfg.generator, scene_seed(cfg.seeds.data, index))?;
            let (ego, co) = (model.normalize(&pair.ego.data), model.normalize(&pair.co.data));
            let t = rng.random_range(1..=t_max);
            let eps = standard_normal(co.dim(), &mut rng);
            let ex = TrainExample { ego: &ego, co: &co, delta: pair.delta, t, eps: &eps };
            let terms = match model.train_example(&ex, &schedule, o.vlb_weight, weight) {
                Ok(terms) => terms,
                Err(DenoiserError::Diffusion(DiffusionError::NonFinite(_)) | DenoiserError::NonFinite(_)) => {
                    return Err(TrainError::Diverged { step, loss: f64::NAN })
                }
                Err(e) => return Err(e.into()),
            };
            sum.total += terms.total * weight;
            sum.simple += terms.simple * weight;
            sum.vlb += terms.vlb * weight;
        }
        if !sum.total.is_finite() {
            return Err(TrainError::Diverged { step, loss: sum.total });
        }
        let grad_norm = opt.step(&mut model);
        if !grad_norm.is_finite() {
            return Err(TrainError::Diverged { step, loss: grad_norm });
        }
        let rec = StepRecord { step, loss: sum, grad_norm };
        log.steps.push(rec);
        observer(TrainEvent::Step(&rec));
        if o.val_every > 0 && o.val_pairs > 0 && (step % o.val_every == 0 || step == o.steps) {
            validate(&model, step, &mut log, observer)?;
        }
    }

    let mut ck = Checkpoint::new(model, cfg.schedule, opt.steps_taken());
    if let Some(last) = log.val.last() {
        ck.info.insert("val_simple".into(), format!("{}", last.simple));
        ck.info.insert("val_mse".into(), format!("{}", last.mse));
    }
    Ok((ck, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.generator.height = 8;
        cfg.generator.width = 8;
        cfg.generator.channels = 2;
        cfg.generator.min_objects = 2;
        cfg.generator.max_objects = 2;
        cfg.model.height = 8;
        cfg.model.width = 8;
        cfg.model.channels = 2;
        cfg.model.hidden_dim = 8;
        cfg.model.depth = 1;
        cfg.model.heads = 2;
        cfg.model.freq_dim = 8;
        cfg.model.semantic_len = 8;
        cfg.model.code_dim = 8;
        cfg.model.se_channels = [2, 2, 2];
        cfg.eval.semantic_lens = vec![8, 4];
        cfg.optim.batch_size = 2;
        cfg.optim.steps = 3;
        cfg.optim.val_every = 2;
        cfg.optim.val_pairs = 2;
        cfg.optim.lr = 1e-3;
        cfg
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let mut cfg = micro_config();
        cfg.optim.steps = 0;
        let (ck, log) = train(&cfg, None, &mut |_| {}).unwrap();
        let fresh = Denoiser::<f32>::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seeds.init)).unwrap();
        assert_eq!(ck.model, fresh);
        assert_eq!(ck.step, 0);
        assert!(log.steps.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_moves_weights() {
        let cfg = micro_config();
        let mut events = 0;
        let (a, log) = train(&cfg, None, &mut |_| events += 1).unwrap();
        let (b, _) = train(&cfg, None, &mut |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.step, 3);
        assert_eq!(log.steps.len(), 3);
        assert_eq!(log.val.iter().map(|v| v.step).collect::<Vec<_>>(), vec![0, 2, 3]);
        assert_eq!(events, 6);
        let fresh = Denoiser::<f32>::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seeds.init)).unwrap();
        assert_ne!(a.model, fresh);
        assert!(a.info.contains_key("val_mse"));
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = micro_config();
        cfg.optim.lr = 1e30;
        cfg.optim.steps = 20;
        cfg.optim.val_every = 0;
        let err = train(&cfg, None, &mut |_| {}).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
    }

    #[test]
    fn rejects_mismatched_init() {
        let cfg = micro_config();
        let mut other = cfg.model.clone();
        other.semantic_len = 4;
        let m = Denoiser::<f32>::new(other, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(train(&cfg, Some(m), &mut |_| {}), Err(TrainError::InitMismatch)));
    }
}
