//! The two ends of a collaboration link.
//!
//! [`transmit`] runs on the co-agent and is the only code that reads the
//! co-agent feature; [`reconstruct`] runs on the ego agent and sees nothing
//! but the ego feature and the received payload bytes.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::denoiser::{Conditions, Denoiser, DenoiserError, SamplingConditions};
use crate::diffusion::{self, DdimOptions, DiffusionError, NoiseSchedule};
use crate::synth::{BevFeature, SynthError};
use crate::wire::{self, CollabPayload, WireError};

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("payload decode failed: {0}")]
    Decode(#[from] WireError),
    #[error("payload carries L={found}, model expects L={expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("feature shape {found:?} does not match model grid {expected:?}")]
    ShapeMismatch { expected: (usize, usize, usize), found: (usize, usize, usize) },
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Feature(#[from] SynthError),
}

/// Read access to an agent's raw feature.
pub trait FeatureAccess {
    fn feature(&self) -> &BevFeature;
}

impl FeatureAccess for BevFeature {
    fn feature(&self) -> &BevFeature {
        self
    }
}

/// A trained model together with the schedule it was trained on.
#[derive(Debug, Clone)]
pub struct Codec {
    pub model: Denoiser<f32>,
    pub schedule: NoiseSchedule,
}

impl Codec {
    pub fn new(model: Denoiser<f32>, schedule: NoiseSchedule) -> Self {
        Codec { model, schedule }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ReconError> {
        Ok(Codec { model: ck.model.clone(), schedule: ck.schedule.build()? })
    }

    fn check(&self, f: &BevFeature) -> Result<(), ReconError> {
        let expected = self.model.config.grid_shape();
        if f.shape() != expected {
            return Err(ReconError::ShapeMismatch { expected, found: f.shape() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconOptions {
    pub ddim: DdimOptions,
    /// Seed of the initial noise `x_T` (and of the sampler noise if `eta > 0`).
    pub seed: u64,
}

impl ReconOptions {
    pub fn new(steps: usize, seed: u64) -> Self {
        ReconOptions { ddim: DdimOptions::deterministic(steps), seed }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.ddim.x0_clip = (clip > 0.0).then_some(clip as f32);
        self
    }
}

/// Co-agent side: extracts the semantic vector (and optionally the top-K
/// elements) and encodes the payload.
pub fn transmit(codec: &Codec, co: &dyn FeatureAccess, delta: [f64; 3], topk: Option<usize>) -> Result<Vec<u8>, ReconError> {
    let f = co.feature();
    codec.check(f)?;
    let v = codec.model.extract_semantic(&codec.model.normalize(&f.data))?;
    let set = topk.map(|k| wire::select_topk(&f.data, k)).transpose()?;
    Ok(CollabPayload::new(v.as_slice().expect("contiguous"), delta, set).encode()?)
}

/// Ego side: denoises from pure noise conditioned on the ego feature and the
/// received payload, then pastes any top-K elements.
pub fn reconstruct(codec: &Codec, ego: &BevFeature, payload: &[u8], opts: &ReconOptions) -> Result<BevFeature, ReconError> {
    codec.check(ego)?;
    let payload = CollabPayload::decode(payload)?;
    let model = &codec.model;
    if payload.semantic.len() != model.config.semantic_len {
        return Err(ReconError::LengthMismatch { expected: model.config.semantic_len, found: payload.semantic.len() });
    }
    let ego_n = model.normalize(&ego.data);
    let v_ego = model.extract_semantic(&ego_n)?;
    let cond = SamplingConditions {
        ego: ego_n,
        cond: Conditions { delta: payload.delta_f64(), v_co: Array1::from(payload.semantic_f32()), v_ego },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x_t = diffusion::standard_normal(ego.shape(), &mut rng);
    let x0 = diffusion::ddim_sample(model, &x_t, &cond, &codec.schedule, &opts.ddim, &mut rng)?;
    let mut data = model.denormalize(&x0);
    if let Some(set) = &payload.topk {
        data = wire::apply_topk(&data, set)?;
    }
    let d = payload.delta_f64();
    let pose = [ego.agent_pose[0] + d[0], ego.agent_pose[1] + d[1], ego.agent_pose[2] + d[2]];
    Ok(BevFeature::new(data, ego.roi_origin, ego.cell_size, pose)?)
}
