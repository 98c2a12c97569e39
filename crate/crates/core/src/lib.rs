//! Diffusion-based compression of collaborative bird's-eye-view features.
//!
//! The ego agent reconstructs a collaborator's BEV feature grid with a
//! conditional diffusion transformer, receiving only a short semantic vector
//! (and optionally a handful of top-K feature elements) over the air.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod downstream;
pub mod eval;
pub mod kv;
pub mod nn;
pub mod optim;
pub mod recon;
pub mod synth;
pub mod train;
pub mod wire;
