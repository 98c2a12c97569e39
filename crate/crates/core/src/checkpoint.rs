//! Single-file model archive: a `key=value` metadata record followed by named
//! parameter tensors, each stored as a tensor container.
//!
//! ```text
//! magic "DCPCKPT\0" | u32 meta_len | meta (utf-8) | u32 count
//! count × { u16 name_len | name | u64 blob_len | container blob }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::container::{self, ContainerError, Dtype};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserError};
use crate::diffusion::ScheduleConfig;
use crate::kv::{self, KvError, KvWriter};
use crate::nn::Module;

const MAGIC: [u8; 8] = *b"DCPCKPT\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint")]
    BadMagic,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
    #[error("metadata is not valid utf-8")]
    BadMetadata,
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("unexpected tensor {0:?}")]
    UnexpectedTensor(String),
    #[error("tensor {name:?} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor {0}: {1}")]
    Tensor(String, ContainerError),
    #[error(transparent)]
    Config(#[from] KvError),
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Denoiser<f32>,
    pub schedule: ScheduleConfig,
    /// Optimizer steps taken to produce these weights.
    pub step: u64,
    /// Free-form `info.*` metadata, e.g. the last validation score.
    pub info: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Denoiser<f32>, schedule: ScheduleConfig, step: u64) -> Self {
        Checkpoint { model, schedule, step, info: BTreeMap::new() }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.model.config
    }

    fn metadata(&self) -> String {
        let mut w = KvWriter::new();
        w.put("step", self.step);
        self.model.config.write_kv(&mut w, "model.");
        self.schedule.write_kv(&mut w, "schedule.");
        for (k, v) in &self.info {
            w.put(&format!("info.{k}"), v);
        }
        w.finish()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let meta = self.metadata();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let mut tensors = Vec::new();
        let mut failure = None;
        self.model.visit("", &mut |name, shape, values| {
            let arr = Array::from_shape_vec(shape.to_vec(), values.to_vec()).expect("parameter shape");
            match container::encode_tensor(&arr, Dtype::F32) {
                Ok(blob) => tensors.push((name.to_string(), blob)),
                Err(e) => failure = Some(CheckpointError::Tensor(name.to_string(), e)),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, blob) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let meta_len = u32::from_le_bytes(r.array()?) as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| CheckpointError::BadMetadata)?;

        let mut config = DenoiserConfig::default();
        let mut schedule = ScheduleConfig::default();
        let mut step = None;
        let mut info = BTreeMap::new();
        for (key, value) in kv::parse_lines(meta)? {
            let known = if key == "step" {
                step = Some(kv::parse_value(&key, &value)?);
                true
            } else if let Some(k) = key.strip_prefix("model.") {
                config.set(k, &value)?
            } else if let Some(k) = key.strip_prefix("schedule.") {
                schedule.set(k, &value)?
            } else if let Some(k) = key.strip_prefix("info.") {
                info.insert(k.to_string(), value);
                true
            } else {
                false
            };
            if !known {
                return Err(KvError::UnknownKey(key).into());
            }
        }
        let step = step.ok_or_else(|| KvError::Missing("step".into()))?;

        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut blobs = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| CheckpointError::BadMetadata)?.to_string();
            let blob_len = u64::from_le_bytes(r.array()?) as usize;
            let (tensor, _) =
                container::decode_tensor(r.take(blob_len)?).map_err(|e| CheckpointError::Tensor(name.clone(), e))?;
            blobs.insert(name, tensor);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }

        // Parameter values are overwritten below; the seed only fixes shapes.
        let mut model = Denoiser::<f32>::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut failure = None;
        model.visit_mut("", &mut |name, slot| {
            if failure.is_some() {
                return;
            }
            match blobs.remove(name) {
                None => failure = Some(CheckpointError::MissingTensor(name.to_string())),
                Some(t) if t.shape() != slot.shape => {
                    failure = Some(CheckpointError::ShapeMismatch {
                        name: name.to_string(),
                        expected: slot.shape.to_vec(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(t) => slot.value.iter_mut().zip(t.iter()).for_each(|(d, s)| *d = *s),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = blobs.into_keys().next() {
            return Err(CheckpointError::UnexpectedTensor(extra));
        }
        Ok(Checkpoint { model, schedule, step, info })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let cfg = DenoiserConfig {
            height: 8,
            width: 4,
            channels: 2,
            hidden_dim: 8,
            depth: 1,
            heads: 2,
            freq_dim: 4,
            semantic_len: 4,
            code_dim: 8,
            se_channels: [2, 2, 2],
            ..Default::default()
        };
        let mut model = Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let bumped: Vec<f32> = model.flat_values().iter().enumerate().map(|(i, v)| v + i as f32 * 1e-3).collect();
        model.set_flat_values(&bumped);
        let mut ck = Checkpoint::new(model, ScheduleConfig::default(), 42);
        ck.info.insert("val_mse".into(), "0.125".into());
        ck
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = small();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = small();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn one_semantic_extractor_in_archive() {
        let bytes = small().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert_eq!(text.matches("se.conv1.weight").count(), 1);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = small().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn config_mismatch_is_detected() {
        let ck = small();
        let mut other = ck.clone();
        other.model.config.code_dim = 10;
        // Re-serialize the metadata of `other` with the tensors of `ck`.
        let good = ck.to_bytes().unwrap();
        let meta_len = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
        let new_meta = other.metadata();
        let mut forged = good[..8].to_vec();
        forged.extend_from_slice(&(new_meta.len() as u32).to_le_bytes());
        forged.extend_from_slice(new_meta.as_bytes());
        forged.extend_from_slice(&good[12 + meta_len..]);
        assert!(matches!(Checkpoint::from_bytes(&forged), Err(CheckpointError::ShapeMismatch { .. })));
    }
}
