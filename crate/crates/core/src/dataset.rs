//! On-disk dataset layout: `manifest.txt` plus `pair_%06d.{ego,co,meta}`.

use std::path::{Path, PathBuf};

use ndarray::Ix3;
use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::kv::{self, KvError, KvWriter};
use crate::synth::{generate_dataset, BevFeature, GeneratorConfig, SynthError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}: tensor is not rank 3")]
    Rank(PathBuf),
    #[error("pair index {index} outside dataset of {count}")]
    IndexOutOfRange { index: usize, count: usize },
}

pub fn pair_stem(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("pair_{index:06}"))
}

fn fmt_list(v: &[f64]) -> String {
    kv::join_list(v)
}

fn flags(v: &[bool]) -> String {
    v.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Writes `count` pairs generated from `(cfg, seed)`.
pub fn write_dataset(dir: &Path, cfg: &GeneratorConfig, seed: u64, count: usize) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir)?;
    let pairs = generate_dataset(cfg, seed, count)?;
    let mut m = KvWriter::new();
    m.put("count", count)
        .put("shape", kv::join_list(&[cfg.height, cfg.width, cfg.channels]))
        .put("seed", seed)
        .put("generator_hash", cfg.hash());
    std::fs::write(dir.join("manifest.txt"), m.finish())?;
    std::fs::write(dir.join("generator.conf"), cfg.to_kv())?;
    for (i, p) in pairs.iter().enumerate() {
        let stem = pair_stem(dir, i);
        container::write_tensor(stem.with_extension("ego"), &p.ego.data)?;
        container::write_tensor(stem.with_extension("co"), &p.co.data)?;
        let mut w = KvWriter::new();
        w.put("delta", fmt_list(&p.delta))
            .put("ego_pose", fmt_list(&p.ego.agent_pose))
            .put("co_pose", fmt_list(&p.co.agent_pose))
            .put("roi_origin", fmt_list(&p.ego.roi_origin))
            .put("cell_size", p.ego.cell_size)
            .put("objects", p.objects.len())
            .put("vis_ego", flags(&p.vis_ego))
            .put("vis_co", flags(&p.vis_co));
        std::fs::write(stem.with_extension("meta"), w.finish())?;
    }
    Ok(())
}

/// A stored pair as seen from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredPair {
    pub ego: BevFeature,
    pub co: BevFeature,
    pub delta: [f64; 3],
}

fn triple(key: &str, v: &str) -> Result<[f64; 3], KvError> {
    let l: Vec<f64> = kv::parse_list(key, v)?;
    l.try_into().map_err(|_| KvError::InvalidValue { key: key.into(), value: v.into() })
}

pub fn read_manifest_count(dir: &Path) -> Result<usize, DatasetError> {
    let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let kv = kv::parse_lines(&text)?;
    let count = kv.iter().find(|(k, _)| k == "count").ok_or_else(|| KvError::Missing("count".into()))?;
    Ok(kv::parse_value("count", &count.1)?)
}

pub fn read_pair(dir: &Path, index: usize) -> Result<StoredPair, DatasetError> {
    let count = read_manifest_count(dir)?;
    if index >= count {
        return Err(DatasetError::IndexOutOfRange { index, count });
    }
    let stem = pair_stem(dir, index);
    let load = |ext: &str| -> Result<ndarray::Array3<f32>, DatasetError> {
        let path = stem.with_extension(ext);
        container::read_tensor(&path)?.into_dimensionality::<Ix3>().map_err(|_| DatasetError::Rank(path))
    };
    let meta = kv::parse_lines(&std::fs::read_to_string(stem.with_extension("meta"))?)?;
    let get = |k: &str| -> Result<&str, KvError> {
        meta.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str()).ok_or_else(|| KvError::Missing(k.into()))
    };
    let delta = triple("delta", get("delta")?)?;
    let ego_pose = triple("ego_pose", get("ego_pose")?)?;
    let co_pose = triple("co_pose", get("co_pose")?)?;
    let roi: Vec<f64> = kv::parse_list("roi_origin", get("roi_origin")?)?;
    let roi = [roi.first().copied().unwrap_or(0.0), roi.get(1).copied().unwrap_or(0.0)];
    let cell: f64 = kv::parse_value("cell_size", get("cell_size")?)?;
    Ok(StoredPair {
        ego: BevFeature::new(load("ego")?, roi, cell, ego_pose)?,
        co: BevFeature::new(load("co")?, roi, cell, co_pose)?,
        delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_scene_pair;

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn same_seed_gives_identical_directories() {
        let cfg = GeneratorConfig { height: 8, width: 6, channels: 2, ..Default::default() };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(a.path(), &cfg, 7, 3).unwrap();
        write_dataset(b.path(), &cfg, 7, 3).unwrap();
        let files = dir_bytes(a.path());
        assert_eq!(files.len(), 2 + 3 * 3);
        assert_eq!(files, dir_bytes(b.path()));
    }

    #[test]
    fn stored_pair_matches_generator() {
        let cfg = GeneratorConfig { height: 8, width: 6, channels: 2, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &cfg, 11, 2).unwrap();
        let stored = read_pair(dir.path(), 1).unwrap();
        let fresh = generate_scene_pair(&cfg, crate::synth::scene_seed(11, 1)).unwrap();
        assert_eq!(stored.ego.data, fresh.ego.data);
        assert_eq!(stored.co.data, fresh.co.data);
        assert_eq!(stored.delta, fresh.delta);
        assert!(matches!(read_pair(dir.path(), 2), Err(DatasetError::IndexOutOfRange { .. })));
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains(&format!("generator_hash={}", cfg.hash())));
    }
}
