//! Synthetic paired BEV features for an ego agent and one collaborator.
//!
//! A scene is a handful of Gaussian blobs on the ground plane. Each agent sees
//! the blobs that are inside its sensing range and not hidden behind a nearer
//! blob (64-sector angular occlusion), renders them into the ego's region of
//! interest and adds its own sensor noise. Both tensors share the ego grid, so
//! the collaborator's tensor is already cropped to the ego RoI.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kv::{self, KvError, KvWriter};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("grid {rows}x{cols} is not divisible by patch {patch_h}x{patch_w}")]
    PatchDivisibility { rows: usize, cols: usize, patch_h: usize, patch_w: usize },
    #[error("invalid generator parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: &'static str },
    #[error("channel projection output {c_out} must be in 1..={c_in}")]
    InvalidProjection { c_out: usize, c_in: usize },
    #[error("feature has {found} channels, projection expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("non-finite value in BEV feature")]
    NonFinite,
    #[error(transparent)]
    Config(#[from] KvError),
}

/// A bird's-eye-view feature grid: rows are longitudinal cells, columns are
/// lateral cells, the last axis holds feature channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature {
    pub data: Array3<f32>,
    /// World position (meters) of the corner of cell `(0, 0)`.
    pub roi_origin: [f64; 2],
    pub cell_size: f64,
    pub agent_pose: [f64; 3],
}

impl BevFeature {
    pub fn new(data: Array3<f32>, roi_origin: [f64; 2], cell_size: f64, agent_pose: [f64; 3]) -> Result<Self, SynthError> {
        if !(cell_size > 0.0) {
            return Err(SynthError::InvalidParameter { name: "cell_size", reason: "must be positive" });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SynthError::NonFinite);
        }
        Ok(BevFeature { data, roi_origin, cell_size, agent_pose })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// World coordinates of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.roi_origin[0] + (row as f64 + 0.5) * self.cell_size,
            self.roi_origin[1] + (col as f64 + 0.5) * self.cell_size,
        ]
    }

    pub fn same_grid(&self, other: &BevFeature) -> bool {
        self.data.dim() == other.data.dim() && self.roi_origin == other.roi_origin && self.cell_size == other.cell_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub center: [f64; 2],
    pub amplitude: f64,
    /// Unit-norm, non-negative channel response.
    pub channel_signature: Vec<f64>,
    pub radius: f64,
}

impl SceneObject {
    fn response(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        self.amplitude * (-(dx * dx + dy * dy) / (2.0 * self.radius * self.radius)).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub ego: BevFeature,
    pub co: BevFeature,
    /// Co-agent pose minus ego pose.
    pub delta: [f64; 3],
    pub objects: Vec<SceneObject>,
    pub vis_ego: Vec<bool>,
    pub vis_co: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Meters per cell.
    pub cell_size: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Blob radius range in meters.
    pub min_radius: f64,
    pub max_radius: f64,
    pub min_amplitude: f64,
    pub max_amplitude: f64,
    /// Sensing range of each agent, meters.
    pub range_limit: f64,
    pub occlusion: bool,
    pub sectors: usize,
    /// Std of the i.i.d. Gaussian sensor noise, in activation units.
    pub noise_std: f64,
    /// Radius of the disc the co-agent offset is drawn from, meters.
    pub delta_radius: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 44,
            width: 24,
            channels: 4,
            patch_h: 2,
            patch_w: 2,
            cell_size: 1.0,
            min_objects: 8,
            max_objects: 8,
            min_radius: 1.5,
            max_radius: 3.0,
            min_amplitude: 0.5,
            max_amplitude: 1.0,
            range_limit: 20.0,
            occlusion: true,
            sectors: 64,
            noise_std: 0.05,
            delta_radius: 20.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        use SynthError::InvalidParameter as Bad;
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Bad { name: "height/width/channels", reason: "must be positive" });
        }
        if self.patch_h == 0 || self.patch_w == 0 || self.height % self.patch_h != 0 || self.width % self.patch_w != 0 {
            return Err(SynthError::PatchDivisibility {
                rows: self.height,
                cols: self.width,
                patch_h: self.patch_h,
                patch_w: self.patch_w,
            });
        }
        if !(self.cell_size > 0.0) {
            return Err(Bad { name: "cell_size", reason: "must be positive" });
        }
        if self.min_objects > self.max_objects {
            return Err(Bad { name: "min_objects", reason: "exceeds max_objects" });
        }
        if !(self.min_radius >= self.cell_size) || self.max_radius < self.min_radius {
            return Err(Bad { name: "radius", reason: "need cell_size <= min_radius <= max_radius" });
        }
        if !(self.min_amplitude > 0.0) || self.max_amplitude < self.min_amplitude {
            return Err(Bad { name: "amplitude", reason: "need 0 < min_amplitude <= max_amplitude" });
        }
        if !(self.range_limit > 0.0) || !self.range_limit.is_finite() {
            return Err(Bad { name: "range_limit", reason: "must be positive" });
        }
        if self.sectors == 0 {
            return Err(Bad { name: "sectors", reason: "must be positive" });
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Bad { name: "noise_std", reason: "must be non-negative" });
        }
        if !(self.delta_radius >= 0.0) || !self.delta_radius.is_finite() {
            return Err(Bad { name: "delta_radius", reason: "must be non-negative" });
        }
        Ok(())
    }

    /// Applies one `key=value` entry; returns `false` for an unknown key.
    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<bool, KvError> {
        let v = value;
        match key {
            "height" => self.height = kv::parse_value(key, v)?,
            "width" => self.width = kv::parse_value(key, v)?,
            "channels" => self.channels = kv::parse_value(key, v)?,
            "patch_h" => self.patch_h = kv::parse_value(key, v)?,
            "patch_w" => self.patch_w = kv::parse_value(key, v)?,
            "cell_size" => self.cell_size = kv::parse_value(key, v)?,
            "min_objects" => self.min_objects = kv::parse_value(key, v)?,
            "max_objects" => self.max_objects = kv::parse_value(key, v)?,
            "min_radius" => self.min_radius = kv::parse_value(key, v)?,
            "max_radius" => self.max_radius = kv::parse_value(key, v)?,
            "min_amplitude" => self.min_amplitude = kv::parse_value(key, v)?,
            "max_amplitude" => self.max_amplitude = kv::parse_value(key, v)?,
            "range_limit" => self.range_limit = kv::parse_value(key, v)?,
            "occlusion" => self.occlusion = kv::parse_value(key, v)?,
            "sectors" => self.sectors = kv::parse_value(key, v)?,
            "noise_std" => self.noise_std = kv::parse_value(key, v)?,
            "delta_radius" => self.delta_radius = kv::parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub(crate) fn write_kv(&self, w: &mut KvWriter, prefix: &str) {
        let k = |name: &str| format!("{prefix}{name}");
        w.put(&k("height"), self.height)
            .put(&k("width"), self.width)
            .put(&k("channels"), self.channels)
            .put(&k("patch_h"), self.patch_h)
            .put(&k("patch_w"), self.patch_w)
            .put(&k("cell_size"), self.cell_size)
            .put(&k("min_objects"), self.min_objects)
            .put(&k("max_objects"), self.max_objects)
            .put(&k("min_radius"), self.min_radius)
            .put(&k("max_radius"), self.max_radius)
            .put(&k("min_amplitude"), self.min_amplitude)
            .put(&k("max_amplitude"), self.max_amplitude)
            .put(&k("range_limit"), self.range_limit)
            .put(&k("occlusion"), self.occlusion)
            .put(&k("sectors"), self.sectors)
            .put(&k("noise_std"), self.noise_std)
            .put(&k("delta_radius"), self.delta_radius);
    }

    /// Parses a generator config file; unspecified keys keep their defaults
    /// and unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<Self, SynthError> {
        let mut cfg = GeneratorConfig::default();
        for (key, value) in kv::parse_lines(text)? {
            if !cfg.set(&key, &value)? {
                return Err(KvError::UnknownKey(key).into());
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        self.write_kv(&mut w, "");
        w.finish()
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn sector_of(angle: f64, sectors: usize) -> usize {
    let frac = (angle + PI) / (2.0 * PI);
    ((frac * sectors as f64).floor() as usize) % sectors
}

/// Visibility of every object from `origin`: inside the range limit and, when
/// occlusion is on, with its center sector not already covered by a nearer
/// object.
pub fn visibility(objects: &[SceneObject], origin: [f64; 2], cfg: &GeneratorConfig) -> Vec<bool> {
    let dist: Vec<f64> = objects
        .iter()
        .map(|o| ((o.center[0] - origin[0]).powi(2) + (o.center[1] - origin[1]).powi(2)).sqrt())
        .collect();
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));

    let mut blocked = vec![false; cfg.sectors];
    let mut visible = vec![false; objects.len()];
    let sector_width = 2.0 * PI / cfg.sectors as f64;
    for &i in &order {
        let o = &objects[i];
        if dist[i] > cfg.range_limit {
            continue;
        }
        let angle = (o.center[1] - origin[1]).atan2(o.center[0] - origin[0]);
        let center_sector = sector_of(angle, cfg.sectors);
        visible[i] = !cfg.occlusion || !blocked[center_sector];
        if cfg.occlusion {
            if dist[i] <= o.radius {
                blocked.iter_mut().for_each(|b| *b = true);
            } else {
                let half = (o.radius / dist[i]).asin();
                let span = (half / sector_width).ceil() as isize;
                let lo = angle - half;
                let hi = angle + half;
                for k in -span - 1..=span + 1 {
                    let a = angle + k as f64 * sector_width;
                    let clamped = a.clamp(lo, hi);
                    blocked[sector_of(clamped, cfg.sectors)] = true;
                }
            }
        }
    }
    visible
}

fn render(
    objects: &[SceneObject],
    visible: &[bool],
    roi_origin: [f64; 2],
    cfg: &GeneratorConfig,
    noise: &mut ChaCha8Rng,
) -> Array3<f32> {
    let mut data = Array3::<f64>::zeros((cfg.height, cfg.width, cfg.channels));
    let seen: Vec<&SceneObject> = objects.iter().zip(visible).filter(|(_, &v)| v).map(|(o, _)| o).collect();
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let p = [
                roi_origin[0] + (r as f64 + 0.5) * cfg.cell_size,
                roi_origin[1] + (c as f64 + 0.5) * cfg.cell_size,
            ];
            for o in &seen {
                let resp = o.response(p);
                for (ch, s) in o.channel_signature.iter().enumerate() {
                    data[[r, c, ch]] += resp * s;
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let n = Normal::new(0.0, cfg.noise_std).expect("validated noise std");
        data.iter_mut().for_each(|v| *v += n.sample(noise));
    }
    data.mapv(|v| v as f32)
}

/// Generates one ego/co-agent pair. Pure in `(cfg, seed)`.
pub fn generate_scene_pair(cfg: &GeneratorConfig, seed: u64) -> Result<ScenePair, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = [cfg.height as f64 * cfg.cell_size, cfg.width as f64 * cfg.cell_size];

    let ego_pose = [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), 0.0];
    let roi_origin = [ego_pose[0] - extent[0] / 2.0, ego_pose[1] - extent[1] / 2.0];

    let rho = cfg.delta_radius * rng.random::<f64>().sqrt();
    let theta = rng.random_range(-PI..PI);
    let offset = [rho * theta.cos(), rho * theta.sin(), 0.0];
    let co_pose = [ego_pose[0] + offset[0], ego_pose[1] + offset[1], ego_pose[2] + offset[2]];
    // Recomputed from the poses so that it is their exact difference.
    let delta = [co_pose[0] - ego_pose[0], co_pose[1] - ego_pose[1], co_pose[2] - ego_pose[2]];

    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let objects: Vec<SceneObject> = (0..count)
        .map(|_| {
            let center = [
                roi_origin[0] + rng.random::<f64>() * extent[0],
                roi_origin[1] + rng.random::<f64>() * extent[1],
            ];
            let radius = rng.random_range(cfg.min_radius..=cfg.max_radius);
            let amplitude = rng.random_range(cfg.min_amplitude..=cfg.max_amplitude);
            let mut sig: Vec<f64> = (0..cfg.channels).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect();
            let norm = sig.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            sig.iter_mut().for_each(|x| *x /= norm);
            SceneObject { center, amplitude, channel_signature: sig, radius }
        })
        .collect();

    let vis_ego = visibility(&objects, [ego_pose[0], ego_pose[1]], cfg);
    let vis_co = visibility(&objects, [co_pose[0], co_pose[1]], cfg);

    // Noise streams are split off so that the co-agent's noise does not depend
    // on how many draws the ego render consumed.
    let mut ego_noise = ChaCha8Rng::seed_from_u64(rng.random());
    let mut co_noise = ChaCha8Rng::seed_from_u64(rng.random());
    let ego_data = render(&objects, &vis_ego, roi_origin, cfg, &mut ego_noise);
    let co_data = render(&objects, &vis_co, roi_origin, cfg, &mut co_noise);

    Ok(ScenePair {
        ego: BevFeature::new(ego_data, roi_origin, cfg.cell_size, ego_pose)?,
        co: BevFeature::new(co_data, roi_origin, cfg.cell_size, co_pose)?,
        delta,
        objects,
        vis_ego,
        vis_co,
    })
}

/// Per-scene seed derived from a base seed and scene index (SplitMix64).
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `count` pairs in parallel, scene `i` seeded by `scene_seed(base, i)`.
pub fn generate_dataset(cfg: &GeneratorConfig, base_seed: u64, count: usize) -> Result<Vec<ScenePair>, SynthError> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene_pair(cfg, scene_seed(base_seed, i as u64)))
        .collect()
}

/// Pointwise `C -> c_out` linear map applied to every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelProjection {
    /// `(c_in, c_out)`.
    pub weight: Array2<f32>,
}

impl ChannelProjection {
    pub fn identity(channels: usize) -> Self {
        ChannelProjection { weight: Array2::eye(channels) }
    }

    pub fn random<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Result<Self, SynthError> {
        if c_out == 0 || c_out > c_in {
            return Err(SynthError::InvalidProjection { c_out, c_in });
        }
        let scale = (1.0 / c_in as f64).sqrt();
        let weight = Array2::from_shape_fn((c_in, c_out), |_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32);
        Ok(ChannelProjection { weight })
    }
}

pub fn channel_compress(feature: &BevFeature, projection: &ChannelProjection) -> Result<BevFeature, SynthError> {
    let (h, w, c) = feature.shape();
    let (c_in, c_out) = projection.weight.dim();
    if c_out == 0 || c_out > c_in {
        return Err(SynthError::InvalidProjection { c_out, c_in });
    }
    if c != c_in {
        return Err(SynthError::ChannelMismatch { expected: c_in, found: c });
    }
    let flat = feature.data.view().into_shape_with_order((h * w, c)).expect("contiguous feature");
    let out = flat.dot(&projection.weight).into_shape_with_order((h, w, c_out)).expect("shape");
    BevFeature::new(out, feature.roi_origin, feature.cell_size, feature.agent_pose)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mse(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
        a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = GeneratorConfig::default();
        let a = generate_scene_pair(&cfg, 42).unwrap();
        let b = generate_scene_pair(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_scene_pair(&cfg, 43).unwrap();
        assert_ne!(a.ego.data, c.ego.data);
    }

    #[test]
    fn identical_viewpoint_gives_identical_features() {
        let cfg = GeneratorConfig { delta_radius: 0.0, occlusion: false, noise_std: 0.0, ..Default::default() };
        for seed in 0..5 {
            let p = generate_scene_pair(&cfg, seed).unwrap();
            assert_eq!(p.delta, [0.0, 0.0, 0.0]);
            assert_eq!(p.ego.data, p.co.data);
        }
    }

    #[test]
    fn pair_is_roi_aligned_and_delta_matches_poses() {
        let cfg = GeneratorConfig::default();
        for seed in 0..20 {
            let p = generate_scene_pair(&cfg, seed).unwrap();
            assert!(p.ego.same_grid(&p.co));
            for k in 0..3 {
                assert_eq!(p.delta[k], p.co.agent_pose[k] - p.ego.agent_pose[k]);
            }
            let r = (p.delta[0].powi(2) + p.delta[1].powi(2)).sqrt();
            assert!(r <= cfg.delta_radius + 1e-9);
            assert_eq!(p.delta[2], 0.0);
        }
    }

    #[test]
    fn objects_satisfy_invariants() {
        let cfg = GeneratorConfig::default();
        let p = generate_scene_pair(&cfg, 9).unwrap();
        assert_eq!(p.objects.len(), 8);
        for o in &p.objects {
            let n: f64 = o.channel_signature.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            assert!(o.channel_signature.iter().all(|&s| s >= 0.0));
            assert!(o.radius >= cfg.cell_size);
            assert!(o.amplitude > 0.0);
        }
    }

    #[test]
    fn visibility_asymmetry_exists() {
        let cfg = GeneratorConfig::default();
        let unique: usize = (0..100)
            .map(|s| {
                let p = generate_scene_pair(&cfg, s).unwrap();
                p.vis_ego.iter().zip(&p.vis_co).filter(|(a, b)| a != b).count()
            })
            .sum();
        assert!(unique > 0);
    }

    #[test]
    fn nearer_object_occludes_farther_one() {
        let cfg = GeneratorConfig { range_limit: 100.0, ..Default::default() };
        let obj = |x: f64| SceneObject { center: [x, 0.0], amplitude: 1.0, channel_signature: vec![1.0, 0.0, 0.0, 0.0], radius: 1.5 };
        let objects = vec![obj(10.0), obj(5.0), obj(-7.0)];
        assert_eq!(visibility(&objects, [0.0, 0.0], &cfg), vec![false, true, true]);
        let no_occ = GeneratorConfig { occlusion: false, ..cfg.clone() };
        assert_eq!(visibility(&objects, [0.0, 0.0], &no_occ), vec![true, true, true]);
        let short = GeneratorConfig { range_limit: 6.0, ..cfg };
        assert_eq!(visibility(&objects, [0.0, 0.0], &short), vec![false, true, false]);
    }

    /// Error restricted to the footprint of objects both agents see is lower
    /// than over the whole grid, which also carries agent-unique objects.
    #[test]
    fn mutually_visible_support_has_lower_error() {
        let cfg = GeneratorConfig::default();
        let (mut shared, mut full) = (0.0, 0.0);
        let mut n = 0;
        for seed in 0..100 {
            let p = generate_scene_pair(&cfg, seed).unwrap();
            full += mse(&p.ego.data, &p.co.data);
            let (h, w, c) = p.ego.shape();
            let (mut acc, mut cnt) = (0.0, 0usize);
            for r in 0..h {
                for col in 0..w {
                    let x = p.ego.cell_center(r, col);
                    let covered = p.objects.iter().enumerate().any(|(i, o)| {
                        p.vis_ego[i] && p.vis_co[i] && {
                            let d2 = (x[0] - o.center[0]).powi(2) + (x[1] - o.center[1]).powi(2);
                            d2 <= (2.0 * o.radius).powi(2)
                        }
                    });
                    if covered {
                        for ch in 0..c {
                            acc += ((p.ego.data[[r, col, ch]] - p.co.data[[r, col, ch]]) as f64).powi(2);
                            cnt += 1;
                        }
                    }
                }
            }
            if cnt > 0 {
                shared += acc / cnt as f64;
                n += 1;
            }
        }
        let shared = shared / n as f64;
        let full = full / 100.0;
        assert!(shared < full, "shared-support MSE {shared} vs full {full}");
    }

    #[test]
    fn rejects_bad_configs() {
        let bad_patch = GeneratorConfig { height: 43, ..Default::default() };
        assert!(matches!(generate_scene_pair(&bad_patch, 0), Err(SynthError::PatchDivisibility { .. })));
        let bad_noise = GeneratorConfig { noise_std: -0.1, ..Default::default() };
        assert!(generate_scene_pair(&bad_noise, 0).is_err());
        let bad_range = GeneratorConfig { range_limit: 0.0, ..Default::default() };
        assert!(generate_scene_pair(&bad_range, 0).is_err());
    }

    #[test]
    fn config_text_roundtrip_and_unknown_key() {
        let cfg = GeneratorConfig { noise_std: 0.1, occlusion: false, ..Default::default() };
        assert_eq!(GeneratorConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(matches!(
            GeneratorConfig::from_kv("height=44\nbogus=1\n"),
            Err(SynthError::Config(KvError::UnknownKey(_)))
        ));
        assert_ne!(cfg.hash(), GeneratorConfig::default().hash());
    }

    #[test]
    fn channel_compress_identity_and_reduction() {
        let p = generate_scene_pair(&GeneratorConfig::default(), 1).unwrap();
        let same = channel_compress(&p.ego, &ChannelProjection::identity(4)).unwrap();
        assert_eq!(same, p.ego);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wide = BevFeature::new(
            Array3::from_shape_fn((352, 96, 256), |(a, b, c)| ((a + 3 * b + 7 * c) % 17) as f32 * 0.1),
            [0.0, 0.0],
            0.4,
            [0.0; 3],
        )
        .unwrap();
        let proj = ChannelProjection::random(256, 4, &mut rng).unwrap();
        let narrow = channel_compress(&wide, &proj).unwrap();
        assert_eq!(narrow.shape(), (352, 96, 4));
        assert_eq!(wide.data.len() / narrow.data.len(), 64);
        assert!(narrow.data.iter().all(|v| v.is_finite()));

        assert!(ChannelProjection::random(4, 0, &mut rng).is_err());
        assert!(ChannelProjection::random(4, 5, &mut rng).is_err());
        assert!(matches!(channel_compress(&p.ego, &proj), Err(SynthError::ChannelMismatch { .. })));
    }
}
