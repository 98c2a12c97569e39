//! Toy collaborative detection: fuse the ego feature with a co-agent
//! estimate by elementwise maximum, detect blob peaks, match them to object
//! centers.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::recon::{self, Codec, ReconError, ReconOptions};
use crate::synth::{BevFeature, ScenePair};
use crate::wire::{self, CollabPayload, WireError};

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("unknown regime {0:?}")]
    UnknownRegime(String),
    #[error("regime {0} needs a payload")]
    MissingPayload(Regime),
    #[error("regime {0} needs the true co-agent feature")]
    MissingOracle(Regime),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    NoCollab,
    Recon,
    ReconTopK,
    TopKOnly,
    Oracle,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::NoCollab, Regime::Recon, Regime::ReconTopK, Regime::TopKOnly, Regime::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Regime::NoCollab => "no-collab",
            Regime::Recon => "recon",
            Regime::ReconTopK => "recon+topk",
            Regime::TopKOnly => "topk-only",
            Regime::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = DownstreamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| DownstreamError::UnknownRegime(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 { 1.0 } else { self.tp as f64 / (self.tp + self.fp) as f64 }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 { 1.0 } else { self.tp as f64 / (self.tp + self.fn_) as f64 }
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 { 1.0 } else { 2.0 * self.tp as f64 / denom as f64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub threshold: f64,
    /// Meters.
    pub match_radius: f64,
}

/// Euclidean norm over channels at every cell.
pub fn channel_norm(f: &Array3<f32>) -> Array2<f64> {
    f.map_axis(Axis(2), |c| c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
}

/// Cells that are 8-neighbourhood maxima of the norm map and exceed the
/// threshold; plateaus keep their first cell in raster order.
pub fn detect(f: &Array3<f32>, threshold: f64) -> Vec<(usize, usize)> {
    let n = channel_norm(f);
    let (h, w) = n.dim();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = n[[r, c]];
            if v <= threshold {
                continue;
            }
            let mut peak = true;
            'nb: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let u = n[[rr as usize, cc as usize]];
                    let earlier = (dr, dc) < (0, 0);
                    if u > v || (u == v && earlier) {
                        peak = false;
                        break 'nb;
                    }
                }
            }
            if peak {
                out.push((r, c));
            }
        }
    }
    out
}

/// Greedy nearest-first one-to-one matching within `radius`.
pub fn match_detections(dets: &[[f64; 2]], truth: &[[f64; 2]], radius: f64) -> Counts {
    let mut cand = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let dist = ((d[0] - t[0]).powi(2) + (d[1] - t[1]).powi(2)).sqrt();
            if dist <= radius {
                cand.push((dist, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let (mut used_d, mut used_t) = (vec![false; dets.len()], vec![false; truth.len()]);
    let mut tp = 0;
    for (_, i, j) in cand {
        if !used_d[i] && !used_t[j] {
            used_d[i] = true;
            used_t[j] = true;
            tp += 1;
        }
    }
    Counts { tp, fp: dets.len() - tp, fn_: truth.len() - tp }
}

/// Centers of objects seen by either agent that fall inside the ego RoI.
pub fn ground_truth(pair: &ScenePair) -> Vec<[f64; 2]> {
    let (h, w, _) = pair.ego.shape();
    let o = pair.ego.roi_origin;
    let extent = [h as f64 * pair.ego.cell_size, w as f64 * pair.ego.cell_size];
    pair.objects
        .iter()
        .enumerate()
        .filter(|(i, _)| pair.vis_ego[*i] || pair.vis_co[*i])
        .map(|(_, obj)| obj.center)
        .filter(|c| (0.0..extent[0]).contains(&(c[0] - o[0])) && (0.0..extent[1]).contains(&(c[1] - o[1])))
        .collect()
}

pub fn fuse_max(a: &Array3<f32>, b: &Array3<f32>) -> Array3<f32> {
    let mut out = a.clone();
    Zip::from(&mut out).and(b).for_each(|o, &v| *o = o.max(v));
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownstreamOptions {
    pub detector: DetectorConfig,
    pub topk: usize,
    pub steps: usize,
    pub clip: f64,
    pub seed: u64,
}

/// Fused feature for one regime. Only the regimes that need them look at
/// `payload` and `oracle`.
pub fn regime_feature(
    regime: Regime,
    codec: &Codec,
    ego: &BevFeature,
    payload: Option<&[u8]>,
    oracle: Option<&BevFeature>,
    opts: &ReconOptions,
) -> Result<Array3<f32>, DownstreamError> {
    let need = || payload.ok_or(DownstreamError::MissingPayload(regime));
    let co = match regime {
        Regime::NoCollab => return Ok(ego.data.clone()),
        Regime::Recon | Regime::ReconTopK => recon::reconstruct(codec, ego, need()?, opts)?.data,
        Regime::TopKOnly => {
            let p = CollabPayload::decode(need()?)?;
            let set = p.topk.ok_or(DownstreamError::MissingPayload(regime))?;
            wire::apply_topk(&Array3::zeros(ego.data.raw_dim()), &set)?
        }
        Regime::Oracle => oracle.ok_or(DownstreamError::MissingOracle(regime))?.data.clone(),
    };
    Ok(fuse_max(&ego.data, &co))
}

pub fn score(fused: &Array3<f32>, grid: &BevFeature, truth: &[[f64; 2]], det: &DetectorConfig) -> Counts {
    let dets: Vec<[f64; 2]> = detect(fused, det.threshold).into_iter().map(|(r, c)| grid.cell_center(r, c)).collect();
    match_detections(&dets, truth, det.match_radius)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeResult {
    pub regime: Regime,
    pub total: Counts,
    pub per_scene: Vec<Counts>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamReport {
    pub results: Vec<RegimeResult>,
    pub scenes: usize,
}

impl DownstreamReport {
    pub fn get(&self, r: Regime) -> Option<&RegimeResult> {
        self.results.iter().find(|x| x.regime == r)
    }

    pub fn f1(&self, r: Regime) -> Option<f64> {
        self.get(r).map(|x| x.total.f1())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("regime,tp,fp,fn,precision,recall,f1\n");
        for r in &self.results {
            let c = r.total;
            out += &format!("{},{},{},{},{:.4},{:.4},{:.4}\n", r.regime, c.tp, c.fp, c.fn_, c.precision(), c.recall(), c.f1());
        }
        out
    }

    /// 95% percentile-bootstrap interval of `F1(a) − F1(b)` over scenes.
    pub fn bootstrap_f1_gap(&self, a: Regime, b: Regime, resamples: usize, seed: u64) -> Option<(f64, f64)> {
        let (ra, rb) = (self.get(a)?, self.get(b)?);
        let n = ra.per_scene.len();
        if n == 0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaps: Vec<f64> = (0..resamples)
            .map(|_| {
                let (mut ca, mut cb) = (Counts::default(), Counts::default());
                for _ in 0..n {
                    let i = rng.random_range(0..n);
                    ca.add(&ra.per_scene[i]);
                    cb.add(&rb.per_scene[i]);
                }
                ca.f1() - cb.f1()
            })
            .collect();
        gaps.sort_by(f64::total_cmp);
        let lo = gaps[((resamples as f64) * 0.025).floor() as usize];
        let hi = gaps[(((resamples as f64) * 0.975).ceil() as usize).min(resamples - 1)];
        Some((lo, hi))
    }
}

pub fn eval_downstream(
    codec: &Codec,
    pairs: &[ScenePair],
    regimes: &[Regime],
    opts: &DownstreamOptions,
) -> Result<DownstreamReport, DownstreamError> {
    let per_scene: Vec<Vec<Counts>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let truth = ground_truth(pair);
            let plain = recon::transmit(codec, &pair.co, pair.delta, None)?;
            let with_topk = recon::transmit(codec, &pair.co, pair.delta, Some(opts.topk))?;
            let ro = ReconOptions::new(opts.steps, crate::eval::pair_seed(opts.seed, i)).with_clip(opts.clip);
            regimes
                .iter()
                .map(|&r| {
                    let payload = match r {
                        Regime::Recon => Some(plain.as_slice()),
                        Regime::ReconTopK | Regime::TopKOnly => Some(with_topk.as_slice()),
                        Regime::NoCollab | Regime::Oracle => None,
                    };
                    let oracle = (r == Regime::Oracle).then_some(&pair.co);
                    let fused = regime_feature(r, codec, &pair.ego, payload, oracle, &ro)?;
                    Ok(score(&fused, &pair.ego, &truth, &opts.detector))
                })
                .collect()
        })
        .collect::<Result<_, DownstreamError>>()?;

    let results = regimes
        .iter()
        .enumerate()
        .map(|(k, &regime)| {
            let scenes: Vec<Counts> = per_scene.iter().map(|s| s[k]).collect();
            let mut total = Counts::default();
            scenes.iter().for_each(|c| total.add(c));
            RegimeResult { regime, total, per_scene: scenes }
        })
        .collect();
    Ok(DownstreamReport { results, scenes: pairs.len() })
}
