//! Reconstruction-quality evaluation over held-out pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Array3;
use rayon::prelude::*;
use thiserror::Error;

use crate::recon::{self, Codec, ReconError, ReconOptions};
use crate::synth::{generate_dataset, GeneratorConfig, ScenePair, SynthError};
use crate::wire::{self, WireError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no checkpoint for semantic length {0}")]
    MissingCheckpoint(usize),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("malformed grid csv at {0:?}")]
    Csv(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const CSV_HEADER: &str = "semantic_len,rate_kibps,steps,mse,ms_per_recon,ego_copy_mse,eval_pairs";

/// Mean over all elements of the squared difference.
pub fn mse(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "mse of mismatched grids");
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    sum / a.len() as f64
}

/// Error of using the ego feature itself as the co-agent estimate.
pub fn ego_copy_mse(pairs: &[ScenePair]) -> f64 {
    pairs.iter().map(|p| mse(&p.ego.data, &p.co.data)).sum::<f64>() / pairs.len() as f64
}

pub fn held_out_pairs(gen: &GeneratorConfig, seed: u64, count: usize) -> Result<Vec<ScenePair>, EvalError> {
    Ok(generate_dataset(gen, seed, count)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseStats {
    pub per_pair: Vec<f64>,
    /// Mean wall-clock per reconstruction, milliseconds.
    pub ms_per_recon: f64,
}

impl MseStats {
    pub fn mean(&self) -> f64 {
        self.per_pair.iter().sum::<f64>() / self.per_pair.len() as f64
    }
}

/// Reconstruction seed of pair `i`; shared by every evaluation so that
/// different step counts and lengths start from the same `x_T`.
pub fn pair_seed(base: u64, i: usize) -> u64 {
    crate::synth::scene_seed(base ^ 0x5eed_0f_7ec0, i as u64)
}

/// Transmit-then-reconstruct MSE for every pair.
pub fn eval_mse(codec: &Codec, pairs: &[ScenePair], steps: usize, clip: f64, seed: u64) -> Result<MseStats, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let results = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let bytes = recon::transmit(codec, &p.co, p.delta, None)?;
            let opts = ReconOptions::new(steps, pair_seed(seed, i)).with_clip(clip);
            let start = Instant::now();
            let out = recon::reconstruct(codec, &p.ego, &bytes, &opts)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            Ok((mse(&out.data, &p.co.data), ms))
        })
        .collect::<Result<Vec<(f64, f64)>, EvalError>>()?;
    let ms = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    let per_pair = results.into_iter().map(|r| r.0).collect();
    Ok(MseStats { per_pair, ms_per_recon: ms })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub semantic_len: usize,
    pub steps: usize,
    pub mse: f64,
    pub ms_per_recon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    /// Kibps of the semantic section per length.
    pub rates: BTreeMap<usize, f64>,
    pub eval_pairs: usize,
    pub ego_copy_mse: f64,
}

impl GridReport {
    pub fn get(&self, semantic_len: usize, steps: usize) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.semantic_len == semantic_len && c.steps == steps)
    }

    /// Lowest MSE over step counts for one length.
    pub fn best(&self, semantic_len: usize) -> Option<&GridCell> {
        self.cells
            .iter()
            .filter(|c| c.semantic_len == semantic_len)
            .min_by(|a, b| a.mse.total_cmp(&b.mse))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            let rate = self.rates[&c.semantic_len];
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.3},{:.6},{}",
                c.semantic_len, rate, c.steps, c.mse, c.ms_per_recon, self.ego_copy_mse, self.eval_pairs
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let bad = |line: &str| EvalError::Csv(line.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(bad("header"));
        }
        let mut report = GridReport { cells: Vec::new(), rates: BTreeMap::new(), eval_pairs: 0, ego_copy_mse: 0.0 };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(line));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
            let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad(line));
            let cell = GridCell { semantic_len: int(0)?, steps: int(2)?, mse: num(3)?, ms_per_recon: num(4)? };
            report.rates.insert(cell.semantic_len, num(1)?);
            report.ego_copy_mse = num(5)?;
            report.eval_pairs = int(6)?;
            report.cells.push(cell);
        }
        Ok(report)
    }

    /// Rate-vs-MSE curves, one per step count.
    pub fn plot_svg(&self, path: &Path) -> Result<(), EvalError> {
        use plotters::prelude::*;
        let err = |e: &dyn std::fmt::Display| EvalError::Plot(e.to_string());
        let rates: Vec<f64> = self.rates.values().copied().collect();
        let (rmin, rmax) = rates.iter().fold((f64::MAX, f64::MIN), |(a, b), &r| (a.min(r), b.max(r)));
        let mmax = self.cells.iter().map(|c| c.mse).fold(0.0, f64::max).max(self.ego_copy_mse) * 1.1;
        let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption("reconstruction MSE vs data rate", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d((rmin * 0.8..rmax * 1.25).log_scale(), 0.0..mmax.max(1e-6))
            .map_err(|e| err(&e))?;
        chart
            .configure_mesh()
            .x_desc("data rate (Kibps)")
            .y_desc("MSE")
            .draw()
            .map_err(|e| err(&e))?;
        let mut steps: Vec<usize> = self.cells.iter().map(|c| c.steps).collect();
        steps.sort_unstable();
        steps.dedup();
        for (i, s) in steps.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let pts: Vec<(f64, f64)> = self
                .cells
                .iter()
                .filter(|c| c.steps == *s)
                .map(|c| (self.rates[&c.semantic_len], c.mse))
                .collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(|e| err(&e))?
                .label(format!("{s} steps"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled()))).map_err(|e| err(&e))?;
        }
        let ego = self.ego_copy_mse;
        chart
            .draw_series(LineSeries::new(vec![(rmin * 0.8, ego), (rmax * 1.25, ego)], BLACK.stroke_width(1)))
            .map_err(|e| err(&e))?
            .label("ego copy")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLACK));
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(|e| err(&e))?;
        root.present().map_err(|e| err(&e))?;
        Ok(())
    }
}

/// Line plot of named `(x, y)` series with a logarithmic y axis.
pub fn plot_curves(path: &Path, title: &str, x_desc: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<(), EvalError> {
    use plotters::prelude::*;
    let err = |e: &dyn std::fmt::Display| EvalError::Plot(e.to_string());
    let pts = series.iter().flat_map(|s| s.1.iter()).filter(|p| p.1 > 0.0 && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 1e-3, 1.0);
    }
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1.max(x0 + 1.0), (y0 * 0.8..y1 * 1.25).log_scale())
        .map_err(|e| err(&e))?;
    chart.configure_mesh().x_desc(x_desc).draw().map_err(|e| err(&e))?;
    for (i, (name, data)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let data: Vec<(f64, f64)> = data.iter().copied().filter(|p| p.1 > 0.0 && p.1.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(data, color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// Fills the `(L × steps)` MSE matrix using one codec per length.
pub fn eval_grid(
    codecs: &BTreeMap<usize, Codec>,
    semantic_lens: &[usize],
    steps_list: &[usize],
    pairs: &[ScenePair],
    hz: f64,
    clip: f64,
    seed: u64,
) -> Result<GridReport, EvalError> {
    let mut cells = Vec::new();
    let mut rates = BTreeMap::new();
    for &l in semantic_lens {
        let codec = codecs.get(&l).ok_or(EvalError::MissingCheckpoint(l))?;
        // Rate of the section actually produced by this codec.
        let sample = pairs.first().ok_or(EvalError::EmptyEvalSet)?;
        let bytes = recon::transmit(codec, &sample.co, sample.delta, None)?;
        let sem_bytes = bytes.len() - wire::HEADER_LEN - wire::DELTA_LEN;
        rates.insert(l, wire::compute_rate(sem_bytes, hz)?);
        for &s in steps_list {
            let stats = eval_mse(codec, pairs, s, clip, seed)?;
            cells.push(GridCell { semantic_len: l, steps: s, mse: stats.mean(), ms_per_recon: stats.ms_per_recon });
        }
    }
    Ok(GridReport { cells, rates, eval_pairs: pairs.len(), ego_copy_mse: ego_copy_mse(pairs) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Denoiser, DenoiserConfig};
    use crate::diffusion::ScheduleConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn codec(l: usize) -> (Codec, GeneratorConfig) {
        let gen = GeneratorConfig { height: 8, width: 8, channels: 2, ..Default::default() };
        let cfg = DenoiserConfig {
            height: 8,
            width: 8,
            channels: 2,
            hidden_dim: 8,
            depth: 1,
            heads: 2,
            freq_dim: 4,
            semantic_len: l,
            code_dim: 8,
            se_channels: [2, 2, 2],
            ..Default::default()
        };
        let model = Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(l as u64)).unwrap();
        (Codec::new(model, ScheduleConfig::default().build().unwrap()), gen)
    }

    #[test]
    fn mse_basics() {
        let a = Array3::from_elem((2, 2, 1), 1.0f32);
        let b = Array3::from_elem((2, 2, 1), 3.0f32);
        assert_eq!(mse(&a, &b), 4.0);
        assert_eq!(mse(&a, &a), 0.0);
    }

    #[test]
    fn single_cell_grid_equals_direct_loop() {
        let (c, gen) = codec(8);
        let pairs = held_out_pairs(&gen, 3, 4).unwrap();
        let grid = eval_grid(&BTreeMap::from([(8, c.clone())]), &[8], &[3], &pairs, 10.0, 0.0, 7).unwrap();
        assert_eq!(grid.cells.len(), 1);
        let mut direct = 0.0;
        for (i, p) in pairs.iter().enumerate() {
            let bytes = recon::transmit(&c, &p.co, p.delta, None).unwrap();
            let out = recon::reconstruct(&c, &p.ego, &bytes, &ReconOptions::new(3, pair_seed(7, i))).unwrap();
            direct += mse(&out.data, &p.co.data);
        }
        assert_eq!(grid.cells[0].mse, direct / 4.0);
        assert_eq!(grid.rates[&8], wire::compute_rate(16, 10.0).unwrap());
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let (c, gen) = codec(8);
        let pairs = held_out_pairs(&gen, 3, 1).unwrap();
        let err = eval_grid(&BTreeMap::from([(8, c)]), &[8, 4], &[2], &pairs, 10.0, 0.0, 0).unwrap_err();
        assert!(matches!(err, EvalError::MissingCheckpoint(4)));
    }

    #[test]
    fn csv_and_plot_are_written() {
        let (c8, gen) = codec(8);
        let (c4, _) = codec(4);
        let pairs = held_out_pairs(&gen, 3, 2).unwrap();
        let grid = eval_grid(&BTreeMap::from([(8, c8), (4, c4)]), &[8, 4], &[2, 3], &pairs, 10.0, 0.0, 0).unwrap();
        let csv = grid.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("semantic_len,rate_kibps,steps,mse,ms_per_recon,ego_copy_mse,eval_pairs\n8,1.25,2,"));
        let back = GridReport::from_csv(&csv).unwrap();
        assert_eq!(back.rates, grid.rates);
        assert_eq!(back.cells.len(), 4);
        assert!(GridReport::from_csv("nope").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.svg");
        grid.plot_svg(&path).unwrap();
        let svg = std::fs::read_to_string(path).unwrap();
        assert!(svg.contains("<svg") && svg.contains("2 steps"));
    }
}
