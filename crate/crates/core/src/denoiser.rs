//! Conditional diffusion transformer that reconstructs the co-agent feature.
//!
//! The ego feature and the noised co-agent feature are stacked along the
//! channel axis, cut into non-overlapping patches and embedded as tokens with
//! fixed 2-D sin/cos positions. A single condition vector
//!
//! ```text
//! c = t_embed(t) + geometry(Δ) + proj_co(expand(v_co)) + proj_ego(expand(v_ego))
//! ```
//!
//! drives adaLN-Zero modulation in every block. The semantic extractor that
//! produces `v` is one shared parameter set for both agents; its bottleneck
//! and expansion adapters are the only layers that depend on the semantic
//! length `L`.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use thiserror::Error;

use crate::diffusion::{self, DenoiserOutput, DiffusionError, LossTerms, NoisePredictor, NoiseSchedule};
use crate::kv::{self, KvError, KvWriter};
use crate::nn::{
    conv_out_len, gelu, gelu_backward, join, layer_norm, layer_norm_backward, modulate, modulate_backward, sigmoid,
    silu, silu_backward, Attention, AttentionCache, Conv3x3s2, ConvCache, Float, Linear, Module, ParamSlot,
};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid denoiser config: {0}")]
    InvalidConfig(String),
    #[error("input shape {found:?} does not match configured {expected:?}")]
    ShapeMismatch { expected: (usize, usize, usize), found: (usize, usize, usize) },
    #[error("semantic vector has length {found}, expected {expected}")]
    SemanticLength { expected: usize, found: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("distillation target length {new_len} exceeds source length {source_len}")]
    DistillLength { new_len: usize, source_len: usize },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Config(#[from] KvError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    /// Feature channels `C` of one agent; the network sees `2C`.
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    /// Transmitted semantic vector length `L`.
    pub semantic_len: usize,
    /// Fixed width of the semantic code on either side of the bottleneck.
    pub code_dim: usize,
    pub se_channels: [usize; 3],
    pub use_ego_semantic: bool,
    /// Meters per unit of geometry-embedder input.
    pub geometry_scale: f64,
    /// Features are divided by this before entering the network.
    pub feature_scale: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            height: 44,
            width: 24,
            channels: 4,
            patch_h: 2,
            patch_w: 2,
            hidden_dim: 128,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            freq_dim: 64,
            semantic_len: 512,
            code_dim: 512,
            se_channels: [16, 32, 32],
            use_ego_semantic: true,
            geometry_scale: 10.0,
            feature_scale: 1.0,
        }
    }
}

impl DenoiserConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.channels
    }

    pub fn output_channels(&self) -> usize {
        2 * self.channels
    }

    pub fn grid_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn token_grid(&self) -> (usize, usize) {
        (self.height / self.patch_h, self.width / self.patch_w)
    }

    pub fn num_tokens(&self) -> usize {
        let (r, c) = self.token_grid();
        r * c
    }

    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w * self.input_channels()
    }

    pub fn se_flat_len(&self) -> usize {
        let h = conv_out_len(conv_out_len(conv_out_len(self.height)));
        let w = conv_out_len(conv_out_len(conv_out_len(self.width)));
        h * w * self.se_channels[2]
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |m: &str| Err(DenoiserError::InvalidConfig(m.to_string()));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("grid dimensions must be positive");
        }
        if self.patch_h == 0 || self.patch_w == 0 || self.height % self.patch_h != 0 || self.width % self.patch_w != 0 {
            return bad("grid must be divisible by the patch size");
        }
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad("hidden_dim must be a positive multiple of heads");
        }
        if self.hidden_dim % 4 != 0 {
            return bad("hidden_dim must be divisible by 4 for 2-D sin/cos positions");
        }
        if self.freq_dim == 0 || self.freq_dim % 2 != 0 {
            return bad("freq_dim must be even");
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.semantic_len == 0 || self.code_dim == 0 {
            return bad("depth, mlp_ratio, semantic_len and code_dim must be positive");
        }
        if self.se_channels.contains(&0) {
            return bad("se_channels must be positive");
        }
        if !(self.geometry_scale > 0.0) || !(self.feature_scale > 0.0) {
            return bad("geometry_scale and feature_scale must be positive");
        }
        Ok(())
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<bool, KvError> {
        let v = value;
        match key {
            "height" => self.height = kv::parse_value(key, v)?,
            "width" => self.width = kv::parse_value(key, v)?,
            "channels" => self.channels = kv::parse_value(key, v)?,
            "patch_h" => self.patch_h = kv::parse_value(key, v)?,
            "patch_w" => self.patch_w = kv::parse_value(key, v)?,
            "hidden_dim" => self.hidden_dim = kv::parse_value(key, v)?,
            "depth" => self.depth = kv::parse_value(key, v)?,
            "heads" => self.heads = kv::parse_value(key, v)?,
            "mlp_ratio" => self.mlp_ratio = kv::parse_value(key, v)?,
            "freq_dim" => self.freq_dim = kv::parse_value(key, v)?,
            "semantic_len" => self.semantic_len = kv::parse_value(key, v)?,
            "code_dim" => self.code_dim = kv::parse_value(key, v)?,
            "se_channels" => {
                let list: Vec<usize> = kv::parse_list(key, v)?;
                self.se_channels = list
                    .try_into()
                    .map_err(|_| KvError::InvalidValue { key: key.to_string(), value: v.to_string() })?;
            }
            "use_ego_semantic" => self.use_ego_semantic = kv::parse_value(key, v)?,
            "geometry_scale" => self.geometry_scale = kv::parse_value(key, v)?,
            "feature_scale" => self.feature_scale = kv::parse_value(key, v)?,
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
            .put(&k("hidden_dim"), self.hidden_dim)
            .put(&k("depth"), self.depth)
            .put(&k("heads"), self.heads)
            .put(&k("mlp_ratio"), self.mlp_ratio)
            .put(&k("freq_dim"), self.freq_dim)
            .put(&k("semantic_len"), self.semantic_len)
            .put(&k("code_dim"), self.code_dim)
            .put(&k("se_channels"), kv::join_list(&self.se_channels))
            .put(&k("use_ego_semantic"), self.use_ego_semantic)
            .put(&k("geometry_scale"), self.geometry_scale)
            .put(&k("feature_scale"), self.feature_scale);
    }
}

/// 1-D sin/cos embedding of `positions` into `dim` features.
fn sincos_1d(dim: usize, positions: &[f64]) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((positions.len(), dim));
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
            out[[r, i]] = (p * omega).sin();
            out[[r, half + i]] = (p * omega).cos();
        }
    }
    out
}

/// Fixed 2-D positional table, one row per token in row-major grid order:
/// the first half of the features encodes the token row, the second half
/// the token column.
pub fn sincos_2d(dim: usize, rows: usize, cols: usize) -> Array2<f64> {
    let row_pos: Vec<f64> = (0..rows * cols).map(|k| (k / cols) as f64).collect();
    let col_pos: Vec<f64> = (0..rows * cols).map(|k| (k % cols) as f64).collect();
    let a = sincos_1d(dim / 2, &row_pos);
    let b = sincos_1d(dim / 2, &col_pos);
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching rows")
}

/// Sinusoidal timestep features `[cos(t·f_i), sin(t·f_i)]`.
pub fn timestep_features(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

/// Cuts an `H×W×K` grid into `(H/ph · W/pw)` rows of `ph·pw·K` values.
pub fn patchify<F: Float>(x: &Array3<F>, ph: usize, pw: usize) -> Array2<F> {
    let (h, w, k) = x.dim();
    let (gr, gc) = (h / ph, w / pw);
    let mut out = Array2::zeros((gr * gc, ph * pw * k));
    for tr in 0..gr {
        for tc in 0..gc {
            let mut row = out.row_mut(tr * gc + tc);
            for i in 0..ph {
                for j in 0..pw {
                    let off = (i * pw + j) * k;
                    row.slice_mut(s![off..off + k]).assign(&x.slice(s![tr * ph + i, tc * pw + j, ..]));
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify<F: Float>(p: &Array2<F>, h: usize, w: usize, ph: usize, pw: usize) -> Array3<F> {
    let k = p.ncols() / (ph * pw);
    let gc = w / pw;
    let mut out = Array3::zeros((h, w, k));
    for (token, row) in p.rows().into_iter().enumerate() {
        let (tr, tc) = (token / gc, token % gc);
        for i in 0..ph {
            for j in 0..pw {
                let off = (i * pw + j) * k;
                out.slice_mut(s![tr * ph + i, tc * pw + j, ..]).assign(&row.slice(s![off..off + k]));
            }
        }
    }
    out
}

fn row_vec<F: Float>(v: &Array1<F>) -> Array2<F> {
    v.view().insert_axis(Axis(0)).to_owned()
}

fn cast_arr2<F: Float>(a: &Array2<f64>) -> Array2<F> {
    a.mapv(F::from_f64c)
}

/// Two-layer MLP `in -> d -> d` with SiLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct Mlp2Trace<F> {
    x: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

impl<F: Float> Mlp2<F> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Mlp2 { fc1: Linear::new(input, hidden, rng), fc2: Linear::new(hidden, output, rng) }
    }

    pub fn forward(&self, x: Array2<F>) -> (Array2<F>, Mlp2Trace<F>) {
        let pre = self.fc1.forward(&x.view());
        let act = silu(&pre);
        let y = self.fc2.forward(&act.view());
        (y, Mlp2Trace { x, pre, act })
    }

    pub fn backward(&mut self, tr: &Mlp2Trace<F>, dy: &Array2<F>) -> Array2<F> {
        let dact = self.fc2.backward(&tr.act.view(), dy);
        let dpre = silu_backward(&tr.pre, &dact);
        self.fc1.backward(&tr.x.view(), &dpre)
    }
}

impl<F: Float> Module<F> for Mlp2<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Shared-weight semantic extractor with a resizable bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticExtractor<F> {
    pub conv1: Conv3x3s2<F>,
    pub conv2: Conv3x3s2<F>,
    pub conv3: Conv3x3s2<F>,
    pub head: Mlp2<F>,
    /// `code_dim -> L`; its output is what goes on the wire.
    pub bottleneck: Linear<F>,
    /// `L -> code_dim`, applied at the receiver.
    pub expansion: Linear<F>,
}

pub struct SemanticTrace<F> {
    convs: [(ConvCache<F>, Array2<F>); 3],
    head: Mlp2Trace<F>,
    code: Array2<F>,
}

impl<F: Float> SemanticExtractor<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let [c1, c2, c3] = cfg.se_channels;
        SemanticExtractor {
            conv1: Conv3x3s2::new(cfg.channels, c1, rng),
            conv2: Conv3x3s2::new(c1, c2, rng),
            conv3: Conv3x3s2::new(c2, c3, rng),
            head: Mlp2::new(cfg.se_flat_len(), cfg.code_dim, cfg.code_dim, rng),
            bottleneck: Linear::new(cfg.code_dim, cfg.semantic_len, rng),
            expansion: Linear::new(cfg.semantic_len, cfg.code_dim, rng),
        }
    }

    pub fn semantic_len(&self) -> usize {
        self.bottleneck.out_dim()
    }

    /// Code before the bottleneck, shape `1 × code_dim`.
    pub fn encode(&self, x: &Array3<F>) -> (Array2<F>, SemanticTrace<F>) {
        let (h, w, c) = x.dim();
        let mut a = x.to_owned().into_shape_with_order((h * w, c)).expect("contiguous");
        let (mut hh, mut ww) = (h, w);
        let mut stages = Vec::with_capacity(3);
        for conv in [&self.conv1, &self.conv2, &self.conv3] {
            let (pre, cache) = conv.forward(&a, hh, ww);
            a = silu(&pre);
            hh = conv_out_len(hh);
            ww = conv_out_len(ww);
            stages.push((cache, pre));
        }
        let flat_len = a.len();
        let flat = a.into_shape_with_order((1, flat_len)).expect("contiguous");
        let (code, head) = self.head.forward(flat);
        let convs: [(ConvCache<F>, Array2<F>); 3] = stages.try_into().ok().expect("three stages");
        (code.clone(), SemanticTrace { convs, head, code })
    }

    /// Semantic vector `v` of length `L`.
    pub fn extract(&self, x: &Array3<F>) -> (Array1<F>, SemanticTrace<F>) {
        let (code, trace) = self.encode(x);
        let v = self.bottleneck.forward(&code.view());
        (v.row(0).to_owned(), trace)
    }

    pub fn backward(&mut self, tr: &SemanticTrace<F>, dv: &Array1<F>) {
        let dcode = self.bottleneck.backward(&tr.code.view(), &row_vec(dv));
        let dflat = self.head.backward(&tr.head, &dcode);
        let mut da = dflat.into_shape_with_order(tr.convs[2].1.raw_dim()).expect("shape");
        for (conv, (cache, pre)) in [&mut self.conv3, &mut self.conv2, &mut self.conv1]
            .into_iter()
            .zip(tr.convs.iter().rev())
        {
            let dpre = silu_backward(pre, &da);
            da = conv.backward(cache, &dpre);
        }
    }

    pub fn expand(&self, v: &Array1<F>) -> Array2<F> {
        self.expansion.forward(&row_vec(v).view())
    }

    /// Returns `dL/dv` and accumulates expansion gradients.
    pub fn expand_backward(&mut self, v: &Array1<F>, dy: &Array2<F>) -> Array1<F> {
        self.expansion.backward(&row_vec(v).view(), dy).row(0).to_owned()
    }
}

impl<F: Float> Module<F> for SemanticExtractor<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.bottleneck.visit(&join(prefix, "bottleneck"), f);
        self.expansion.visit(&join(prefix, "expansion"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.bottleneck.visit_mut(&join(prefix, "bottleneck"), f);
        self.expansion.visit_mut(&join(prefix, "expansion"), f);
    }
}

/// Transformer block with adaLN-Zero modulation of both sublayers.
#[derive(Debug, Clone, PartialEq)]
pub struct DitBlock<F> {
    /// `d -> 6d`: shift, scale and gate for attention, then for the MLP.
    pub ada: Linear<F>,
    pub attn: Attention<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

struct BlockTrace<F> {
    modv: Array1<F>,
    h1: Array2<F>,
    rstd1: Array1<F>,
    attn: AttentionCache<F>,
    attn_out: Array2<F>,
    h2: Array2<F>,
    rstd2: Array1<F>,
    m2: Array2<F>,
    f_pre: Array2<F>,
    f_act: Array2<F>,
    f_out: Array2<F>,
}

impl<F: Float> DitBlock<F> {
    fn new<R: Rng + ?Sized>(d: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        DitBlock {
            ada: Linear::zeros(d, 6 * d),
            attn: Attention::new(d, heads, rng),
            fc1: Linear::new(d, mlp_ratio * d, rng),
            fc2: Linear::new(mlp_ratio * d, d, rng),
        }
    }

    fn forward(&self, x: Array2<F>, c_act: &Array2<F>) -> (Array2<F>, BlockTrace<F>) {
        let d = x.ncols();
        let modv = self.ada.forward(&c_act.view()).row(0).to_owned();
        let chunk = |i: usize| modv.slice(s![i * d..(i + 1) * d]).to_owned();
        let (shift1, scale1, gate1) = (chunk(0), chunk(1), chunk(2));
        let (shift2, scale2, gate2) = (chunk(3), chunk(4), chunk(5));
        let eps = F::from_f64c(LN_EPS);

        let (h1, rstd1) = layer_norm(&x, eps);
        let m1 = modulate(&h1, &shift1, &scale1);
        let (attn_out, attn) = self.attn.forward(&m1);
        let x1 = x + &(&attn_out * &gate1);

        let (h2, rstd2) = layer_norm(&x1, eps);
        let m2 = modulate(&h2, &shift2, &scale2);
        let f_pre = self.fc1.forward(&m2.view());
        let f_act = gelu(&f_pre);
        let f_out = self.fc2.forward(&f_act.view());
        let x2 = x1 + &(&f_out * &gate2);
        (x2, BlockTrace { modv, h1, rstd1, attn, attn_out, h2, rstd2, m2, f_pre, f_act, f_out })
    }

    /// Returns `(dL/dx, dL/dc_act)`.
    fn backward(&mut self, tr: &BlockTrace<F>, dx2: Array2<F>, c_act: &Array2<F>) -> (Array2<F>, Array2<F>) {
        let d = dx2.ncols();
        let chunk = |i: usize| tr.modv.slice(s![i * d..(i + 1) * d]).to_owned();
        let (scale1, gate1, scale2, gate2) = (chunk(1), chunk(2), chunk(4), chunk(5));
        let mut dmod = Array1::<F>::zeros(6 * d);

        // MLP branch.
        dmod.slice_mut(s![5 * d..6 * d]).assign(&(&dx2 * &tr.f_out).sum_axis(Axis(0)));
        let df = &dx2 * &gate2;
        let dact = self.fc2.backward(&tr.f_act.view(), &df);
        let dpre = gelu_backward(&tr.f_pre, &dact);
        let dm2 = self.fc1.backward(&tr.m2.view(), &dpre);
        let (dh2, dshift2, dscale2) = modulate_backward(&tr.h2, &scale2, &dm2);
        dmod.slice_mut(s![3 * d..4 * d]).assign(&dshift2);
        dmod.slice_mut(s![4 * d..5 * d]).assign(&dscale2);
        let dx1 = dx2 + &layer_norm_backward(&tr.h2, &tr.rstd2, &dh2);

        // Attention branch.
        dmod.slice_mut(s![2 * d..3 * d]).assign(&(&dx1 * &tr.attn_out).sum_axis(Axis(0)));
        let da = &dx1 * &gate1;
        let dm1 = self.attn.backward(&tr.attn, &da);
        let (dh1, dshift1, dscale1) = modulate_backward(&tr.h1, &scale1, &dm1);
        dmod.slice_mut(s![0..d]).assign(&dshift1);
        dmod.slice_mut(s![d..2 * d]).assign(&dscale1);
        let dx = dx1 + &layer_norm_backward(&tr.h1, &tr.rstd1, &dh1);

        let dc = self.ada.backward(&c_act.view(), &row_vec(&dmod));
        (dx, dc)
    }
}

impl<F: Float> Module<F> for DitBlock<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.ada.visit(&join(prefix, "ada"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        self.ada.visit_mut(&join(prefix, "ada"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}

/// adaLN-modulated output projection back to patch space.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayer<F> {
    pub ada: Linear<F>,
    pub linear: Linear<F>,
}

struct FinalTrace<F> {
    scale: Array1<F>,
    h: Array2<F>,
    rstd: Array1<F>,
    m: Array2<F>,
}

impl<F: Float> FinalLayer<F> {
    fn forward(&self, x: &Array2<F>, c_act: &Array2<F>) -> (Array2<F>, FinalTrace<F>) {
        let d = x.ncols();
        let modv = self.ada.forward(&c_act.view()).row(0).to_owned();
        let shift = modv.slice(s![0..d]).to_owned();
        let scale = modv.slice(s![d..2 * d]).to_owned();
        let (h, rstd) = layer_norm(x, F::from_f64c(LN_EPS));
        let m = modulate(&h, &shift, &scale);
        let y = self.linear.forward(&m.view());
        (y, FinalTrace { scale, h, rstd, m })
    }

    fn backward(&mut self, tr: &FinalTrace<F>, dy: &Array2<F>, c_act: &Array2<F>) -> (Array2<F>, Array2<F>) {
        let dm = self.linear.backward(&tr.m.view(), dy);
        let (dh, dshift, dscale) = modulate_backward(&tr.h, &tr.scale, &dm);
        let dmod = ndarray::concatenate(Axis(0), &[dshift.view(), dscale.view()]).expect("1-D");
        let dc = self.ada.backward(&c_act.view(), &row_vec(&dmod));
        (layer_norm_backward(&tr.h, &tr.rstd, &dh), dc)
    }
}

impl<F: Float> Module<F> for FinalLayer<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.ada.visit(&join(prefix, "ada"), f);
        self.linear.visit(&join(prefix, "linear"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        self.ada.visit_mut(&join(prefix, "ada"), f);
        self.linear.visit_mut(&join(prefix, "linear"), f);
    }
}

/// Everything the network is conditioned on besides the two grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditions<F> {
    pub delta: [f64; 3],
    pub v_co: Array1<F>,
    pub v_ego: Array1<F>,
}

/// The full conditional denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<F> {
    pub config: DenoiserConfig,
    pub patch_embed: Linear<F>,
    pub t_embed: Mlp2<F>,
    pub geometry: Mlp2<F>,
    pub se: SemanticExtractor<F>,
    pub cond_co: Linear<F>,
    pub cond_ego: Option<Linear<F>>,
    pub blocks: Vec<DitBlock<F>>,
    pub final_layer: FinalLayer<F>,
    pos_embed: Array2<F>,
}

/// Activations of one forward pass, consumed by [`Denoiser::backward`].
pub struct ForwardTrace<F> {
    patches: Array2<F>,
    t_trace: Mlp2Trace<F>,
    g_trace: Mlp2Trace<F>,
    v_co: Array1<F>,
    v_ego: Array1<F>,
    e_co: Array2<F>,
    e_ego: Option<Array2<F>>,
    c: Array2<F>,
    c_act: Array2<F>,
    blocks: Vec<BlockTrace<F>>,
    final_trace: FinalTrace<F>,
    var_interp: Array3<F>,
}

/// Gradients flowing back into the semantic vectors.
#[derive(Debug, Clone)]
pub struct SemanticGrads<F> {
    pub d_v_co: Array1<F>,
    pub d_v_ego: Array1<F>,
}

impl<F: Float> Denoiser<F> {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self, DenoiserError> {
        config.validate()?;
        let d = config.hidden_dim;
        let (gr, gc) = config.token_grid();
        Ok(Denoiser {
            patch_embed: Linear::new(config.patch_len(), d, rng),
            t_embed: Mlp2::new(config.freq_dim, d, d, rng),
            geometry: Mlp2::new(3, d, d, rng),
            se: SemanticExtractor::new(&config, rng),
            cond_co: Linear::new(config.code_dim, d, rng),
            cond_ego: config.use_ego_semantic.then(|| Linear::new(config.code_dim, d, rng)),
            blocks: (0..config.depth).map(|_| DitBlock::new(d, config.heads, config.mlp_ratio, rng)).collect(),
            final_layer: FinalLayer {
                ada: Linear::zeros(d, 2 * d),
                linear: Linear::zeros(d, config.patch_h * config.patch_w * config.output_channels()),
            },
            pos_embed: cast_arr2(&sincos_2d(d, gr, gc)),
            config,
        })
    }

    pub fn pos_embed(&self) -> &Array2<F> {
        &self.pos_embed
    }

    /// Normalizes a raw feature grid into network units.
    pub fn normalize(&self, x: &Array3<f32>) -> Array3<F> {
        let inv = 1.0 / self.config.feature_scale;
        x.mapv(|v| F::from_f64c(v as f64 * inv))
    }

    pub fn denormalize(&self, x: &Array3<F>) -> Array3<f32> {
        let s = self.config.feature_scale;
        x.mapv(|v| (v.to_f64c() * s) as f32)
    }

    fn check_grid<T>(&self, x: &Array3<T>) -> Result<(), DenoiserError> {
        if x.dim() != self.config.grid_shape() {
            return Err(DenoiserError::ShapeMismatch { expected: self.config.grid_shape(), found: x.dim() });
        }
        Ok(())
    }

    /// Semantic vector of a normalized grid.
    pub fn extract_semantic(&self, x: &Array3<F>) -> Result<Array1<F>, DenoiserError> {
        self.check_grid(x)?;
        Ok(self.se.extract(x).0)
    }

    /// Timestep features before the embedding MLP.
    fn t_features(&self, t: usize) -> Array2<F> {
        row_vec(&timestep_features(t, self.config.freq_dim).mapv(F::from_f64c))
    }

    pub fn embed_geometry(&self, delta: [f64; 3]) -> Result<Array1<F>, DenoiserError> {
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(DenoiserError::NonFinite("relative position"));
        }
        Ok(self.geometry.forward(self.geometry_input(delta)).0.row(0).to_owned())
    }

    fn geometry_input(&self, delta: [f64; 3]) -> Array2<F> {
        let s = self.config.geometry_scale;
        Array2::from_shape_fn((1, 3), |(_, i)| F::from_f64c(delta[i] / s))
    }

    fn check_conditions(&self, cond: &Conditions<F>) -> Result<(), DenoiserError> {
        let l = self.config.semantic_len;
        for v in [&cond.v_co, &cond.v_ego] {
            if v.len() != l {
                return Err(DenoiserError::SemanticLength { expected: l, found: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DenoiserError::NonFinite("semantic vector"));
            }
        }
        if cond.delta.iter().any(|v| !v.is_finite()) {
            return Err(DenoiserError::NonFinite("relative position"));
        }
        Ok(())
    }

    /// Predicts noise and variance weights for the noised co-agent grid `x_t`
    /// given the (normalized) ego grid.
    pub fn forward(
        &self,
        x_t: &Array3<F>,
        ego: &Array3<F>,
        t: usize,
        cond: &Conditions<F>,
    ) -> Result<DenoiserOutput<F>, DenoiserError> {
        Ok(self.forward_trace(x_t, ego, t, cond)?.0)
    }

    pub fn forward_trace(
        &self,
        x_t: &Array3<F>,
        ego: &Array3<F>,
        t: usize,
        cond: &Conditions<F>,
    ) -> Result<(DenoiserOutput<F>, ForwardTrace<F>), DenoiserError> {
        self.check_grid(x_t)?;
        self.check_grid(ego)?;
        self.check_conditions(cond)?;
        let cfg = &self.config;

        let stacked = ndarray::concatenate(Axis(2), &[ego.view(), x_t.view()]).expect("same grid");
        let patches = patchify(&stacked, cfg.patch_h, cfg.patch_w);
        let mut tokens = self.patch_embed.forward(&patches.view());
        tokens += &self.pos_embed;

        let t_feat = self.t_features(t);
        let (t_emb, t_trace) = self.t_embed.forward(t_feat);
        let (g, g_trace) = self.geometry.forward(self.geometry_input(cond.delta));
        let e_co = self.se.expand(&cond.v_co);
        let mut c = t_emb + &g + &self.cond_co.forward(&e_co.view());
        let e_ego = match &self.cond_ego {
            Some(proj) => {
                let e = self.se.expand(&cond.v_ego);
                c += &proj.forward(&e.view());
                Some(e)
            }
            None => None,
        };
        let c_act = silu(&c);

        let mut block_traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, tr) = block.forward(tokens, &c_act);
            tokens = next;
            block_traces.push(tr);
        }
        let (out_patches, final_trace) = self.final_layer.forward(&tokens, &c_act);
        let grid = unpatchify(&out_patches, cfg.height, cfg.width, cfg.patch_h, cfg.patch_w);
        let ch = cfg.channels;
        let eps_hat = grid.slice(s![.., .., 0..ch]).to_owned();
        let var_interp = grid.slice(s![.., .., ch..2 * ch]).mapv(sigmoid);

        let out = DenoiserOutput { eps_hat, var_interp: var_interp.clone() };
        let trace = ForwardTrace {
            patches,
            t_trace,
            g_trace,
            v_co: cond.v_co.clone(),
            v_ego: cond.v_ego.clone(),
            e_co,
            e_ego,
            c,
            c_act,
            blocks: block_traces,
            final_trace,
            var_interp,
        };
        Ok((out, trace))
    }

    /// Backpropagates head gradients, accumulating parameter gradients, and
    /// returns the gradients with respect to both semantic vectors.
    pub fn backward(&mut self, tr: &ForwardTrace<F>, d_eps: &Array3<F>, d_var: &Array3<F>) -> SemanticGrads<F> {
        let cfg = self.config.clone();
        let ch = cfg.channels;
        let mut d_grid = Array3::<F>::zeros((cfg.height, cfg.width, 2 * ch));
        d_grid.slice_mut(s![.., .., 0..ch]).assign(d_eps);
        let mut d_pre = d_var.clone();
        ndarray::Zip::from(&mut d_pre).and(&tr.var_interp).for_each(|g, &v| *g *= v * (F::one() - v));
        d_grid.slice_mut(s![.., .., ch..2 * ch]).assign(&d_pre);
        let d_out_patches = patchify(&d_grid, cfg.patch_h, cfg.patch_w);

        let (mut d_tokens, mut d_c_act) = self.final_layer.backward(&tr.final_trace, &d_out_patches, &tr.c_act);
        for (block, btr) in self.blocks.iter_mut().zip(tr.blocks.iter()).rev() {
            let (dx, dc) = block.backward(btr, d_tokens, &tr.c_act);
            d_tokens = dx;
            d_c_act += &dc;
        }
        self.patch_embed.backward(&tr.patches.view(), &d_tokens);

        let d_c = silu_backward(&tr.c, &d_c_act);
        self.t_embed.backward(&tr.t_trace, &d_c);
        self.geometry.backward(&tr.g_trace, &d_c);
        let d_e_co = self.cond_co.backward(&tr.e_co.view(), &d_c);
        let d_v_co = self.se.expand_backward(&tr.v_co, &d_e_co);
        let d_v_ego = match (&mut self.cond_ego, &tr.e_ego) {
            (Some(proj), Some(e)) => {
                let d_e = proj.backward(&e.view(), &d_c);
                self.se.expand_backward(&tr.v_ego, &d_e)
            }
            _ => Array1::zeros(tr.v_ego.len()),
        };
        SemanticGrads { d_v_co, d_v_ego }
    }

    /// Forward and backward for one training example, with semantic vectors
    /// extracted from the two grids by the shared extractor. Gradients are
    /// accumulated scaled by `weight` (e.g. `1 / batch`).
    pub fn train_example(&mut self, ex: &TrainExample<'_, F>, schedule: &NoiseSchedule, vlb_weight: f64, weight: f64) -> Result<LossTerms, DenoiserError> {
        let (terms, _) = self.train_example_with(ex, schedule, vlb_weight, weight, None)?;
        Ok(terms)
    }

    /// Like [`Denoiser::train_example`]; when `detached_eps` is given, the
    /// variance term uses it for the reverse mean instead of the live
    /// prediction. Returns the live `eps_hat` as well.
    pub fn train_example_with(
        &mut self,
        ex: &TrainExample<'_, F>,
        schedule: &NoiseSchedule,
        vlb_weight: f64,
        weight: f64,
        detached_eps: Option<&Array3<F>>,
    ) -> Result<(LossTerms, Array3<F>), DenoiserError> {
        let (v_co, se_co) = self.se.extract(ex.co);
        let (v_ego, se_ego) = self.se.extract(ex.ego);
        let x_t = diffusion::forward_noise(ex.co, ex.t, ex.eps, schedule)?;
        let cond = Conditions { delta: ex.delta, v_co, v_ego };
        let (out, trace) = self.forward_trace(&x_t, ex.ego, ex.t, &cond)?;
        let (terms, grad) = match detached_eps {
            None => diffusion::training_loss(&out, ex.eps, ex.co, &x_t, ex.t, schedule, vlb_weight)?,
            Some(frozen) => {
                diffusion::training_loss_detached(&out, frozen, ex.eps, ex.co, &x_t, ex.t, schedule, vlb_weight)?
            }
        };
        let w = F::from_f64c(weight);
        let sg = self.backward(&trace, &(grad.d_eps_hat * w), &(grad.d_var_interp * w));
        self.se.backward(&se_co, &sg.d_v_co);
        if self.cond_ego.is_some() {
            self.se.backward(&se_ego, &sg.d_v_ego);
        }
        Ok((terms, out.eps_hat))
    }

    /// Loss of one example without touching gradients.
    pub fn example_loss(&self, ex: &TrainExample<'_, F>, schedule: &NoiseSchedule, vlb_weight: f64, detached_eps: Option<&Array3<F>>) -> Result<LossTerms, DenoiserError> {
        let cond = Conditions { delta: ex.delta, v_co: self.se.extract(ex.co).0, v_ego: self.se.extract(ex.ego).0 };
        let x_t = diffusion::forward_noise(ex.co, ex.t, ex.eps, schedule)?;
        let out = self.forward(&x_t, ex.ego, ex.t, &cond)?;
        let terms = match detached_eps {
            None => diffusion::training_loss(&out, ex.eps, ex.co, &x_t, ex.t, schedule, vlb_weight)?.0,
            Some(frozen) => diffusion::training_loss_detached(&out, frozen, ex.eps, ex.co, &x_t, ex.t, schedule, vlb_weight)?.0,
        };
        Ok(terms)
    }
}

/// One supervised example in network units.
pub struct TrainExample<'a, F> {
    pub ego: &'a Array3<F>,
    pub co: &'a Array3<F>,
    pub delta: [f64; 3],
    pub t: usize,
    pub eps: &'a Array3<F>,
}

impl<F: Float> Module<F> for Denoiser<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        self.t_embed.visit(&join(prefix, "t_embed"), f);
        self.geometry.visit(&join(prefix, "geometry"), f);
        self.se.visit(&join(prefix, "se"), f);
        self.cond_co.visit(&join(prefix, "cond_co"), f);
        if let Some(p) = &self.cond_ego {
            p.visit(&join(prefix, "cond_ego"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_layer.visit(&join(prefix, "final"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        self.t_embed.visit_mut(&join(prefix, "t_embed"), f);
        self.geometry.visit_mut(&join(prefix, "geometry"), f);
        self.se.visit_mut(&join(prefix, "se"), f);
        self.cond_co.visit_mut(&join(prefix, "cond_co"), f);
        if let Some(p) = &mut self.cond_ego {
            p.visit_mut(&join(prefix, "cond_ego"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_layer.visit_mut(&join(prefix, "final"), f);
    }
}

/// Starts a shorter-`L` model from a trained one: every parameter is copied
/// except the bottleneck and expansion adapters, which are re-initialized
/// for `new_len`. `new_len == L` returns an exact copy.
pub fn distill_init<F: Float, R: Rng + ?Sized>(
    source: &Denoiser<F>,
    new_len: usize,
    rng: &mut R,
) -> Result<Denoiser<F>, DenoiserError> {
    let source_len = source.config.semantic_len;
    if new_len > source_len || new_len == 0 {
        return Err(DenoiserError::DistillLength { new_len, source_len });
    }
    let mut model = source.clone();
    if new_len == source_len {
        return Ok(model);
    }
    model.config.semantic_len = new_len;
    model.se.bottleneck = Linear::new(source.config.code_dim, new_len, rng);
    model.se.expansion = Linear::new(new_len, source.config.code_dim, rng);
    Ok(model)
}

/// A model bound to a fixed ego grid, ready for sampling.
pub struct SamplingConditions {
    pub ego: Array3<f32>,
    pub cond: Conditions<f32>,
}

impl NoisePredictor for Denoiser<f32> {
    type Cond = SamplingConditions;

    fn predict(&self, x_t: &Array3<f32>, t: usize, cond: &SamplingConditions) -> DenoiserOutput<f32> {
        match self.forward(x_t, &cond.ego, t, &cond.cond) {
            Ok(out) => out,
            // Shape errors are surfaced as non-finite output so that the
            // sampler reports them instead of panicking.
            Err(_) => DenoiserOutput {
                eps_hat: x_t.mapv(|_| f32::NAN),
                var_interp: x_t.mapv(|_| f32::NAN),
            },
        }
    }
}
