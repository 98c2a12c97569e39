//! Minimal reverse-mode building blocks for the denoiser.
//!
//! Every layer exposes a `forward` that returns its output together with the
//! activations needed for the backward pass, and a `backward` that takes those
//! activations plus the upstream gradient, accumulates parameter gradients in
//! place and returns the gradient with respect to the layer input. Layers are
//! generic over [`Float`] so the same code runs in `f32` for training and in
//! `f64` for finite-difference checks.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array, Array1, Array2, ArrayView2, Axis, Dimension, Ix1, Ix2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Scalar type usable by the network layers.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64c(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("representable constant")
    }
    fn to_f64c(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite scalar")
    }
}

impl Float for f32 {}
impl Float for f64 {}

#[inline]
pub(crate) fn cst<F: Float>(x: f64) -> F {
    F::from_f64c(x)
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F, D: Dimension> {
    pub value: Array<F, D>,
    pub grad: Array<F, D>,
}

impl<F: Float, D: Dimension> Param<F, D> {
    pub fn new(value: Array<F, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn cast<G: Float>(&self) -> Param<G, D> {
        Param::new(self.value.mapv(|x| G::from_f64c(x.to_f64c())))
    }
}

/// Mutable access to one named parameter during a traversal.
pub struct ParamSlot<'a, F> {
    pub shape: &'a [usize],
    pub value: &'a mut [F],
    pub grad: &'a mut [F],
}

/// Anything holding named parameters.
pub trait Module<F: Float> {
    /// Visits every parameter as `(name, shape, values)` in a fixed order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F]));

    /// Visits every parameter mutably, in the same order as [`Module::visit`].
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    fn flat_values(&self) -> Vec<F> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn flat_grads(&mut self) -> Vec<F> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, slot| out.extend_from_slice(slot.grad));
        out
    }

    /// Overwrites all parameters from a flat buffer in visit order.
    fn set_flat_values(&mut self, values: &[F]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, slot| {
            let n = slot.value.len();
            slot.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, values.len(), "flat buffer length does not match parameter count");
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, slot| slot.grad.iter_mut().for_each(|g| *g = F::zero()));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_param<F: Float, D: Dimension>(
    p: &Param<F, D>,
    name: &str,
    f: &mut dyn FnMut(&str, &[usize], &[F]),
) {
    let values = p.value.as_slice().expect("parameters are kept in standard layout");
    f(name, p.value.shape(), values);
}

pub(crate) fn visit_param_mut<F: Float, D: Dimension>(
    p: &mut Param<F, D>,
    name: &str,
    f: &mut dyn FnMut(&str, ParamSlot<'_, F>),
) {
    let shape = p.value.shape().to_vec();
    let value = p.value.as_slice_mut().expect("standard layout");
    let grad = p.grad.as_slice_mut().expect("standard layout");
    f(name, ParamSlot { shape: &shape, value, grad });
}

/// Fully connected layer, `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Param<F, Ix2>,
    pub bias: Param<F, Ix1>,
}

impl<F: Float> Linear<F> {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| F::from_f64c(dist.sample(rng)));
        Linear { weight: Param::new(weight), bias: Param::new(Array1::zeros(fan_out)) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Param::new(Array2::zeros((fan_in, fan_out))),
            bias: Param::new(Array1::zeros(fan_out)),
        }
    }

    /// Square identity map with zero bias.
    pub fn identity(dim: usize) -> Self {
        Linear {
            weight: Param::new(Array2::eye(dim)),
            bias: Param::new(Array1::zeros(dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<'_, F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.value);
        y += &self.bias.value;
        y
    }

    /// Accumulates weight and bias gradients; returns `dL/dx`.
    pub fn backward(&mut self, x: &ArrayView2<'_, F>, dy: &Array2<F>) -> Array2<F> {
        general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut self.weight.grad);
        self.bias.grad += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.value.t())
    }

    pub fn cast<G: Float>(&self) -> Linear<G> {
        Linear { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

impl<F: Float> Module<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        visit_param(&self.weight, &join(prefix, "weight"), f);
        visit_param(&self.bias, &join(prefix, "bias"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        visit_param_mut(&mut self.weight, &join(prefix, "weight"), f);
        visit_param_mut(&mut self.bias, &join(prefix, "bias"), f);
    }
}

#[inline]
pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Float>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| v * sigmoid(v))
}

/// `dL/dx` for `y = silu(x)`.
pub fn silu_backward<F: Float>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d *= s * (F::one() + v * (F::one() - s));
    });
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<F: Float>(x: &Array2<F>) -> Array2<F> {
    let k = cst::<F>(GELU_K);
    let c = cst::<F>(GELU_C);
    let half = cst::<F>(0.5);
    x.mapv(|v| half * v * (F::one() + (k * (v + c * v * v * v)).tanh()))
}

pub fn gelu_backward<F: Float>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let k = cst::<F>(GELU_K);
    let c = cst::<F>(GELU_C);
    let half = cst::<F>(0.5);
    let three = cst::<F>(3.0);
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let th = (k * (v + c * v * v * v)).tanh();
        let dth = (F::one() - th * th) * k * (F::one() + three * c * v * v);
        *d *= half * (F::one() + th) + half * v * dth;
    });
    dx
}

/// Row-wise layer normalization without affine parameters.
///
/// Returns the normalized rows and the per-row reciprocal standard deviation.
pub fn layer_norm<F: Float>(x: &Array2<F>, eps: F) -> (Array2<F>, Array1<F>) {
    let n = F::from_usize(x.ncols()).expect("width");
    let mut out = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in out.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.iter().copied().sum::<F>() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        *r = inv;
    }
    (out, rstd)
}

pub fn layer_norm_backward<F: Float>(xhat: &Array2<F>, rstd: &Array1<F>, dy: &Array2<F>) -> Array2<F> {
    let n = F::from_usize(xhat.ncols()).expect("width");
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut dxr, xr), dyr), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(xhat.rows())
        .zip(dy.rows())
        .zip(rstd.iter())
    {
        let mean_dy = dyr.iter().copied().sum::<F>() / n;
        let mean_dyx = dyr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
        Zip::from(&mut dxr).and(&xr).and(&dyr).for_each(|d, &xh, &g| {
            *d = r * (g - mean_dy - xh * mean_dyx);
        });
    }
    dx
}

/// `x * (1 + scale) + shift`, with `scale` and `shift` broadcast over rows.
pub fn modulate<F: Float>(x: &Array2<F>, shift: &Array1<F>, scale: &Array1<F>) -> Array2<F> {
    let one_plus = scale.mapv(|s| F::one() + s);
    let mut y = x * &one_plus;
    y += shift;
    y
}

/// Returns `(dx, dshift, dscale)`.
pub fn modulate_backward<F: Float>(
    x: &Array2<F>,
    scale: &Array1<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let one_plus = scale.mapv(|s| F::one() + s);
    let dx = dy * &one_plus;
    let dshift = dy.sum_axis(Axis(0));
    let dscale = (dy * x).sum_axis(Axis(0));
    (dx, dshift, dscale)
}

fn softmax_rows_inplace<F: Float>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().copied().sum::<F>();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head self-attention over a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub heads: usize,
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
}

pub struct AttentionCache<F> {
    input: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    merged: Array2<F>,
}

impl<F: Float> Attention<F> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(dim % heads == 0, "hidden width must split evenly across heads");
        Attention { heads, qkv: Linear::new(dim, 3 * dim, rng), proj: Linear::new(dim, dim, rng) }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, AttentionCache<F>) {
        let tokens = x.nrows();
        let dim = x.ncols();
        let hd = dim / self.heads;
        let scale = F::one() / F::from_usize(hd).expect("head width").sqrt();
        let qkv = self.qkv.forward(&x.view());
        let mut merged = Array2::zeros((tokens, dim));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
            let k = qkv.slice(s![.., dim + h * hd..dim + (h + 1) * hd]);
            let v = qkv.slice(s![.., 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
            let mut p = q.dot(&k.t());
            p.mapv_inplace(|a| a * scale);
            softmax_rows_inplace(&mut p);
            let mut out = merged.slice_mut(s![.., h * hd..(h + 1) * hd]);
            general_mat_mul(F::one(), &p, &v, F::zero(), &mut out);
            probs.push(p);
        }
        let y = self.proj.forward(&merged.view());
        (y, AttentionCache { input: x.clone(), qkv, probs, merged })
    }

    pub fn backward(&mut self, cache: &AttentionCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dim = cache.input.ncols();
        let hd = dim / self.heads;
        let scale = F::one() / F::from_usize(hd).expect("head width").sqrt();
        let dmerged = self.proj.backward(&cache.merged.view(), dy);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for h in 0..self.heads {
            let q = cache.qkv.slice(s![.., h * hd..(h + 1) * hd]);
            let k = cache.qkv.slice(s![.., dim + h * hd..dim + (h + 1) * hd]);
            let v = cache.qkv.slice(s![.., 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
            let p = &cache.probs[h];
            let dout = dmerged.slice(s![.., h * hd..(h + 1) * hd]);
            let mut dv = dqkv.slice_mut(s![.., 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
            general_mat_mul(F::one(), &p.t(), &dout, F::zero(), &mut dv);
            let mut ds = dout.dot(&v.t());
            for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = dsr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                Zip::from(&mut dsr).and(&pr).for_each(|d, &pv| *d = pv * (*d - dot) * scale);
            }
            let mut dq = dqkv.slice_mut(s![.., h * hd..(h + 1) * hd]);
            general_mat_mul(F::one(), &ds, &k, F::zero(), &mut dq);
            let mut dk = dqkv.slice_mut(s![.., dim + h * hd..dim + (h + 1) * hd]);
            general_mat_mul(F::one(), &ds.t(), &q, F::zero(), &mut dk);
        }
        self.qkv.backward(&cache.input.view(), &dqkv)
    }

    pub fn cast<G: Float>(&self) -> Attention<G> {
        Attention { heads: self.heads, qkv: self.qkv.cast(), proj: self.proj.cast() }
    }
}

impl<F: Float> Module<F> for Attention<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// 3x3 convolution with stride 2 and zero padding 1 over an HWC grid.
///
/// Implemented as im2col followed by a single matrix product; the kernel is
/// stored as a [`Linear`] of shape `(9 * in_channels, out_channels)` with
/// row order `(ky, kx, c_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3s2<F> {
    pub in_channels: usize,
    pub kernel: Linear<F>,
}

pub struct ConvCache<F> {
    in_h: usize,
    in_w: usize,
    cols: Array2<F>,
}

pub fn conv_out_len(n: usize) -> usize {
    (n + 1) / 2
}

impl<F: Float> Conv3x3s2<F> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Conv3x3s2 { in_channels, kernel: Linear::new(9 * in_channels, out_channels, rng) }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.out_dim()
    }

    /// `x` is `(h * w, c_in)` in row-major cell order; returns
    /// `(out_h * out_w, c_out)` plus the cache.
    pub fn forward(&self, x: &Array2<F>, h: usize, w: usize) -> (Array2<F>, ConvCache<F>) {
        let c = self.in_channels;
        let (oh, ow) = (conv_out_len(h), conv_out_len(w));
        let mut cols = Array2::zeros((oh * ow, 9 * c));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = cols.row_mut(oy * ow + ox);
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = x.row(iy as usize * w + ix as usize);
                        let off = (ky * 3 + kx) * c;
                        row.slice_mut(s![off..off + c]).assign(&src);
                    }
                }
            }
        }
        let y = self.kernel.forward(&cols.view());
        (y, ConvCache { in_h: h, in_w: w, cols })
    }

    pub fn backward(&mut self, cache: &ConvCache<F>, dy: &Array2<F>) -> Array2<F> {
        let c = self.in_channels;
        let (h, w) = (cache.in_h, cache.in_w);
        let (oh, ow) = (conv_out_len(h), conv_out_len(w));
        let dcols = self.kernel.backward(&cache.cols.view(), dy);
        let mut dx = Array2::zeros((h * w, c));
        for oy in 0..oh {
            for ox in 0..ow {
                let row = dcols.row(oy * ow + ox);
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let off = (ky * 3 + kx) * c;
                        let mut dst = dx.row_mut(iy as usize * w + ix as usize);
                        dst += &row.slice(s![off..off + c]);
                    }
                }
            }
        }
        dx
    }

    pub fn cast<G: Float>(&self) -> Conv3x3s2<G> {
        Conv3x3s2 { in_channels: self.in_channels, kernel: self.kernel.cast() }
    }
}

impl<F: Float> Module<F> for Conv3x3s2<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.kernel.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        self.kernel.visit_mut(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        let d = rand_distr::StandardNormal;
        Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(d))
    }

    /// Central-difference check of `dL/dx` where `L = sum(y * probe)`.
    fn check_input_grad(
        x: &Array2<f64>,
        probe: &Array2<f64>,
        fwd: &dyn Fn(&Array2<f64>) -> Array2<f64>,
        analytic: &Array2<f64>,
    ) {
        let h = 1e-6;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let lp = (fwd(&xp) * probe).sum();
            let lm = (fwd(&xm) * probe).sum();
            let num = (lp - lm) / (2.0 * h);
            let a = analytic[[r, c]];
            assert!((num - a).abs() <= 1e-6 * (1.0 + num.abs()), "grad mismatch at {idx}: {num} vs {a}");
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 3, 16);
        let (y, _) = layer_norm(&x, 1e-12);
        for row in y.rows() {
            let mean = row.sum() / 16.0;
            let var = row.mapv(|v| v * v).sum() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 2, 5);
        let probe = rand_mat(&mut rng, 2, 5);
        let (xh, rstd) = layer_norm(&x, 1e-6);
        let dx = layer_norm_backward(&xh, &rstd, &probe);
        check_input_grad(&x, &probe, &|v| layer_norm(v, 1e-6).0, &dx);
    }

    #[test]
    fn activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 3, 4);
        let probe = rand_mat(&mut rng, 3, 4);
        check_input_grad(&x, &probe, &|v| silu(v), &silu_backward(&x, &probe));
        check_input_grad(&x, &probe, &|v| gelu(v), &gelu_backward(&x, &probe));
    }

    #[test]
    fn attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut attn = Attention::<f64>::new(8, 2, &mut rng);
        let x = rand_mat(&mut rng, 5, 8);
        let probe = rand_mat(&mut rng, 5, 8);
        let (_, cache) = attn.forward(&x);
        let dx = attn.backward(&cache, &probe);
        let a2 = attn.clone();
        check_input_grad(&x, &probe, &|v| a2.forward(v).0, &dx);
    }

    #[test]
    fn conv_gradient_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv3x3s2::<f64>::new(2, 3, &mut rng);
        let (h, w) = (5, 4);
        let x = rand_mat(&mut rng, h * w, 2);
        let (y, cache) = conv.forward(&x, h, w);
        assert_eq!(y.dim(), (3 * 2, 3));
        let probe = rand_mat(&mut rng, 6, 3);
        let dx = conv.backward(&cache, &probe);
        let c2 = conv.clone();
        check_input_grad(&x, &probe, &|v| c2.forward(v, h, w).0, &dx);
    }

    #[test]
    fn linear_accumulates_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut lin = Linear::<f64>::new(3, 2, &mut rng);
        let x = rand_mat(&mut rng, 4, 3);
        let dy = rand_mat(&mut rng, 4, 2);
        lin.backward(&x.view(), &dy);
        lin.backward(&x.view(), &dy);
        let expected = x.t().dot(&dy) * 2.0;
        assert!((&lin.weight.grad - &expected).iter().all(|d| d.abs() < 1e-12));
        assert_eq!(lin.num_params(), 8);
        lin.zero_grad();
        assert!(lin.weight.grad.iter().all(|&g| g == 0.0));
    }
}
