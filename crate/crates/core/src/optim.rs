//! AdamW with decoupled weight decay and optional global-norm clipping.

use crate::config::OptimConfig;
use crate::nn::{Float, Module};

#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    grad_clip: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Returns the gradient norm before clipping.
    pub fn step<F: Float, M: Module<F>>(&mut self, model: &mut M) -> f64 {
        let mut sq = 0.0;
        model.visit_mut("", &mut |_, slot| sq += slot.grad.iter().map(|g| g.to_f64c().powi(2)).sum::<f64>());
        let norm = sq.sqrt();
        let clip = if self.grad_clip > 0.0 && norm > self.grad_clip { self.grad_clip / norm } else { 1.0 };

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let first = self.m.is_empty();
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut k = 0;
        model.visit_mut("", &mut |_, slot| {
            if first {
                ms.push(vec![0.0; slot.value.len()]);
                vs.push(vec![0.0; slot.value.len()]);
            }
            let (m, v) = (&mut ms[k], &mut vs[k]);
            for (((p, g), mi), vi) in slot.value.iter_mut().zip(slot.grad.iter_mut()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gr = g.to_f64c() * clip;
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                let pv = p.to_f64c();
                *p = F::from_f64c(pv - lr * (update + wd * pv));
                *g = F::zero();
            }
            k += 1;
        });
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::array;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let cfg = OptimConfig { lr: 0.01, ..Default::default() };
        let mut lin = Linear::<f64>::zeros(2, 1);
        lin.weight.grad = array![[3.0], [-0.5]];
        lin.bias.grad = array![0.0];
        let mut opt = AdamW::new(&cfg);
        opt.step(&mut lin);
        assert!((lin.weight.value[[0, 0]] + 0.01).abs() < 1e-9);
        assert!((lin.weight.value[[1, 0]] - 0.01).abs() < 1e-9);
        assert_eq!(lin.bias.value[0], 0.0);
        assert!(lin.weight.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = OptimConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut lin = Linear::<f64>::zeros(1, 1);
        let mut opt = AdamW::new(&cfg);
        for _ in 0..500 {
            let w = lin.weight.value[[0, 0]];
            lin.weight.grad[[0, 0]] = 2.0 * (w - 1.5);
            opt.step(&mut lin);
        }
        assert!((lin.weight.value[[0, 0]] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn clipping_bounds_effective_gradient() {
        let cfg = OptimConfig { lr: 1.0, beta1: 0.0, beta2: 0.0, grad_clip: 1.0, ..Default::default() };
        let mut opt = AdamW::new(&cfg);
        let mut lin = Linear::<f64>::zeros(1, 1);
        lin.weight.grad[[0, 0]] = 100.0;
        assert_eq!(opt.step(&mut lin), 100.0);
    }
}
