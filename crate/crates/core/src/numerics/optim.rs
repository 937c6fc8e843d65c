use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        AdamW {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape(format!("gradient shape for `{}`", params.name(id))));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", params.name(id))));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::of(c.lr);
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let eps = T::of(c.eps);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(grads[i].data()) {
                *p *= decay;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at
/// `total`.
pub fn cosine_schedule(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(value));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = single(1.5);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&p, cfg);
        for _ in 0..10 {
            opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(p.tensors()[0].item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&p, cfg);
        opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p.tensors()[0].item() - want).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let mut p = single(2.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = AdamW::new(&p, cfg);
        for step in 1..=5 {
            opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
            let want = 2.0 * (1.0f64 - 0.1 * 0.01).powi(step);
            assert!((p.tensors()[0].item() - want).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = single(0.0);
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        assert!(opt.step(&mut p, &[Tensor::scalar(f64::NAN)]).is_err());
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_schedule(0, 10, 100, 0.002), 0.0);
        assert_eq!(cosine_schedule(10, 10, 100, 0.002), 0.002);
        assert!(cosine_schedule(100, 10, 100, 0.002).abs() < 1e-12);
        let below = cosine_schedule(9, 10, 100, 1.0);
        let above = cosine_schedule(11, 10, 100, 1.0);
        assert!((below - 0.9).abs() < 1e-12);
        assert!((1.0 - above) < 1e-3);
    }

    #[test]
    fn schedule_is_continuous_at_warmup() {
        let (w, t) = (1000, 10_000);
        let left = cosine_schedule(w, w, t, 1.0) - cosine_schedule(w - 1, w, t, 1.0);
        let right = cosine_schedule(w, w, t, 1.0) - cosine_schedule(w + 1, w, t, 1.0);
        assert!(left.abs() <= 1.0 / w as f64 + 1e-12);
        assert!(right.abs() < 1e-6);
    }
}
