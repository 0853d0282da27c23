//! Adam with bias correction and piecewise-constant learning-rate halving.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update count, used for bias correction.
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, t)| alloc::vec![T::zero(); t.shape().len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `grads[i]` is `None` for parameters that did not take
    /// part in the loss; they are treated as having zero gradient.
    ///
    /// Every gradient is checked before anything is modified, so a rejected
    /// step leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<&[T]>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::config("adam", alloc::format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.len() != params.get(id).shape().len() {
                    return Err(Error::shape("adam", alloc::format!("gradient of {} has {} values", params.name(id), g.len())));
                }
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite {
                        stage: alloc::format!("gradient of {}", params.name(id)),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - num_traits::Float::powi(self.beta1, t));
        let c2 = T::of(1.0 - num_traits::Float::powi(self.beta2, t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let one = T::one();
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(id).data_mut();
            match grads[i] {
                Some(g) => {
                    for k in 0..p.len() {
                        m[k] = b1 * m[k] + (one - b1) * g[k];
                        v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                        p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
                None => {
                    for k in 0..p.len() {
                        m[k] = b1 * m[k];
                        v[k] = b2 * v[k];
                        p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Learning rate halved at fixed iteration boundaries.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    /// Halve every `interval` iterations.
    Every(u64),
    /// Halve once at each listed iteration.
    At(Vec<u64>),
}

impl LrSchedule {
    pub fn rate(&self, base: f64, iteration: u64) -> f64 {
        let halvings = match self {
            LrSchedule::Every(0) => 0,
            LrSchedule::Every(n) => iteration / n,
            LrSchedule::At(bounds) => bounds.iter().filter(|&&b| iteration >= b).count() as u64,
        };
        base * num_traits::Float::powi(0.5f64, halvings.min(i32::MAX as u64) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn scalar_store(x: f64) -> (ParamStore<f64>, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("x", Shape::scalar(), crate::params::Init::Zero);
        s.set(id, Tensor::scalar(x)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let (mut s, id) = scalar_store(1.5);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, &[Some(&[0.0])], 0.1).unwrap();
        assert_eq!(s.get(id).data()[0], 1.5);
        assert_eq!((adam.m[0][0], adam.v[0][0]), (0.0, 0.0));

        adam.m[0][0] = 0.2;
        adam.v[0][0] = 0.5;
        adam.step(&mut s, &[None], 0.0).unwrap();
        assert!((adam.m[0][0] - 0.18).abs() < 1e-15);
        assert!((adam.v[0][0] - 0.4995).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let (mut s, id) = scalar_store(0.0);
        let mut adam = Adam::new(&s);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = s.get(id).data()[0];
            adam.step(&mut s, &[Some(&[0.7])], 0.01).unwrap();
            last = before - s.get(id).data()[0];
        }
        assert!((last - 0.01).abs() < 1e-6, "step {last}");
    }

    #[test]
    fn quadratic_converges() {
        let (mut s, id) = scalar_store(0.0);
        let mut adam = Adam::new(&s);
        for _ in 0..100 {
            let x = s.get(id).data()[0];
            let g = 2.0 * (x - 3.0);
            adam.step(&mut s, &[Some(&[g])], 0.1).unwrap();
        }
        assert!((s.get(id).data()[0] - 3.0).abs() < 0.5);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(&s);
        let err = adam.step(&mut s, &[Some(&[f64::NAN])], 0.1).unwrap_err();
        assert_eq!(err, Error::NonFinite { stage: "gradient of x".into() });
        assert_eq!(s.get(id).data()[0], 1.0);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn schedules() {
        let every = LrSchedule::Every(100_000);
        assert_eq!(every.rate(1e-4, 0), 1e-4);
        assert!((every.rate(1e-4, 250_000) - 2.5e-5).abs() < 1e-20);
        let at = LrSchedule::At(alloc::vec![1000, 2000]);
        assert_eq!(at.rate(1e-3, 1500), 5e-4);
        assert_eq!(at.rate(1e-3, 999), 1e-3);
        assert_eq!(at.rate(1e-3, 2000), 2.5e-4);
    }
}
