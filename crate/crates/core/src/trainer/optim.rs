//! Adam for the online parameters and the EMA rule for the target.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{Archive, ParamSet};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be finite and > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(format!("eps must be finite and > 0, got {}", self.eps));
        }
        Ok(())
    }
}

/// First and second moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub step: u64,
    names: Vec<String>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            names: params.names().to_vec(),
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected Adam update; `grads[i]` pairs with parameter `i`.
    pub fn update(&mut self, cfg: &OptimConfig, params: &mut ParamSet<T>, grads: &[Tensor<T>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter count mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient/parameter count mismatch");
        self.step += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::of(1.0 - cfg.beta1.powf(self.step as f64));
        let c2 = T::of(1.0 - cfg.beta2.powf(self.step as f64));
        let (lr, eps) = (T::of(cfg.learning_rate), T::of(cfg.eps));
        let one = T::one();
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn write_to(&self, prefix: &str, a: &mut Archive<T>) {
        for ((n, m), v) in self.names.iter().zip(&self.m).zip(&self.v) {
            a.push(format!("{prefix}/m/{n}"), m.clone());
            a.push(format!("{prefix}/v/{n}"), v.clone());
        }
    }

    /// Restores moments written by [`Self::write_to`] for parameters shaped
    /// like `params`.
    pub fn read_from(prefix: &str, step: u64, a: &Archive<T>, params: &ParamSet<T>) -> Result<Self, TrainError> {
        let mut s = Self::new(params);
        s.step = step;
        for (i, (n, t)) in params.iter().enumerate() {
            for (kind, slot) in [("m", &mut s.m[i]), ("v", &mut s.v[i])] {
                let key = format!("{prefix}/{kind}/{n}");
                let stored = a
                    .get(&key)
                    .ok_or_else(|| TrainError::State(format!("missing optimizer tensor {key}")))?;
                if stored.shape() != t.shape() {
                    return Err(TrainError::State(format!("optimizer tensor {key} has wrong shape")));
                }
                *slot = stored.clone();
            }
        }
        Ok(s)
    }
}

/// `ξ ← αξ + (1 − α)θ` over the leading target entries of θ.
pub fn ema_update<T: Real>(target: &mut ParamSet<T>, online: &ParamSet<T>, alpha: f64) {
    assert!(
        target.names().iter().zip(online.names()).all(|(a, b)| a == b),
        "target parameters must be a prefix of the online parameters"
    );
    let a = T::of(alpha);
    let b = T::of(1.0 - alpha);
    for (xi, theta) in target.tensors_mut().iter_mut().zip(online.tensors()) {
        for (x, &t) in xi.data_mut().iter_mut().zip(theta.data()) {
            *x = a * *x + b * t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(values: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_f64(&[values.len()], values).unwrap());
        p
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let cfg = OptimConfig::default();
        let mut p = set(&[1.0, -2.0]);
        let mut s = OptimState::new(&p);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for step in 1..=5 {
            let g = 0.3 * step as f64 - 1.0;
            s.update(&cfg, &mut p, &[Tensor::from_f64(&[2], &[g, 0.0]).unwrap()]);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(step));
            let vh = v / (1.0 - 0.999f64.powi(step));
            x -= 3e-4 * mh / (vh.sqrt() + 1e-8);
            assert!((p.tensors()[0].data()[0] - x).abs() < 1e-15);
        }
        // zero gradient never moves a parameter
        assert_eq!(p.tensors()[0].data()[1], -2.0);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let cfg = OptimConfig::default();
        let mut p = set(&[0.0]);
        let mut s = OptimState::new(&p);
        s.update(&cfg, &mut p, &[Tensor::from_f64(&[1], &[123.0]).unwrap()]);
        assert!((p.tensors()[0].data()[0] + 3e-4).abs() < 1e-12);
    }

    #[test]
    fn ema_boundaries() {
        let theta = set(&[1.0, 2.0]);
        let mut xi = set(&[5.0, -1.0]);
        ema_update(&mut xi, &theta, 1.0);
        assert_eq!(xi, set(&[5.0, -1.0]));
        ema_update(&mut xi, &theta, 0.0);
        assert_eq!(xi, theta);
        let mut xi = set(&[5.0, -1.0]);
        ema_update(&mut xi, &theta, 0.99);
        assert_eq!(xi.tensors()[0].data(), &[0.99 * 5.0 + 0.01 * 1.0, 0.99 * -1.0 + 0.01 * 2.0]);
    }

    #[test]
    fn state_archive_round_trip() {
        let mut p = set(&[1.0, 2.0, 3.0]);
        let mut s = OptimState::new(&p);
        s.update(&OptimConfig::default(), &mut p, &[Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap()]);
        let mut a = Archive::new("state", serde_json::Value::Null);
        s.write_to("online", &mut a);
        let back = OptimState::read_from("online", s.step, &a, &p).unwrap();
        assert_eq!(back, s);
        assert!(OptimState::read_from("target", 1, &a, &p).is_err());
    }
}
