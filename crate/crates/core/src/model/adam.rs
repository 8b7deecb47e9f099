use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for the trainable entries of one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = |_: &_| Vec::new();
        let mut m: Vec<Vec<T>> = params.iter().map(zeros).collect();
        let mut v = m.clone();
        for (i, p) in params.iter().enumerate() {
            if p.trainable {
                m[i] = vec![T::zero(); p.tensor.len()];
                v[i] = vec![T::zero(); p.tensor.len()];
            }
        }
        AdamState { config, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update.
    ///
    /// All gradients are checked before anything is touched, so a non-finite
    /// gradient leaves both parameters and moments unchanged.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            match (p.trainable, g) {
                (true, Some(g)) if g.len() == p.tensor.len() => {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFiniteGradient(p.name.clone()));
                    }
                }
                (true, _) => return Err(Error::invalid("adam_step", format!("missing gradient for `{}`", p.name))),
                (false, _) => {}
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let t = self.step as i32;
        let bc1 = T::one() - T::lit(c.beta1.powi(t));
        let bc2 = T::one() - T::lit(c.beta2.powi(t));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (true, Some(g)) = (p.trainable, g) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    fn scalar_set(x: f64) -> ParamSet<f64> {
        let mut s = ParamSet::new();
        s.push("w", Tensor::scalar(x), true);
        s.push("stat", Tensor::scalar(7.0), false);
        s
    }

    #[test]
    fn zero_gradient_keeps_params_and_advances_step() {
        let mut p = scalar_set(0.3);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Some(vec![0.0]), None]).unwrap();
        assert_eq!(p.get("w").unwrap().tensor.item(), 0.3);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_set(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Some(vec![1.0]), None]).unwrap();
        let expect = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p.get("w").unwrap().tensor.item() - expect).abs() < 1e-12);
        assert_eq!(p.get("stat").unwrap().tensor.item(), 7.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_set(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &[Some(vec![f64::NAN]), None]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(p.get("w").unwrap().tensor.item(), 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn identical_runs_agree() {
        let run = || {
            let mut p = scalar_set(0.5);
            let mut adam = AdamState::new(AdamConfig::default(), &p);
            for k in 0..20 {
                adam.step(&mut p, &[Some(vec![(k as f64).sin()]), None]).unwrap();
            }
            p.get("w").unwrap().tensor.item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
