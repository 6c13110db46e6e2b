//! Bias-corrected Adam over a list of flat tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon.is_finite()
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            first_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            steps: 0,
        }
    }

    /// One update of every tensor in `params` with the matching entry of `grads`.
    pub fn step(&mut self, params: &mut [&mut Vec<T>], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Shape("optimizer tensor count mismatch".into()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape("optimizer tensor size mismatch".into()));
            }
        }
        self.steps += 1;
        let c = &self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let corr1 = T::lit(1.0 - c.beta1.powf(self.steps as f64));
        let corr2 = T::lit(1.0 - c.beta2.powf(self.steps as f64));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_closed_form() {
        let mut opt = Adam::<f64>::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = [0.3, -4.0, 1e-9];
        opt.step(&mut [&mut p], &[&g]).unwrap();
        let expect = |p0: f64, g: f64| p0 - 5e-3 * g / (g.abs() + 1e-8);
        assert!((p[0] - expect(1.0, 0.3)).abs() < 1e-15);
        assert!((p[1] - expect(-2.0, -4.0)).abs() < 1e-15);
        assert!((p[2] - expect(0.5, 1e-9)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut opt = Adam::<f64>::new(AdamConfig::default(), &[2]);
        let mut p = vec![1.0, 2.0];
        opt.step(&mut [&mut p], &[&[1.0, -1.0]]).unwrap();
        let before = p.clone();
        let m_before = opt.first_moment[0].clone();
        opt.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        // moments decay, but the bias-corrected first moment still moves the params
        assert!(opt.first_moment[0].iter().zip(&m_before).all(|(a, b)| (a - 0.9 * b).abs() < 1e-15));
        let mut fresh = Adam::<f64>::new(AdamConfig::default(), &[2]);
        let mut q = before.clone();
        fresh.step(&mut [&mut q], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(q, before);
    }
}
