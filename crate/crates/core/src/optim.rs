//! Adam with bias correction and step learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("Adam betas must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam step in place. `lr` overrides the configured rate (for
/// schedules).
pub fn adam_update(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid("parameter, gradient and moment lists differ in length"));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(invalid(format!(
                "shape mismatch in Adam update: {:?} vs {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i].data();
        let mut m = std::mem::replace(&mut state.m[i], Tensor::scalar(0.0)).into_vec();
        let mut v = std::mem::replace(&mut state.v[i], Tensor::scalar(0.0)).into_vec();
        let mut p = std::mem::replace(&mut params[i], Tensor::scalar(0.0));
        let shape = p.shape().to_vec();
        let mut pv = p.into_vec();
        for j in 0..pv.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            pv[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
        p = Tensor::new(shape.clone(), pv);
        params[i] = p;
        state.m[i] = Tensor::new(shape.clone(), m);
        state.v[i] = Tensor::new(shape, v);
    }
    Ok(())
}

/// Piecewise-constant decay: the rate is multiplied by `factor` at each
/// milestone iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub milestones: Vec<u64>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant() -> Self {
        Self {
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    pub fn step(milestones: Vec<u64>, factor: f64) -> Self {
        Self { milestones, factor }
    }

    /// Rate in effect at (zero-based) iteration `iteration`.
    pub fn lr_at(&self, base: f64, iteration: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        base * self.factor.powi(passed as i32)
    }

    /// Milestones scaled by `num / den` (e.g. to track a changed iteration
    /// count).
    pub fn scaled(&self, num: u64, den: u64) -> Self {
        Self {
            milestones: self.milestones.iter().map(|m| m * num / den).collect(),
            factor: self.factor,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_signed_learning_rate() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, 2.0, 3.0])];
        let g = vec![Tensor::new(vec![3], vec![0.5, -2.0, 0.0])];
        let mut s = AdamState::new(&p);
        adam_update(&mut p, &g, &mut s, 0.1, 0.9, 0.999).unwrap();
        let want = [1.0 - 0.1 * 0.5 / (0.5 + ADAM_EPS), 2.0 + 0.1 * 2.0 / (2.0 + ADAM_EPS), 3.0];
        for (a, b) in p[0].data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_milestones() {
        let s = LrSchedule::step(vec![22_000, 38_000], 0.4);
        assert_eq!(s.lr_at(1e-3, 0), 1e-3);
        assert_eq!(s.lr_at(1e-3, 21_999), 1e-3);
        assert_eq!(s.lr_at(1e-3, 22_000), 1e-3 * 0.4);
        assert_eq!(s.lr_at(1e-3, 40_000), 1e-3 * 0.4f64.powi(2));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(&p);
        assert!(adam_update(&mut p, &[Tensor::zeros(&[3])], &mut s, 0.1, 0.9, 0.999).is_err());
    }
}
