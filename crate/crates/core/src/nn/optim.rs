//! First-order optimizers with state keyed by parameter name.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Param, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

pub trait Optimizer<T: Real> {
    /// Advances the step counter; call once before the parameter updates of a step.
    fn begin_step(&mut self);
    fn update(&mut self, name: &str, param: &mut Param<T>);
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }
}

impl<T: Real> Optimizer<T> for Adam<T> {
    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, name: &str, param: &mut Param<T>) {
        let n = param.len();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let t = self.t.max(1);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.epsilon);
        let grad = param.grad.data();
        for (i, w) in param.value.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Heavy-ball SGD: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }
}

impl<T: Real> Optimizer<T> for SgdMomentum<T> {
    fn begin_step(&mut self) {}

    fn update(&mut self, name: &str, param: &mut Param<T>) {
        let n = param.len();
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); n]);
        let mu = T::of(self.momentum);
        let lr = T::of(self.lr);
        let grad = param.grad.data();
        for (i, w) in param.value.data_mut().iter_mut().enumerate() {
            v[i] = mu * v[i] + grad[i];
            *w -= lr * v[i];
        }
    }
}

pub fn build_optimizer<T: Real>(
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
) -> Box<dyn Optimizer<T>> {
    match kind {
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
        OptimizerKind::SgdMomentum => Box::new(SgdMomentum::new(lr, momentum)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::new(Tensor::from_vec(&[2], vec![1.0f64, -1.0]).unwrap());
        p.grad = Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.begin_step();
        opt.update("p", &mut p);
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.value.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = Param::new(Tensor::from_vec(&[1], vec![0.0f64]).unwrap());
        p.grad = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut opt = SgdMomentum::new(0.5, 0.9);
        opt.update("p", &mut p);
        opt.update("p", &mut p);
        // v₁ = 1, v₂ = 1.9
        assert!((p.value.data()[0] + 0.5 * 2.9).abs() < 1e-12);
    }
}
