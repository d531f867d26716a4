//! Adam with coupled L2 weight decay and a step learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::params::Parameters;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `model` that has a gradient.
    pub fn step<P: Parameters + ?Sized>(&mut self, model: &mut P, grads: &BTreeMap<String, Matrix>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let moments = &mut self.moments;
        model.visit_mut(&mut |name, param| {
            let Some(grad) = grads.get(name) else { return };
            let (m, v) = moments
                .entry(String::from(name))
                .or_insert_with(|| (Matrix::zeros(param.rows(), param.cols()), Matrix::zeros(param.rows(), param.cols())));
            let p = param.as_mut_slice();
            for (i, ((m, v), g)) in m
                .as_mut_slice()
                .iter_mut()
                .zip(v.as_mut_slice())
                .zip(grad.as_slice())
                .enumerate()
            {
                let g = g + wd * p[i];
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                p[i] -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        });
    }
}

/// Base rate multiplied by `gamma` at each milestone epoch passed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl StepSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * libm::pow(self.gamma, passed as f64)
    }
}
