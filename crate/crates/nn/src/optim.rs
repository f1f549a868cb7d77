//! First-order optimizers operating on a [`ParamSet`] with aligned gradients.

use serde::{Deserialize, Serialize};

use crate::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Rmsprop,
}

pub trait Optimizer {
    /// Apply one update using `grads` aligned with `params`.
    fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]);
    fn learning_rate(&self) -> f64;
}

pub fn build(kind: OptimizerKind, lr: f64) -> Box<dyn Optimizer + Send> {
    match kind {
        OptimizerKind::Sgd => Box::new(Sgd { lr }),
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
        OptimizerKind::Rmsprop => Box::new(RmsProp::new(lr)),
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= self.lr * d;
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * d;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * d * d;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// RMSprop: `avg = decay·avg + (1−decay)·g²`, `w −= lr·g / sqrt(avg + eps)`.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    sq: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            decay: 0.9,
            eps: 1e-8,
            sq: Vec::new(),
        }
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        if self.sq.is_empty() {
            self.sq = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let sq = &mut self.sq[i];
            for (j, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                sq[j] = self.decay * sq[j] + (1.0 - self.decay) * d * d;
                *w -= self.lr * d / (sq[j] + self.eps).sqrt();
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}
