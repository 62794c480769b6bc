//! Stochastic gradient descent with momentum and per-group learning-rate
//! factors.

use crate::nn::{Gradients, Network, ParamGroup};

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub global_lr: f32,
    pub momentum: f32,
    /// Multiplier applied to the head's weights and biases.
    pub head_lr_factor: f32,
    velocity: Vec<Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(net: &Network, global_lr: f32, momentum: f32, head_lr_factor: f32) -> Self {
        Self {
            global_lr,
            momentum,
            head_lr_factor,
            velocity: net.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn effective_lr(&self, group: ParamGroup) -> f32 {
        match group {
            ParamGroup::Transferred => self.global_lr,
            ParamGroup::Head => self.global_lr * self.head_lr_factor,
        }
    }

    /// `v <- momentum * v - lr * g`, `w <- w + v`.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        for ((param, grad), vel) in net.params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let lr = match param.group {
                ParamGroup::Transferred => self.global_lr,
                ParamGroup::Head => self.global_lr * self.head_lr_factor,
            };
            for ((w, g), v) in param.data.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = self.momentum * *v - lr * g;
                *w += *v;
            }
        }
    }
}
