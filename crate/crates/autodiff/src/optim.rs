//! SGD with momentum and coupled weight decay, plus the cosine schedule.

use crate::checkpoint::NamedTensor;
use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tape::Gradients;

/// `lr(t) = 0.5 * lr0 * (1 + cos(pi * t / total))`.
pub fn cosine_lr(t: f64, total: f64, lr0: f64) -> f64 {
    if total <= 0.0 {
        return lr0;
    }
    let t = t.clamp(0.0, total);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t / total).cos())
}

#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum: T::from_f64(momentum), weight_decay: T::from_f64(weight_decay), velocity: Vec::new() }
    }

    /// `v <- mu * v + g + wd * w; w <- w - lr * v` for every parameter with a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>, lr: f64) {
        let lr = T::from_f64(lr);
        if self.velocity.len() < params.len() {
            self.velocity.resize_with(params.len(), || None);
        }
        for id in params.ids().collect::<Vec<_>>() {
            if !params.requires_grad(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let w = params.get_mut(id).data_mut();
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); w.len()]);
            for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }

    pub fn to_named(&self, params: &ParamSet<T>) -> Vec<NamedTensor> {
        self.velocity
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.as_ref().map(|v| (i, v)))
            .map(|(i, v)| {
                let id = params.ids().nth(i).expect("velocity index within parameter set");
                NamedTensor {
                    name: params.name(id).to_string(),
                    shape: params.get(id).shape().to_vec(),
                    data: v.iter().map(|x| x.as_f64() as f32).collect(),
                }
            })
            .collect()
    }

    pub fn load_named(&mut self, params: &ParamSet<T>, named: &[NamedTensor]) -> Result<()> {
        self.velocity = vec![None; params.len()];
        for n in named {
            let id = params
                .id_of(&n.name)
                .ok_or_else(|| NnError::Checkpoint(format!("momentum buffer for unknown tensor {}", n.name)))?;
            if params.get(id).numel() != n.data.len() {
                return Err(NnError::Checkpoint(format!("momentum buffer {} has wrong length", n.name)));
            }
            self.velocity[id.index()] = Some(n.data.iter().map(|&x| T::from_f64(f64::from(x))).collect());
        }
        Ok(())
    }
}
