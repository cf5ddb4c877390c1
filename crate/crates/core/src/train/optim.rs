use indexmap::IndexMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{names, ModelParams};

/// Whether weight decay applies to the named tensor. Norm scales and
/// shifts, biases, the cls token and position tables are exempt.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(matches!(leaf, "bias" | "gamma" | "beta" | "pos_embed") || name == names::CLS_TOKEN)
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    /// First and second moments by parameter name.
    pub moments: IndexMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: IndexMap::new() }
    }
}

impl AdamW {
    /// One update of every parameter holding a gradient.
    pub fn step(&mut self, params: &mut ModelParams<f32>, lr: f64, weight_decay: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let (lr32, bc1, bc2_sqrt) = (lr as f32, bc1 as f32, bc2.sqrt() as f32);
        for (name, p) in params.iter_mut() {
            let Some(grad) = p.grad().map(<[f32]>::to_vec) else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())));
            if m.shape() != p.shape() {
                return Err(Error::dim("adamw", format!("{name}: state {:?} vs parameter {:?}", m.shape(), p.shape())));
            }
            let shrink = if decays(name) { 1.0 - (lr * weight_decay) as f32 } else { 1.0 };
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, &g)) in p.data_mut().iter_mut().zip(&grad).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                *w = *w * shrink - lr32 * (m[i] / bc1) / denom;
            }
        }
        Ok(())
    }
}

/// Global gradient norm over every parameter; gradients are scaled down to
/// `max_norm` when above it. Returns the norm before scaling.
pub fn clip_grad_norm(params: &mut ModelParams<f32>, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = (max_norm / (norm + 1e-6)) as f32;
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}

/// Floor of the cosine decay relative to the base rate.
pub const LR_FLOOR: f64 = 1e-6;

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine
/// decay to `LR_FLOOR · base_lr` at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    let floor = LR_FLOOR * base_lr;
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    floor + (base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
