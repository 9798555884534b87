//! Adam with bias correction and optional global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::recognizer::NamedTensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub clip_norm: Option<f64>,
}

/// `√(Σ g²)` over all tensors, accumulated in f64.
pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x as f64 * x as f64)
        .sum::<f64>()
        .sqrt()
}

impl Adam {
    pub fn new(params: &[NamedTensor], clip_norm: Option<f64>) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            clip_norm,
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Returns the pre-clip
    /// gradient norm.
    pub fn update(&mut self, params: &mut [NamedTensor], grads: &[Vec<f32>], lr: f64) -> Result<f64> {
        if grads.len() != params.len() || grads.iter().zip(params.iter()).any(|(g, p)| g.len() != p.tensor.numel()) {
            return Err(Error::Dimension("gradient layout does not match parameters".into()));
        }
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient norm at step {}", self.step + 1)));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grads[k][i] as f64 * scale;
                let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * g;
                let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let delta = lr * (mi / bc1) / ((vi / bc2).sqrt() + EPSILON);
                *w = (*w as f64 - delta) as f32;
            }
        }
        Ok(norm)
    }
}
