use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::diff::{DiffError, Gradients, ParamStore, Scalar};

/// RMSProp: `s ← ρ s + (1 - ρ) g²`, `θ ← θ - lr · g / (√s + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T> {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    square_avg: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(lr: f64, alpha: f64, eps: f64) -> Self {
        RmsProp { lr, alpha, eps, square_avg: BTreeMap::new() }
    }

    /// Running squared-gradient averages, keyed by parameter name.
    pub fn state(&self) -> &BTreeMap<String, Vec<T>> {
        &self.square_avg
    }

    pub fn set_state(&mut self, name: &str, values: Vec<T>) {
        self.square_avg.insert(name.to_string(), values);
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<(), DiffError> {
        let lr = T::from_f64_lossy(self.lr);
        let rho = T::from_f64_lossy(self.alpha);
        let one_minus = T::one() - rho;
        let eps = T::from_f64_lossy(self.eps);
        for p in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let g = grads.get(p.name()).ok_or_else(|| DiffError::UnknownParam(p.name().to_string()))?;
            let s = self.square_avg.entry(p.name().to_string()).or_insert_with(|| vec![T::zero(); p.len()]);
            if s.len() != p.len() {
                return Err(DiffError::ParamShape { name: p.name().to_string(), expected: p.shape().to_vec(), found: vec![s.len()] });
            }
            for ((w, &gi), si) in p.values_mut().iter_mut().zip(g.data()).zip(s.iter_mut()) {
                *si = rho * *si + one_minus * gi * gi;
                *w = *w - lr * gi / (si.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so that their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().to_f64_lossless();
    if norm > max_norm && norm.is_finite() {
        grads.scale(T::from_f64_lossy(max_norm / norm));
    }
    norm
}
