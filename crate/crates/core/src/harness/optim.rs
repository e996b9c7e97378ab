//! RMSprop with global-norm gradient clipping.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

/// `v ← ρ·v + (1 − ρ)·g²`, `θ ← θ − lr · g / (√v + ε)`.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub cfg: RmsPropConfig,
    sq_avg: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(cfg: RmsPropConfig, store: &ParamStore) -> Self {
        Self {
            cfg,
            sq_avg: store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    /// Applies one update. `grads` is indexed like the store; `None` means
    /// a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != self.sq_avg.len() || store.len() != self.sq_avg.len() {
            return Err(Error::InvalidArgument(
                "gradient list does not match the parameter store".into(),
            ));
        }
        let RmsPropConfig { lr, decay, eps } = self.cfg;
        for (i, (g, v)) in grads.iter().zip(&mut self.sq_avg).enumerate() {
            let param = store.get_mut(ParamId(i));
            if !param.trainable {
                continue;
            }
            let theta = param.tensor.data_mut();
            match g {
                Some(g) => {
                    for ((t, &g), v) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = decay * *v + (1.0 - decay) * g * g;
                        *t -= lr * g / (v.sqrt() + eps);
                    }
                }
                None => {
                    // A zero gradient still decays the running average and
                    // leaves θ unchanged.
                    for v in v.iter_mut() {
                        *v *= decay;
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Option<Vec<f64>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
