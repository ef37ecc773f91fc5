//! Adam with optional global-norm gradient clipping.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fm;
use crate::params::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(5.0) }
    }
}

/// First and second moment estimates, aligned with a [`ParamStore`].
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamState { step: 0, v: m.clone(), m }
    }
}

/// One Adam update. Parameters without a gradient are treated as having a
/// zero gradient, so their moments still decay.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, cfg: &AdamConfig, state: &mut AdamState) -> Result<()> {
    for (id, g) in grads.iter() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NanGradient(store.param(id).name.to_string()));
        }
    }
    let clip = match cfg.clip_norm {
        Some(c) => {
            let n = grads.global_norm();
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let g = grads.get(id);
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let w = &mut store.get_mut(id).data;
        for k in 0..w.len() {
            let gk = g.map_or(0.0, |g| g[k]) * clip;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            w[k] -= cfg.lr * mh / (fm::sqrt(vh) + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0]));
        let mut st = AdamState::new(&store);
        let mut g = Gradients::with_len(1);
        g.accumulate(id, &[0.0, 0.0]);
        adam_step(&mut store, &g, &AdamConfig::default(), &mut st).unwrap();
        assert_eq!(store.get(id).data, vec![1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_moves_by_lr_per_step() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0));
        let mut st = AdamState::new(&store);
        let cfg = AdamConfig { clip_norm: None, ..AdamConfig::default() };
        let mut g = Gradients::with_len(1);
        g.accumulate(id, &[0.37]);
        let mut prev = 0.0;
        for _ in 0..2000 {
            adam_step(&mut store, &g, &cfg, &mut st).unwrap();
            let now = store.get(id).item();
            let step = prev - now;
            assert!((step - cfg.lr).abs() < 1e-3 * cfg.lr, "step {step}");
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("decoder.w", Tensor::scalar(0.0));
        let mut st = AdamState::new(&store);
        let mut g = Gradients::with_len(1);
        g.accumulate(id, &[f64::NAN]);
        let err = adam_step(&mut store, &g, &AdamConfig::default(), &mut st).unwrap_err();
        assert_eq!(err, Error::NanGradient("decoder.w".into()));
    }

    #[test]
    fn frozen_params_are_not_updated() {
        let mut store = ParamStore::new();
        let id = store.add_frozen("anchors", Tensor::scalar(1.0));
        let mut st = AdamState::new(&store);
        let mut g = Gradients::with_len(1);
        g.accumulate(id, &[1.0]);
        adam_step(&mut store, &g, &AdamConfig::default(), &mut st).unwrap();
        assert_eq!(store.get(id).item(), 1.0);
    }
}
