//! AdamW with decoupled weight decay, global-norm clipping, and EMA.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|p| Tensor::zeros(&p.value.shape)).collect();
        let v = store.iter().map(|p| Tensor::zeros(&p.value.shape)).collect();
        OptimizerState { config, m, v, step: 0 }
    }

    /// One AdamW step over every parameter. `lr_scale` multiplies the base
    /// learning rate (warm-up). NaN gradients abort, naming the parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr_scale: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim("gradient count != parameter count"));
        }
        for (id, grad) in store.ids().zip(grads.iter()) {
            if grad.data.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter '{}'",
                    store.get(id).name
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.lr * lr_scale;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((id, grad), (m, v)) in store
            .ids()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let p = &mut store.get_mut(id).value;
            for i in 0..p.data.len() {
                let g = grad.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * g;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                // decoupled decay acts on the parameter, not the gradient
                p.data[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p.data[i]);
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::config("max_norm must be > 0"));
    }
    let sq: f64 = grads
        .iter()
        .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

/// target <- decay * target + (1 - decay) * source, elementwise.
pub fn ema_update(target: &mut [f64], source: &[f64], decay: f64) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::dim("ema_update length mismatch"));
    }
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::config(format!("ema decay {decay} outside [0,1)")));
    }
    for (t, s) in target.iter_mut().zip(source.iter()) {
        *t = decay * *t + (1.0 - decay) * *s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("p", Tensor::from_vec(vec![v]));
        s
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut store = single_param(3.0);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, &store);
        for _ in 0..5 {
            opt.step(&mut store, &[Tensor::from_vec(vec![0.0])], 1.0).unwrap();
        }
        assert_eq!(store.get(store.find("p").unwrap()).value.data[0], 3.0);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn single_step_closed_form() {
        // g=1, defaults, wd=0: bias correction makes m_hat = v_hat = 1 at
        // step 1, so the update is lr/(1+eps) which is within 1e-9 of lr.
        let mut store = single_param(1.0);
        let cfg = AdamWConfig { lr: 1e-4, weight_decay: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, &store);
        opt.step(&mut store, &[Tensor::from_vec(vec![1.0])], 1.0).unwrap();
        let p = store.get(store.find("p").unwrap()).value.data[0];
        assert!((p - (1.0 - 1e-4)).abs() < 1e-9, "p={p}");
    }

    #[test]
    fn decoupled_decay_closed_form() {
        // zero gradient with zero moments: p multiplied by (1 - lr*wd) per step
        let mut store = single_param(2.0);
        let cfg = AdamWConfig { lr: 1e-2, weight_decay: 0.1, ..Default::default() };
        let mut opt = OptimizerState::new(cfg.clone(), &store);
        let mut expected = 2.0;
        for _ in 0..10 {
            opt.step(&mut store, &[Tensor::from_vec(vec![0.0])], 1.0).unwrap();
            expected *= 1.0 - cfg.lr * cfg.weight_decay;
        }
        let p = store.get(store.find("p").unwrap()).value.data[0];
        assert!((p - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_with_parameter_name() {
        let mut store = single_param(1.0);
        let mut opt = OptimizerState::new(AdamWConfig::default(), &store);
        let err = opt
            .step(&mut store, &[Tensor::from_vec(vec![f64::NAN])], 1.0)
            .unwrap_err();
        assert!(err.to_string().contains("'p'"), "{err}");
    }

    #[test]
    fn clip_below_threshold_unchanged() {
        let mut grads = vec![Tensor::from_vec(vec![0.3, 0.4])];
        let norm = clip_global_norm(&mut grads, 1.0).unwrap();
        assert!((norm - 0.5).abs() < 1e-15);
        assert_eq!(grads[0].data, vec![0.3, 0.4]);
    }

    #[test]
    fn clip_scales_to_unit_norm() {
        let mut grads = vec![Tensor::from_vec(vec![3.0]), Tensor::from_vec(vec![4.0])];
        clip_global_norm(&mut grads, 1.0).unwrap();
        assert!((grads[0].data[0] - 0.6).abs() < 1e-15);
        assert!((grads[1].data[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn ema_decay_zero_copies_source() {
        let mut t = vec![5.0, -1.0];
        ema_update(&mut t, &[1.0, 2.0], 0.0).unwrap();
        assert_eq!(t, vec![1.0, 2.0]);
    }

    #[test]
    fn ema_geometric_series() {
        // target=0, source=1, decay=0.99, 100 steps -> 1 - 0.99^100
        let mut t = vec![0.0];
        for _ in 0..100 {
            ema_update(&mut t, &[1.0], 0.99).unwrap();
        }
        let expected = 1.0 - 0.99f64.powi(100);
        assert!((t[0] - expected).abs() < 1e-12);
        assert!((t[0] - 0.6340).abs() < 5e-4);
    }

    #[test]
    fn ema_near_frozen_bound() {
        let decay = 1.0 - 1e-6;
        let mut t = vec![2.0];
        let before = t[0];
        ema_update(&mut t, &[10.0], decay).unwrap();
        assert!((t[0] - before).abs() <= (1.0 - decay) * (10.0f64 - before).abs() + 1e-15);
    }
}
