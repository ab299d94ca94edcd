//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::param::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_init: 1e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            total_steps: 2000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > self.lr_min && self.lr_min > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need lr_init > lr_min > 0, got {} and {}",
                self.lr_init, self.lr_min
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("eps must be > 0 and weight_decay >= 0".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument("total_steps must be positive".into()));
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_init − lr_min)(1 + cos(π·step/total_steps))`.
pub fn cosine_lr(step: usize, cfg: &OptimConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} is past the schedule end {}",
            cfg.total_steps
        )));
    }
    if step == 0 {
        return Ok(cfg.lr_init);
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.total_steps as f64).cos());
    Ok((cfg.lr_min + w * (cfg.lr_init - cfg.lr_min)).min(cfg.lr_init))
}

/// First and second moment estimates, indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(params: usize) -> Self {
        AdamW {
            step: 0,
            m: vec![None; params],
            v: vec![None; params],
        }
    }

    /// One update of every unfrozen parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64, cfg: &OptimConfig) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if let Some(g) = grads.get(id) {
                if !g.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient for '{}'",
                        store.get(id).name
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            if store.get(id).frozen {
                continue;
            }
            let i = id.index();
            let shape = g.shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.value_mut(id);
            let decay = 1.0 - lr * cfg.weight_decay;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *pv *= decay;
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Graph;

    fn quadratic_grads(store: &ParamStore, target: f64) -> Grads {
        let mut g = Graph::new(store);
        let id = store.find("x").unwrap();
        let x = g.param(id);
        let d = g.add_scalar(x, -target);
        let sq = g.mul(d, d).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        g.grads()
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(0.0));
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(1);
        for _ in 0..200 {
            let grads = quadratic_grads(&store, 1.5);
            opt.update(&mut store, &grads, 0.05, &cfg).unwrap();
        }
        let x = store.value(store.find("x").unwrap()).item();
        assert!((x - 1.5).abs() < 1e-3, "{x}");
    }

    #[test]
    fn frozen_and_zero_grad_params_stay_put() {
        let mut store = ParamStore::new();
        let a = store.add("x", Tensor::scalar(0.25));
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(1);
        let zero = {
            let mut g = Graph::new(&store);
            let x = g.param(a);
            let l = g.mul_scalar(x, 0.0);
            g.backward(l).unwrap();
            g.grads()
        };
        opt.update(&mut store, &zero, 1e-2, &cfg).unwrap();
        assert_eq!(store.value(a).item(), 0.25);
        let grads = quadratic_grads(&store, 3.0);
        store.set_frozen(a, true);
        opt.update(&mut store, &grads, 1e-2, &OptimConfig::default()).unwrap();
        assert_eq!(store.value(a).item(), 0.25);
    }

    #[test]
    fn nan_gradients_abort() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(f64::NAN));
        let grads = quadratic_grads(&store, 0.0);
        let err = AdamW::new(1).update(&mut store, &grads, 1e-3, &OptimConfig::default());
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimConfig {
            total_steps: 1000,
            ..OptimConfig::default()
        };
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 1e-4);
        assert_eq!(cosine_lr(1000, &cfg).unwrap(), cfg.lr_min);
        assert!((cosine_lr(500, &cfg).unwrap() - (cfg.lr_init + cfg.lr_min) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(1001, &cfg).is_err());
    }

    #[test]
    fn invalid_rates_are_rejected() {
        let bad = OptimConfig {
            lr_min: 1e-3,
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(OptimConfig::default().validate().is_ok());
    }
}
