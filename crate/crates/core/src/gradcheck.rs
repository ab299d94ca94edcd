//! Central-difference verification of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::param::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, tol: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct InputError {
    pub index: usize,
    /// `max|analytic - numeric| / max(max|analytic|, max|numeric|)` over the tensor.
    pub rel_err: f64,
    pub abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub inputs: Vec<InputError>,
    pub tol: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|e| e.rel_err < self.tol)
    }
}

/// A scalar function of tensors together with a claimed gradient.
pub trait Differentiable {
    fn value(&self, inputs: &[Tensor]) -> Result<f64>;
    fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>>;
}

/// Wraps a function that records its computation on a fresh tape.
pub struct TapeFn<F>(pub F);

impl<F> Differentiable for TapeFn<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (self.0)(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    }

    fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let out = (self.0)(&mut tape, &vars)?;
        tape.backward(out)?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    }
}

/// A loss built from a parameter store, differentiated with respect to a
/// chosen subset of its parameters.
pub struct StoreFn<'a, F> {
    pub store: &'a ParamStore,
    pub ids: Vec<ParamId>,
    pub f: F,
}

impl<'a, F> StoreFn<'a, F>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    pub fn new(store: &'a ParamStore, ids: Vec<ParamId>, f: F) -> Self {
        StoreFn { store, ids, f }
    }

    /// The current values of the selected parameters.
    pub fn inputs(&self) -> Vec<Tensor> {
        self.ids.iter().map(|&id| self.store.value(id).clone()).collect()
    }

    fn local(&self, inputs: &[Tensor]) -> Result<ParamStore> {
        let mut local = self.store.clone();
        for (&id, value) in self.ids.iter().zip(inputs) {
            local.assign(id, value.clone())?;
            local.set_frozen(id, false);
        }
        Ok(local)
    }
}

impl<F> Differentiable for StoreFn<'_, F>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        let local = self.local(inputs)?;
        let mut g = Graph::new(&local);
        let out = (self.f)(&mut g)?;
        Ok(g.value(out).item())
    }

    fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let local = self.local(inputs)?;
        let mut g = Graph::new(&local);
        let out = (self.f)(&mut g)?;
        g.backward(out)?;
        let grads = g.grads();
        Ok(self
            .ids
            .iter()
            .zip(inputs)
            .map(|(&id, t)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    }
}

pub fn grad_check(f: &dyn Differentiable, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradReport> {
    let analytic = f.gradient(inputs)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (idx, grad) in analytic.iter().enumerate() {
        let mut max_diff = 0.0f64;
        let mut scale = 0.0f64;
        for j in 0..work[idx].numel() {
            let orig = work[idx].data()[j];
            work[idx].data_mut()[j] = orig + cfg.eps;
            let fp = f.value(&work)?;
            work[idx].data_mut()[j] = orig - cfg.eps;
            let fm = f.value(&work)?;
            work[idx].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = grad.data()[j];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let rel_err = if scale > 0.0 { max_diff / scale } else { 0.0 };
        report.push(InputError {
            index: idx,
            rel_err,
            abs_err: max_diff,
        });
    }
    Ok(GradReport {
        inputs: report,
        tol: cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::from_fn(&[6], |i| i as f64 - 2.5);
        let f = TapeFn(move |t: &mut Tape, v: &[Var]| {
            let c = t.constant(w.clone());
            let p = t.mul(v[0], c)?;
            Ok(t.sum(p))
        });
        let x = Tensor::from_fn(&[6], |i| (i as f64).sin());
        let r = grad_check(&f, &[x], GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_err() < 1e-9, "{r:?}");
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[20], -1.0, 1.0, &mut rng).map(|v| if v.abs() < 0.01 { 0.5 } else { v });
        let f = TapeFn(|t: &mut Tape, v: &[Var]| {
            let r = t.relu(v[0]);
            Ok(t.sum(r))
        });
        assert!(grad_check(&f, &[x], GradCheckConfig::default()).unwrap().passed());
    }

    struct WrongGradient;

    impl Differentiable for WrongGradient {
        fn value(&self, inputs: &[Tensor]) -> Result<f64> {
            Ok(inputs[0].data().iter().map(|x| x * x).sum())
        }
        fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
            // off by a factor of two
            Ok(vec![inputs[0].clone()])
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let x = Tensor::from_fn(&[5], |i| i as f64 + 1.0);
        let r = grad_check(&WrongGradient, &[x], GradCheckConfig::default()).unwrap();
        assert!(!r.passed());
    }
}
