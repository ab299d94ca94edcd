//! Classical robust PCA and the generic low-rank/sparse unrolling loop.
//!
//! [`rpca_decompose`] solves principal component pursuit,
//! `min ‖B‖_* + λ‖O‖₁  s.t.  D = B + O`, with the inexact augmented
//! Lagrangian method: alternate singular value thresholding for the
//! low-rank part and soft thresholding for the sparse part while the
//! penalty μ grows geometrically.
//!
//! [`unroll_trace`] runs the three-step iteration that the learned adapter
//! is modelled on, with caller-supplied operators:
//!
//! ```text
//! B^k = prox(D^{k-1} - O^{k-1})
//! O^k = O^{k-1} + D^{k-1} - B^k - ρ·grad(O^{k-1})
//! D^k = B^k + O^k
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SVD_MAX_SWEEPS: usize = 80;

/// Thin SVD `M = U·diag(s)·Vᵀ` with singular values in descending order.
#[derive(Clone, Debug)]
pub struct Svd {
    /// m×r with orthonormal columns (zero columns for zero singular values).
    pub u: Tensor,
    pub s: Vec<f64>,
    /// r×n with orthonormal rows.
    pub vt: Tensor,
}

impl Svd {
    /// `U·diag(f(s))·Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let (m, r) = self.u.dims2().expect("matrix");
        let n = self.vt.shape()[1];
        let u = self.u.data();
        let mut us = vec![0.0; m * r];
        for i in 0..m {
            for j in 0..r {
                us[i * r + j] = u[i * r + j] * f(self.s[j]);
            }
        }
        Tensor::new(&[m, r], us)
            .and_then(|t| t.matmul(&self.vt))
            .unwrap_or_else(|_| Tensor::zeros(&[m, n]))
    }
}

/// One-sided Jacobi (Hestenes) SVD.
pub fn svd(m: &Tensor) -> Result<Svd> {
    let (rows, cols) = m.dims2()?;
    if rows < cols {
        let t = svd(&m.transpose2()?)?;
        return Ok(Svd {
            u: t.vt.transpose2()?,
            s: t.s,
            vt: t.u.transpose2()?,
        });
    }
    // Columns of M stored as contiguous rows of `a` (cols × rows).
    let mut a = m.transpose2()?.into_data();
    let mut v = Tensor::eye(cols).into_data();
    let mut converged = false;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (ap, aq) = (&a[p * rows..(p + 1) * rows], &a[q * rows..(q + 1) * rows]);
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for (x, y) in ap.iter().zip(aq) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let x = a[p * rows + i];
                    let y = a[q * rows + i];
                    a[p * rows + i] = c * x - s * y;
                    a[q * rows + i] = s * x + c * y;
                }
                for i in 0..cols {
                    let x = v[p * cols + i];
                    let y = v[q * cols + i];
                    v[p * cols + i] = c * x - s * y;
                    v[q * cols + i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence(SVD_MAX_SWEEPS));
    }
    // Row j of `v` is column j of V after the rotations above.
    let mut order: Vec<(f64, usize)> = (0..cols)
        .map(|j| {
            let n = a[j * rows..(j + 1) * rows].iter().map(|x| x * x).sum::<f64>().sqrt();
            (n, j)
        })
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0));
    let mut u = vec![0.0; rows * cols];
    let mut vt = vec![0.0; cols * cols];
    let mut s = Vec::with_capacity(cols);
    for (r, &(sigma, j)) in order.iter().enumerate() {
        s.push(sigma);
        if sigma > 0.0 {
            for i in 0..rows {
                u[i * cols + r] = a[j * rows + i] / sigma;
            }
        }
        vt[r * cols..(r + 1) * cols].copy_from_slice(&v[j * cols..(j + 1) * cols]);
    }
    Ok(Svd {
        u: Tensor::new(&[rows, cols], u)?,
        s,
        vt: Tensor::new(&[cols, cols], vt)?,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau >= 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("threshold must be >= 0, got {tau}")))
    }
}

/// Elementwise `sign(m)·max(|m| - tau, 0)`.
pub fn soft_threshold(m: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    Ok(m.map(|x| x.signum() * (x.abs() - tau).max(0.0)))
}

/// Singular value thresholding: soft-threshold the spectrum of `m`.
pub fn svt(m: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    Ok(svd(m)?.reconstruct_with(|s| (s - tau).max(0.0)))
}

pub fn nuclear_norm(m: &Tensor) -> Result<f64> {
    Ok(svd(m)?.s.iter().sum())
}

/// Number of singular values above `tol`.
pub fn numerical_rank(m: &Tensor, tol: f64) -> Result<usize> {
    Ok(svd(m)?.s.iter().filter(|&&s| s > tol).count())
}

#[derive(Clone, Debug)]
pub struct RpcaConfig {
    /// λ of principal component pursuit; `None` means `1/sqrt(max(m, n))`.
    pub sparsity_weight: Option<f64>,
    /// Stop once `‖D - B - O‖_F / ‖D‖_F` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial penalty; `None` means `1.25 / ‖D‖₂`.
    pub mu_init: Option<f64>,
    pub mu_growth: f64,
}

impl Default for RpcaConfig {
    fn default() -> Self {
        RpcaConfig {
            sparsity_weight: None,
            tol: 1e-7,
            max_iter: 500,
            mu_init: None,
            mu_growth: 1.05,
        }
    }
}

impl RpcaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("rpca config: {what}")));
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        if !(self.mu_growth > 1.0) {
            return bad("mu_growth must exceed 1");
        }
        if matches!(self.sparsity_weight, Some(l) if !(l > 0.0)) {
            return bad("sparsity_weight must be positive");
        }
        if matches!(self.mu_init, Some(m) if !(m > 0.0)) {
            return bad("mu_init must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RpcaResult {
    pub low_rank: Tensor,
    pub sparse: Tensor,
    pub iterations: usize,
    /// Relative residual `‖D - B - O‖_F / ‖D‖_F` after every iteration.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

/// Inexact augmented Lagrangian robust PCA. Non-convergence is reported
/// through [`RpcaResult::converged`], not as an error.
pub fn rpca_decompose(d: &Tensor, cfg: &RpcaConfig) -> Result<RpcaResult> {
    cfg.validate()?;
    let (m, n) = d.dims2()?;
    if !d.is_finite() {
        return Err(Error::InvalidArgument("rpca input contains non-finite values".into()));
    }
    let d_norm = d.frobenius();
    if d_norm == 0.0 {
        return Ok(RpcaResult {
            low_rank: Tensor::zeros(&[m, n]),
            sparse: Tensor::zeros(&[m, n]),
            iterations: 1,
            residual_history: vec![0.0],
            converged: true,
        });
    }
    let lambda = cfg.sparsity_weight.unwrap_or(1.0 / (m.max(n) as f64).sqrt());
    let spectral = svd(d)?.s[0];
    let max_abs = d.data().iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let dual = spectral.max(max_abs / lambda);
    let mut y = d.map(|x| x / dual);
    let mut mu = cfg.mu_init.unwrap_or(1.25 / spectral);
    let mu_max = mu * 1e7;
    let mut sparse = Tensor::zeros(&[m, n]);
    let mut low_rank = Tensor::zeros(&[m, n]);
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let inv_mu = 1.0 / mu;
        let target_b = Tensor::from_fn(&[m, n], |i| d.data()[i] - sparse.data()[i] + y.data()[i] * inv_mu);
        low_rank = svt(&target_b, inv_mu)?;
        let target_o = Tensor::from_fn(&[m, n], |i| d.data()[i] - low_rank.data()[i] + y.data()[i] * inv_mu);
        sparse = soft_threshold(&target_o, lambda * inv_mu)?;
        let z = Tensor::from_fn(&[m, n], |i| d.data()[i] - low_rank.data()[i] - sparse.data()[i]);
        for (yv, zv) in y.data_mut().iter_mut().zip(z.data()) {
            *yv += mu * zv;
        }
        mu = (mu * cfg.mu_growth).min(mu_max);
        let res = z.frobenius() / d_norm;
        history.push(res);
        if res < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(RpcaResult {
        low_rank,
        sparse,
        iterations: history.len(),
        residual_history: history,
        converged,
    })
}

/// A low-rank plus sparse test matrix with known components.
#[derive(Clone, Debug)]
pub struct PlantedInstance {
    pub observed: Tensor,
    pub low_rank: Tensor,
    pub sparse: Tensor,
}

/// `U·Vᵀ` with standard normal factors of the given rank, plus spikes of
/// `±magnitude` on a random `density` fraction of entries.
pub fn planted_instance<R: rand::Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rank: usize,
    density: f64,
    magnitude: f64,
    rng: &mut R,
) -> Result<PlantedInstance> {
    let u = Tensor::normal(&[rows, rank], 1.0, rng);
    let v = Tensor::normal(&[rank, cols], 1.0, rng);
    let low_rank = u.matmul(&v)?;
    let total = rows * cols;
    let count = ((density * total as f64).round() as usize).min(total);
    let mut idx: Vec<usize> = (0..total).collect();
    let (picked, _) = rand::seq::SliceRandom::partial_shuffle(&mut idx[..], rng, count);
    let mut sparse = Tensor::zeros(&[rows, cols]);
    for &i in picked.iter() {
        sparse.data_mut()[i] = if rng.random_bool(0.5) { magnitude } else { -magnitude };
    }
    let observed = low_rank.zip_map(&sparse, "planted", |a, b| a + b)?;
    Ok(PlantedInstance {
        observed,
        low_rank,
        sparse,
    })
}

/// The variables of the three-step iteration after `k` iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionState {
    pub d: Tensor,
    pub b: Tensor,
    pub o: Tensor,
    pub k: usize,
}

#[derive(Clone, Debug)]
pub struct UnrollTrace {
    /// State after each iteration `1..=K`.
    pub states: Vec<DecompositionState>,
    /// `‖B^k - B^{k-1}‖_F / ‖D^0‖_F` with `B^0 = 0`.
    pub b_change: Vec<f64>,
    /// `‖B^k‖_* / ‖D^0‖_*`: the gap to the zero fixed point that the
    /// classical SVT/ℓ2 scheme converges to.
    pub residual_history: Vec<f64>,
}

fn check_same(op: &'static str, expect: &Tensor, got: &Tensor) -> Result<()> {
    if expect.shape() == got.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: expect.shape().to_vec(),
            rhs: got.shape().to_vec(),
        })
    }
}

/// Runs `iterations` steps of the low-rank/sparse recursion with the given
/// operators, recording each state.
pub fn unroll_trace(
    d0: &Tensor,
    o0: &Tensor,
    iterations: usize,
    prox: impl Fn(&Tensor) -> Result<Tensor>,
    grad: impl Fn(&Tensor) -> Result<Tensor>,
    rho: f64,
) -> Result<UnrollTrace> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("unroll needs at least one iteration".into()));
    }
    check_same("unroll init", d0, o0)?;
    let scale = d0.frobenius();
    let nuclear_scale = nuclear_norm(d0)?;
    let mut d = d0.clone();
    let mut o = o0.clone();
    let mut b_prev = Tensor::zeros(d0.shape());
    let mut states = Vec::with_capacity(iterations);
    let mut b_change = Vec::with_capacity(iterations);
    let mut residual_history = Vec::with_capacity(iterations);
    for k in 1..=iterations {
        let b = prox(&d.zip_map(&o, "unroll", |x, y| x - y)?)?;
        check_same("prox output", &d, &b)?;
        let g = grad(&o)?;
        check_same("grad output", &o, &g)?;
        let o_next = Tensor::from_fn(d.shape(), |i| {
            o.data()[i] + d.data()[i] - b.data()[i] - rho * g.data()[i]
        });
        let d_next = b.zip_map(&o_next, "unroll", |x, y| x + y)?;
        let change = b.zip_map(&b_prev, "unroll", |x, y| x - y)?.frobenius();
        b_change.push(if scale > 0.0 { change / scale } else { change });
        let gap = nuclear_norm(&b)?;
        residual_history.push(if nuclear_scale > 0.0 { gap / nuclear_scale } else { gap });
        b_prev = b.clone();
        d = d_next;
        o = o_next;
        states.push(DecompositionState {
            d: d.clone(),
            b,
            o: o.clone(),
            k,
        });
    }
    Ok(UnrollTrace {
        states,
        b_change,
        residual_history,
    })
}

pub fn unroll_iterate(
    d0: &Tensor,
    o0: &Tensor,
    iterations: usize,
    prox: impl Fn(&Tensor) -> Result<Tensor>,
    grad: impl Fn(&Tensor) -> Result<Tensor>,
    rho: f64,
) -> Result<DecompositionState> {
    let mut trace = unroll_trace(d0, o0, iterations, prox, grad, rho)?;
    Ok(trace.states.pop().expect("at least one iteration"))
}

/// `∇T = 0`.
pub fn zero_gradient(o: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros(o.shape()))
}

/// Gradient of `½‖O‖²`, i.e. the identity.
pub fn l2_gradient(o: &Tensor) -> Result<Tensor> {
    Ok(o.clone())
}
