//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; node indices are a
//! topological order by construction, so [`Tape::backward`] walks the
//! nodes in reverse index order and visits each exactly once. Gradients
//! flow only into nodes whose `requires_grad` flag is set, which is how
//! frozen parameters are kept out of the computation entirely.
//!
//! There is no implicit broadcasting: binary ops require equal shapes,
//! and scalar scaling goes through [`Tape::mul_scalar`] (constant) or
//! [`Tape::scale`] (a differentiable one-element tensor).

use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Scale {
        s: Var,
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    AddRowBias {
        x: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        cols: Vec<f64>,
    },
    MaxPool3 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Resize {
        x: Var,
        rows: Vec<Lerp>,
        cols: Vec<Lerp>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        target: Vec<f64>,
        eps: f64,
    },
}

/// Two-tap linear interpolation weights for one output coordinate.
#[derive(Clone, Copy, Debug)]
struct Lerp {
    i0: usize,
    i1: usize,
    w1: f64,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that receives a gradient on backward.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// requires a gradient and was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v), g.to_vec()).expect("grad shape matches value"))
    }

    /// Clears all gradients so that [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// `s·x` where `s` is a one-element tensor on the tape.
    pub fn scale(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(mismatch("scale", self.value(s), self.value(x)));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        let rg = self.rg(&[s, x]);
        Ok(self.push(value, rg, Op::Scale { s, x }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            tb,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::MatMul { a, b, tb }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose2()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Sigmoid(a))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[r, c], out)?, rg, Op::SoftmaxRows(a)))
    }

    /// Layer normalization over the last dimension of a T×d matrix.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (t, d) = self.value(x).dims2()?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(mismatch("layer_norm", self.value(x), self.value(gain)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; t * d];
        let mut rstd = vec![0.0; t];
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let op = Op::LayerNormRows {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(&[t, d], out)?, rg, op))
    }

    /// Adds a length-d bias vector to every row of a T×d matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (t, d) = self.value(x).dims2()?;
        if self.shape(b) != [d] {
            return Err(mismatch("add_row_bias", self.value(x), self.value(b)));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..t {
            add_into(&mut out[i * d..(i + 1) * d], bias);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(&[t, d], out)?, rg, Op::AddRowBias { x, b }))
    }

    /// Stride-1 cross-correlation with zero padding that preserves H×W.
    ///
    /// `x` is C_in×H×W, `w` is C_out×C_in×k×k with odd k, `b` has C_out entries.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let ws = self.shape(w).to_vec();
        let [cout, wcin, kh, kw] = ws[..] else {
            return Err(mismatch("conv2d", self.value(x), self.value(w)));
        };
        if wcin != cin {
            return Err(mismatch("conv2d", self.value(x), self.value(w)));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d needs an odd square kernel, got {kh}×{kw}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv2d bias", self.value(w), self.value(b)));
            }
        }
        let k = kh;
        let hw = h * wd;
        let cols = if k == 1 {
            self.value(x).data().to_vec()
        } else {
            im2col(self.value(x).data(), cin, h, wd, k)
        };
        let mut out = vec![0.0; cout * hw];
        if let Some(b) = b {
            for (o, &bv) in self.value(b).data().iter().enumerate() {
                out[o * hw..(o + 1) * hw].fill(bv);
            }
        }
        gemm(
            cout,
            cin * k * k,
            hw,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out,
            1.0,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let keep_cols = rg && self.nodes[w.0].requires_grad;
        let op = Op::Conv2d {
            x,
            w,
            b,
            k,
            cols: if keep_cols { cols } else { Vec::new() },
        };
        Ok(self.push(Tensor::new(&[cout, h, wd], out)?, rg, op))
    }

    /// 3×3 stride-1 max pooling per channel; the window is clipped at the
    /// frame, which equals replicate padding for a max.
    pub fn max_pool3(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; c * h * w];
        let mut argmax = vec![0; c * h * w];
        for ch in 0..c {
            let base = ch * h * w;
            for i in 0..h {
                for j in 0..w {
                    let mut best = base + i * w + j;
                    for ii in i.saturating_sub(1)..(i + 2).min(h) {
                        for jj in j.saturating_sub(1)..(j + 2).min(w) {
                            let idx = base + ii * w + jj;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out[base + i * w + j] = src[best];
                    argmax[base + i * w + j] = best;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, h, w], out)?, rg, Op::MaxPool3 { x, argmax }))
    }

    /// 3×3 min pooling, as `-max_pool3(-x)`.
    pub fn min_pool3(&mut self, x: Var) -> Result<Var> {
        let n = self.neg(x);
        let m = self.max_pool3(n)?;
        Ok(self.neg(m))
    }

    /// Nearest-neighbour 2× spatial upsampling of a C×H×W map.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[ch * oh * ow + i * ow + j] = src[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, rg, Op::Upsample2(x)))
    }

    /// Bilinear resize of a C×H×W map with half-pixel centres.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("resize target must be non-empty".into()));
        }
        let rows = lerp_table(h, out_h);
        let cols = lerp_table(w, out_w);
        let out = resize_forward(self.value(x).data(), c, h, w, &rows, &cols);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, out_h, out_w], out)?, rg, Op::Resize { x, rows, cols }))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (t, d) = self.value(x).dims2()?;
        if len == 0 || start + len > d {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{} out of range for width {d}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(t * len);
        for i in 0..t {
            out.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[t, len], out)?, rg, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let (t, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pt, pd) = self.value(p).dims2()?;
            if pt != t {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
            widths.push(pd);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(t * total);
        for i in 0..t {
            for (&p, &pd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * pd..(i + 1) * pd]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&[t, total], out)?, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Mean(x))
    }

    /// Mean binary cross-entropy between probabilities `p` and a constant
    /// target, with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: &Tensor, eps: f64) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(mismatch("bce", self.value(p), target));
        }
        let n = target.numel() as f64;
        let loss = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &t)| {
                let q = pv.clamp(eps, 1.0 - eps);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[p]);
        let op = Op::Bce {
            p,
            target: target.data().to_vec(),
            eps,
        };
        Ok(self.push(Tensor::scalar(loss), rg, op))
    }

    /// Multi-head scaled dot-product attention over T×d inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.value(q).dims2()?;
        for other in [k, v] {
            if self.shape(other) != [t, d] {
                return Err(mismatch("attention", self.value(q), self.value(other)));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.slice_cols(q, h * dh, dh)?,
                    self.slice_cols(k, h * dh, dh)?,
                    self.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = self.matmul_t(qh, kh)?;
            let scores = self.mul_scalar(scores, scale);
            let weights = self.softmax_rows(scores)?;
            outs.push(self.matmul(weights, vh)?);
        }
        if heads == 1 {
            Ok(outs[0])
        } else {
            self.concat_cols(&outs)
        }
    }

    /// Populates gradients of `loss` with respect to every reachable value
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::DetachedGraph);
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            propagate(before, node, &g);
            node.grad = Some(g);
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output columns `j` whose source column `j + off` lies inside `0..w`.
fn valid_cols(w: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (w as isize - off).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let off = kj as isize - r;
                let (lo, hi) = valid_cols(w, off);
                for i in 0..h {
                    let si = i as isize + ki as isize - r;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let base = c * hw + si as usize * w;
                    let src =
                        &x[(base as isize + lo as isize + off) as usize..(base as isize + hi as isize + off) as usize];
                    dst[i * w + lo..i * w + hi].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], dx: &mut [f64], cin: usize, h: usize, w: usize, k: usize) {
    let r = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let off = kj as isize - r;
                let (lo, hi) = valid_cols(w, off);
                for i in 0..h {
                    let si = i as isize + ki as isize - r;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let base = (c * hw + si as usize * w) as isize + off;
                    let dst = &mut dx[(base + lo as isize) as usize..(base + hi as isize) as usize];
                    for (d, s) in dst.iter_mut().zip(&src[i * w + lo..i * w + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn lerp_table(src: usize, dst: usize) -> Vec<Lerp> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let w1 = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            Lerp { i0, i1, w1 }
        })
        .collect()
}

fn resize_forward(x: &[f64], c: usize, h: usize, w: usize, rows: &[Lerp], cols: &[Lerp]) -> Vec<f64> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (i, ry) in rows.iter().enumerate() {
            for (j, rx) in cols.iter().enumerate() {
                let top = src[ry.i0 * w + rx.i0] * (1.0 - rx.w1) + src[ry.i0 * w + rx.i1] * rx.w1;
                let bot = src[ry.i1 * w + rx.i0] * (1.0 - rx.w1) + src[ry.i1 * w + rx.i1] * rx.w1;
                out[ch * oh * ow + i * ow + j] = top * (1.0 - ry.w1) + bot * ry.w1;
            }
        }
    }
    out
}

/// Allocates (if needed) and returns the gradient buffer of an input that
/// requires one.
fn grad_buf(nodes: &mut [Node], v: Var) -> Option<&mut Vec<f64>> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.numel();
    Some(n.grad.get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(before: &mut [Node], node: &Node, g: &[f64]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = grad_buf(before, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_buf(before, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = grad_buf(before, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_buf(before, *b) {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            let av = before[a.0].value.data().to_vec();
            let bv = before[b.0].value.data().to_vec();
            if let Some(ga) = grad_buf(before, *a) {
                for ((d, gi), bi) in ga.iter_mut().zip(g).zip(&bv) {
                    *d += gi * bi;
                }
            }
            if let Some(gb) = grad_buf(before, *b) {
                for ((d, gi), ai) in gb.iter_mut().zip(g).zip(&av) {
                    *d += gi * ai;
                }
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = grad_buf(before, *a) {
                add_into(ga, g);
            }
        }
        Op::MulScalar(a, c) => {
            if let Some(ga) = grad_buf(before, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
        }
        Op::Scale { s, x } => {
            let sv = before[s.0].value.item();
            let ds: f64 = before[x.0].value.data().iter().zip(g).map(|(x, g)| x * g).sum();
            if let Some(gs) = grad_buf(before, *s) {
                gs[0] += ds;
            }
            if let Some(gx) = grad_buf(before, *x) {
                gx.iter_mut().zip(g).for_each(|(d, gi)| *d += sv * gi);
            }
        }
        Op::MatMul { a, b, tb } => {
            let (m, k) = before[a.0].value.dims2().expect("matrix");
            let n = node.value.shape()[1];
            if before[a.0].requires_grad {
                // dA = G·op(B)ᵀ
                let bv = before[b.0].value.data().to_vec();
                let ga = grad_buf(before, *a).expect("requires grad");
                gemm(m, n, k, g, false, &bv, !tb, ga, 1.0);
            }
            if before[b.0].requires_grad {
                let av = before[a.0].value.data().to_vec();
                let gb = grad_buf(before, *b).expect("requires grad");
                if *tb {
                    // B is n×k: dB = Gᵀ·A
                    gemm(n, m, k, g, true, &av, false, gb, 1.0);
                } else {
                    // B is k×n: dB = Aᵀ·G
                    gemm(k, m, n, &av, true, g, false, gb, 1.0);
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = before[a.0].value.dims2().expect("matrix");
            if let Some(ga) = grad_buf(before, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = grad_buf(before, *a) {
                add_into(ga, g);
            }
        }
        Op::Relu(a) => {
            let av = before[a.0].value.data().to_vec();
            if let Some(ga) = grad_buf(before, *a) {
                for ((d, gi), x) in ga.iter_mut().zip(g).zip(&av) {
                    if *x > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let av = before[a.0].value.data().to_vec();
            if let Some(ga) = grad_buf(before, *a) {
                for ((d, gi), &x) in ga.iter_mut().zip(g).zip(&av) {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *d += gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = grad_buf(before, *a) {
                for ((d, gi), s) in ga.iter_mut().zip(g).zip(out) {
                    *d += gi * s * (1.0 - s);
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let c = node.value.shape()[1];
            if let Some(ga) = grad_buf(before, *a) {
                for ((yr, gr), dr) in out.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += y * (gi - dot);
                    }
                }
            }
        }
        Op::LayerNormRows {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = node.value.shape()[1];
            let gamma = before[gain.0].value.data().to_vec();
            if let Some(gg) = grad_buf(before, *gain) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((acc, gi), h) in gg.iter_mut().zip(gr).zip(hr) {
                        *acc += gi * h;
                    }
                }
            }
            if let Some(gb) = grad_buf(before, *bias) {
                for gr in g.chunks(d) {
                    add_into(gb, gr);
                }
            }
            if let Some(gx) = grad_buf(before, *x) {
                let nd = d as f64;
                let mut dh = vec![0.0; d];
                for (row, ((gr, hr), dr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    for j in 0..d {
                        dh[j] = gr[j] * gamma[j];
                    }
                    let s1: f64 = dh.iter().sum();
                    let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    let r = rstd[row];
                    for j in 0..d {
                        dr[j] += r / nd * (nd * dh[j] - s1 - hr[j] * s2);
                    }
                }
            }
        }
        Op::AddRowBias { x, b } => {
            let d = node.value.shape()[1];
            if let Some(gx) = grad_buf(before, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = grad_buf(before, *b) {
                for gr in g.chunks(d) {
                    add_into(gb, gr);
                }
            }
        }
        Op::Conv2d { x, w, b, k, cols } => {
            let (cin, h, wd) = before[x.0].value.dims3().expect("map");
            let cout = node.value.shape()[0];
            let hw = h * wd;
            let kk = cin * k * k;
            if let Some(b) = b {
                if let Some(gb) = grad_buf(before, *b) {
                    for (o, acc) in gb.iter_mut().enumerate() {
                        *acc += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            if before[w.0].requires_grad {
                let gw = grad_buf(before, *w).expect("requires grad");
                gemm(cout, hw, kk, g, false, cols, true, gw, 1.0);
            }
            if before[x.0].requires_grad {
                let wv = before[w.0].value.data().to_vec();
                if *k == 1 {
                    let gx = grad_buf(before, *x).expect("requires grad");
                    gemm(cin, cout, hw, &wv, true, g, false, gx, 1.0);
                } else {
                    let mut dcols = vec![0.0; kk * hw];
                    gemm(kk, cout, hw, &wv, true, g, false, &mut dcols, 0.0);
                    let gx = grad_buf(before, *x).expect("requires grad");
                    col2im_add(&dcols, gx, cin, h, wd, *k);
                }
            }
        }
        Op::MaxPool3 { x, argmax } => {
            if let Some(gx) = grad_buf(before, *x) {
                for (gi, &src) in g.iter().zip(argmax) {
                    gx[src] += gi;
                }
            }
        }
        Op::Upsample2(x) => {
            let (c, h, w) = before[x.0].value.dims3().expect("map");
            let (oh, ow) = (2 * h, 2 * w);
            if let Some(gx) = grad_buf(before, *x) {
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            gx[ch * h * w + (i / 2) * w + j / 2] += g[ch * oh * ow + i * ow + j];
                        }
                    }
                }
            }
        }
        Op::Resize { x, rows, cols } => {
            let (c, h, w) = before[x.0].value.dims3().expect("map");
            let (oh, ow) = (rows.len(), cols.len());
            if let Some(gx) = grad_buf(before, *x) {
                for ch in 0..c {
                    let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for (i, ry) in rows.iter().enumerate() {
                        for (j, rx) in cols.iter().enumerate() {
                            let gv = g[ch * oh * ow + i * ow + j];
                            let top = gv * (1.0 - ry.w1);
                            let bot = gv * ry.w1;
                            dst[ry.i0 * w + rx.i0] += top * (1.0 - rx.w1);
                            dst[ry.i0 * w + rx.i1] += top * rx.w1;
                            dst[ry.i1 * w + rx.i0] += bot * (1.0 - rx.w1);
                            dst[ry.i1 * w + rx.i1] += bot * rx.w1;
                        }
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            let d = before[x.0].value.shape()[1];
            let len = node.value.shape()[1];
            if let Some(gx) = grad_buf(before, *x) {
                for (i, gr) in g.chunks(len).enumerate() {
                    add_into(&mut gx[i * d + start..i * d + start + len], gr);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let pd = before[p.0].value.shape()[1];
                if let Some(gp) = grad_buf(before, p) {
                    for (i, dr) in gp.chunks_mut(pd).enumerate() {
                        add_into(dr, &g[i * total + offset..i * total + offset + pd]);
                    }
                }
                offset += pd;
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = grad_buf(before, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            let n = before[x.0].value.numel() as f64;
            if let Some(gx) = grad_buf(before, *x) {
                gx.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::Bce { p, target, eps } => {
            let pv = before[p.0].value.data().to_vec();
            let n = pv.len() as f64;
            if let Some(gp) = grad_buf(before, *p) {
                for ((d, &q), &t) in gp.iter_mut().zip(&pv).zip(target) {
                    // the clamp is flat outside [eps, 1 - eps]
                    if q > *eps && q < 1.0 - eps {
                        *d += g[0] * (-t / q + (1.0 - t) / (1.0 - q)) / n;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[2], &[3., 4.]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4., 6.]);
        let z = tape.sub(a, a).unwrap();
        assert_eq!(tape.value(z).data(), &[0., 0.]);
        let c = tape.constant(t(&[2], &[2., 3.]));
        let m = tape.mul_scalar(c, 0.0);
        assert_eq!(tape.value(m).data(), &[0., 0.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);
        let r = tape.constant(t(&[1, 2], &[1., 2.]));
        let c = tape.constant(t(&[2, 1], &[3., 4.]));
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[11.]);
    }

    #[test]
    fn conv_delta_kernel_is_identity_and_zero_kernel_gives_bias() {
        let mut tape = Tape::new();
        let x = Tensor::from_fn(&[1, 5, 6], |i| (i as f64 * 0.37).sin());
        let xv = tape.constant(x.clone());
        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        let w = tape.constant(delta);
        let y = tape.conv2d(xv, w, None).unwrap();
        assert_eq!(tape.value(y), &x);

        let wz = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let b = tape.constant(t(&[2], &[0.7, 0.7]));
        let y = tape.conv2d(xv, wz, Some(b)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, None), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn attention_single_token_returns_value() {
        let mut tape = Tape::new();
        let q = tape.constant(t(&[1, 4], &[0.3, -1.0, 2.0, 0.1]));
        let k = tape.constant(t(&[1, 4], &[1.0, 0.5, -0.2, 0.0]));
        let v = tape.constant(t(&[1, 4], &[5., 6., 7., 8.]));
        let o = tape.attention(q, k, v, 2).unwrap();
        let got = tape.value(o).data();
        for (a, b) in got.iter().zip([5., 6., 7., 8.]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(tape.attention(q, k, v, 3).is_err());
    }

    #[test]
    fn attention_identical_queries_give_identical_rows() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_fn(&[3, 4], |i| [0.2, -0.4, 0.9, 1.1][i % 4]));
        let k = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).cos()));
        let v = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 1.3).sin()));
        let o = tape.attention(q, k, v, 1).unwrap();
        let d = tape.value(o).data();
        for r in 1..3 {
            for j in 0..4 {
                assert!((d[j] - d[r * 4 + j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[5, 7], |i| (i as f64 * 2.1).sin() * 30.0));
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));

        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[4], |i| i as f64 * 0.5 - 1.0);
        let x = tape.var(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        for (g, v) in tape.grad(x).unwrap().iter().zip(xv.data()) {
            assert_eq!(*g, 2.0 * v);
        }
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let c = tape.constant(Tensor::zeros(&[3]));
        let s = tape.sum(c);
        assert!(matches!(tape.backward(s), Err(Error::DetachedGraph)));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));
        tape.reset_grads();
        tape.backward(s).unwrap();
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::full(&[2, 2], 0.5));
        let x = tape.var(Tensor::full(&[2, 2], 1.0));
        let y = tape.matmul(w, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let mut tape = Tape::new();
        let x = Tensor::from_fn(&[2, 3, 5], |i| i as f64);
        let xv = tape.constant(x.clone());
        let y = tape.resize_bilinear(xv, 3, 5).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[10]));
        let p = tape.sigmoid(z);
        let target = Tensor::from_fn(&[10], |i| (i % 2) as f64);
        let l = tape.bce(p, &target, 1e-7).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
