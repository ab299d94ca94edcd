//! Segmentation loss: pixel BCE plus a boundary term.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_edge: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_edge: 20.0,
            eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_edge >= 0.0) || !self.lambda_edge.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda_edge must be >= 0, got {}",
                self.lambda_edge
            )));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "bce eps must be in (0, 0.5), got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

fn check_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("mask must be {0,1}-valued".into()));
    }
    Ok(())
}

/// 3×3 max (`dilate`) or min filter per channel over the clipped window.
fn morph3(mask: &Tensor, dilate: bool) -> Result<Tensor> {
    let (c, h, w) = mask.dims3()?;
    let src = mask.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = plane[i * w + j];
                for ii in i.saturating_sub(1)..(i + 2).min(h) {
                    for jj in j.saturating_sub(1)..(j + 2).min(w) {
                        let v = plane[ii * w + jj];
                        acc = if dilate { acc.max(v) } else { acc.min(v) };
                    }
                }
                out[ch * h * w + i * w + j] = acc;
            }
        }
    }
    Tensor::new(mask.shape(), out)
}

pub fn dilate3(mask: &Tensor) -> Result<Tensor> {
    morph3(mask, true)
}

pub fn erode3(mask: &Tensor) -> Result<Tensor> {
    morph3(mask, false)
}

/// Boundary of a binary mask: dilation minus erosion with a 3×3 box. The
/// frame replicates the mask, so a region touching the border has no edge
/// along it.
pub fn edge_mask(mask: &Tensor) -> Result<Tensor> {
    check_binary(mask)?;
    dilate3(mask)?.zip_map(&erode3(mask)?, "edge_mask", |a, b| a - b)
}

/// Mean BCE of `sigmoid(logits)` against a binary target.
pub fn bce_loss(tape: &mut Tape, logits: Var, target: &Tensor, eps: f64) -> Result<Var> {
    check_binary(target)?;
    let p = tape.sigmoid(logits);
    tape.bce(p, target, eps)
}

/// Differentiable boundary of a probability map: max-pool minus min-pool.
pub fn soft_edge(tape: &mut Tape, probs: Var) -> Result<Var> {
    let hi = tape.max_pool3(probs)?;
    let lo = tape.min_pool3(probs)?;
    tape.sub(hi, lo)
}

/// BCE between the soft boundary of the prediction and the mask boundary.
pub fn edge_loss(tape: &mut Tape, logits: Var, gt: &Tensor, eps: f64) -> Result<Var> {
    let target = edge_mask(gt)?;
    let p = tape.sigmoid(logits);
    let e = soft_edge(tape, p)?;
    tape.bce(e, &target, eps)
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub bce: Var,
    pub edge: Var,
}

/// `bce + lambda_edge · edge`.
pub fn total_loss(tape: &mut Tape, logits: Var, gt: &Tensor, cfg: &LossConfig) -> Result<LossParts> {
    let bce = bce_loss(tape, logits, gt, cfg.eps)?;
    let edge = edge_loss(tape, logits, gt, cfg.eps)?;
    let weighted = tape.mul_scalar(edge, cfg.lambda_edge);
    let total = tape.add(bce, weighted)?;
    Ok(LossParts { total, bce, edge })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_for(mask: &Tensor, mag: f64) -> Tensor {
        mask.map(|m| if m == 1.0 { mag } else { -mag })
    }

    #[test]
    fn saturated_logits_give_tiny_bce() {
        let gt = Tensor::from_fn(&[1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let mut tape = Tape::new();
        let z = tape.constant(logits_for(&gt, 20.0));
        let l = bce_loss(&mut tape, z, &gt, 1e-7).unwrap();
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn centred_block_edge_has_24_positives() {
        let mask = Tensor::from_fn(&[1, 5, 5], |p| {
            let (i, j) = (p / 5, p % 5);
            ((1..4).contains(&i) && (1..4).contains(&j)) as u8 as f64
        });
        assert_eq!(dilate3(&mask).unwrap().sum(), 25.0);
        let eroded = erode3(&mask).unwrap();
        assert_eq!(eroded.sum(), 1.0);
        assert_eq!(eroded.data()[12], 1.0);
        assert_eq!(edge_mask(&mask).unwrap().sum(), 24.0);
    }

    #[test]
    fn full_frame_and_empty_masks_have_no_edge() {
        assert_eq!(edge_mask(&Tensor::zeros(&[1, 6, 6])).unwrap().sum(), 0.0);
        assert_eq!(edge_mask(&Tensor::full(&[1, 6, 6], 1.0)).unwrap().sum(), 0.0);
    }

    #[test]
    fn non_binary_masks_are_rejected() {
        assert!(edge_mask(&Tensor::full(&[1, 2, 2], 0.5)).is_err());
    }

    #[test]
    fn lambda_zero_is_plain_bce() {
        let gt = Tensor::from_fn(&[1, 6, 6], |i| (i % 5 < 2) as u8 as f64);
        let z0 = Tensor::from_fn(&[1, 6, 6], |i| (i as f64 * 0.37).sin());
        let mut tape = Tape::new();
        let z = tape.constant(z0);
        let cfg = LossConfig {
            lambda_edge: 0.0,
            ..LossConfig::default()
        };
        let parts = total_loss(&mut tape, z, &gt, &cfg).unwrap();
        assert_eq!(tape.value(parts.total).item(), tape.value(parts.bce).item());
    }
}
