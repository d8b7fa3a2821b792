//! Composite objective: per-layer segmentation and boundary terms plus the
//! final segmentation term.

use serde::{Deserialize, Serialize};

use crate::backbone::N_LAYER;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorError};

/// Clamp applied to probabilities inside the cross-entropy logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_layer: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 10.0, n_layer: N_LAYER }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1.is_finite() && self.lambda2.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if self.n_layer != N_LAYER {
            return Err(Error::Config(format!("n_layer must be {N_LAYER}")));
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.numel() != b.numel() {
        return Err(TensorError::Dimension { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }.into());
    }
    Ok(())
}

/// `1 - 2Σpg / (Σp² + Σg²)`. Defined as 0 when both `p` and `g` are all zero.
pub fn dice_term(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_pair("dice", p, g)?;
    let g = g.reshape(p.shape())?;
    let overlap = p.mul(&g)?.sum();
    let denom = p.mul(p)?.sum().add(&g.mul(&g)?.sum())?;
    if denom.item() == 0.0 {
        return Ok(Tensor::scalar(0.0));
    }
    Ok(overlap.mul(&denom.powf(-1.0))?.mul_scalar(-2.0).add_scalar(1.0))
}

/// `-(1/N) Σ [g ln p + (1-g) ln(1-p)]` on clamped probabilities.
pub fn bce(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_pair("bce", p, g)?;
    let g = g.reshape(p.shape())?;
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = g.mul(&pc.ln())?;
    let not_g = g.neg().add_scalar(1.0);
    let neg = not_g.mul(&pc.neg().add_scalar(1.0).ln())?;
    Ok(pos.add(&neg)?.mean().neg())
}

/// Dice loss plus binary cross-entropy.
pub fn dice_bce(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    Ok(dice_term(p, g)?.add(&bce(p, g)?)?)
}

/// Squared error summed over pixels and divided by the pixel count.
pub fn boundary_mse(d: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_pair("boundary_mse", d, b)?;
    let diff = d.sub(&b.reshape(d.shape())?)?;
    Ok(diff.mul(&diff)?.mean())
}

/// Predictions of one boundary-detection head.
#[derive(Debug, Clone)]
pub struct LayerPrediction {
    pub seg_prob: Tensor,
    /// `-E`, compared with the boundary mask.
    pub boundary: Tensor,
}

/// Targets at one head's resolution.
#[derive(Debug, Clone)]
pub struct LayerTargets {
    pub mask: Tensor,
    pub boundary: Tensor,
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub layer_seg: Vec<f64>,
    pub layer_boundary: Vec<f64>,
    pub final_seg: f64,
}

impl LossBreakdown {
    /// First term holding a non-finite value, by name.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, v) in self.layer_seg.iter().enumerate() {
            if !v.is_finite() {
                return Some(format!("layer {} segmentation loss", i + 1));
            }
        }
        for (i, v) in self.layer_boundary.iter().enumerate() {
            if !v.is_finite() {
                return Some(format!("layer {} boundary loss", i + 1));
            }
        }
        if !self.final_seg.is_finite() {
            return Some("final segmentation loss".into());
        }
        (!self.total.item().is_finite()).then(|| "total loss".into())
    }
}

/// `Σᵢ (λ₁ Lⁱ_seg + λ₂ Lⁱ_boundary) + Lᶠ_seg`.
///
/// An empty `per_layer` slice drops the deep-supervision terms entirely and
/// leaves only the final segmentation loss.
pub fn total_loss(
    per_layer: &[LayerPrediction],
    final_prob: &Tensor,
    targets: &[LayerTargets],
    final_target: &Tensor,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    if !per_layer.is_empty() && per_layer.len() != w.n_layer {
        return Err(Error::LayerCount { expected: w.n_layer, got: per_layer.len() });
    }
    if targets.len() != per_layer.len() {
        return Err(Error::LayerCount { expected: per_layer.len(), got: targets.len() });
    }
    let final_seg = dice_bce(final_prob, final_target)?;
    let mut layer_seg = Vec::with_capacity(per_layer.len());
    let mut layer_boundary = Vec::with_capacity(per_layer.len());
    let mut total: Option<Tensor> = None;
    for (pred, tgt) in per_layer.iter().zip(targets) {
        let seg = dice_bce(&pred.seg_prob, &tgt.mask)?;
        let bnd = boundary_mse(&pred.boundary, &tgt.boundary)?;
        layer_seg.push(seg.item());
        layer_boundary.push(bnd.item());
        let term = seg.mul_scalar(w.lambda1).add(&bnd.mul_scalar(w.lambda2))?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    let final_value = final_seg.item();
    let total = match total {
        Some(t) => t.add(&final_seg)?,
        None => final_seg,
    };
    Ok(LossBreakdown { total, layer_seg, layer_boundary, final_seg: final_value })
}
