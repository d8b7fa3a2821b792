//! Boundary-detection heads and boundary ground truth.
//!
//! A head projects a stage feature to one channel `F`, then takes
//! `E = F - maxpool3×3(F)`, which is zero at local maxima and negative
//! elsewhere. `F + E` gives the per-layer segmentation logits and `-E` is
//! compared against the boundary mask.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mask::BinaryMask;
use crate::nn::Ctx;
use crate::params::{normal, zeros_param, ParamStore};
use crate::tensor::{Conv2dSpec, Tensor};

#[derive(Debug, Clone)]
pub struct BdOutput {
    /// `E`, nonpositive.
    pub boundary: Tensor,
    /// `F + E`.
    pub seg_logits: Tensor,
    /// `sigmoid(F + E)`.
    pub seg_prob: Tensor,
}

impl BdOutput {
    /// The boundary prediction compared against `{0, 1}` targets.
    pub fn boundary_pred(&self) -> Tensor {
        self.boundary.neg()
    }
}

/// Standard deviation of the projection weights. Small weights keep `E`
/// near zero at initialization so the boundary loss starts bounded.
pub const HEAD_INIT_STD: f64 = 0.01;

pub fn init_params(layer: usize, channels: usize, params: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    params.insert(format!("bd{layer}.w"), normal(&[1, channels, 1, 1], HEAD_INIT_STD, rng))?;
    params.insert(format!("bd{layer}.b"), zeros_param(&[1]))?;
    Ok(())
}

/// Boundary map from a one-channel projection `F`.
pub fn boundary_from_projection(f_phi: &Tensor) -> Result<BdOutput> {
    let shifted = f_phi.maxpool2d(3, 1, 1)?;
    let boundary = f_phi.sub(&shifted)?;
    let seg_logits = f_phi.add(&boundary)?;
    let seg_prob = seg_logits.sigmoid();
    Ok(BdOutput { boundary, seg_logits, seg_prob })
}

pub fn bd_forward(f_i: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<BdOutput> {
    let f_phi = f_i.conv2d(weight, Some(bias), Conv2dSpec::default())?;
    boundary_from_projection(&f_phi)
}

pub(crate) fn bd_head(ctx: &Ctx, f_i: &Tensor, layer: usize) -> Result<BdOutput> {
    let f_phi = ctx.conv(f_i, &format!("bd{layer}"), Conv2dSpec::default())?;
    boundary_from_projection(&f_phi)
}

/// One-pixel inner boundary: foreground pixels with a background
/// 4-neighbor, the outside of the image counting as background.
pub fn boundary_gt(mask: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(mask.height(), mask.width(), |r, c| {
        if !mask.get(r, c) {
            return false;
        }
        let (r, c) = (r as isize, c as isize);
        [(-1, 0), (1, 0), (0, -1), (0, 1)]
            .iter()
            .any(|(dr, dc)| !mask.get_or_false(r + dr, c + dc))
    })
}

/// Per-layer boundary target: nearest-neighbor resize of the full-resolution
/// boundary mask.
pub fn boundary_target(boundary: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    boundary.resize_nearest(height, width)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Tensor::new(&[1, 1, h, w], data).unwrap()
    }

    #[test]
    fn flat_field_has_no_boundary() {
        let out = boundary_from_projection(&plane(4, 4, |_, _| 0.7)).unwrap();
        assert!(out.boundary.data().iter().all(|&v| v == 0.0));
        assert!(out.seg_logits.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn spike_neighbors_are_negative() {
        let out = boundary_from_projection(&plane(5, 5, |r, c| if (r, c) == (2, 2) { 3.0 } else { 0.0 })).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let e = out.boundary.data()[r * 5 + c];
                let neighbor = r.abs_diff(2) <= 1 && c.abs_diff(2) <= 1 && (r, c) != (2, 2);
                assert_eq!(e, if neighbor { -3.0 } else { 0.0 }, "({r},{c})");
            }
        }
    }

    #[test]
    fn step_edge() {
        let out = boundary_from_projection(&plane(4, 6, |_, c| if c >= 3 { 1.0 } else { 0.0 })).unwrap();
        for r in 0..4 {
            for c in 0..6 {
                let e = out.boundary.data()[r * 6 + c];
                assert_eq!(e, if c == 2 { -1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn boundary_cases() {
        let single = BinaryMask::from_fn(3, 3, |r, c| (r, c) == (1, 1));
        assert_eq!(boundary_gt(&single), single);

        let square = BinaryMask::from_fn(5, 5, |r, c| (1..=3).contains(&r) && (1..=3).contains(&c));
        let rim = boundary_gt(&square);
        assert_eq!(rim.count(), 8);
        assert!(!rim.get(2, 2));
        assert!(rim.get(1, 1) && rim.get(3, 2));

        let empty = BinaryMask::empty(4, 4);
        assert!(boundary_gt(&empty).is_empty());

        let full = BinaryMask::from_fn(3, 3, |_, _| true);
        // image border counts as background
        assert_eq!(boundary_gt(&full).count(), 8);
    }
}
