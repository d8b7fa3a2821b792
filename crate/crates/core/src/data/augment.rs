//! Label-preserving geometric augmentation: horizontal flip followed by a
//! quarter-turn rotation. Masks move with the image and the boundary is
//! recomputed from the transformed mask.

use rand::Rng;

use super::SegSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub flip: bool,
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
}

impl Augmentation {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.quarter_turns % 4 == 0
    }
}

fn flip_grid(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    (0..h * w).map(|i| v[(i / w) * w + (w - 1 - i % w)]).collect()
}

/// Same index mapping as `BinaryMask::rot90`; output is `w x h`.
fn rot90_grid(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (w, h);
    (0..oh * ow).map(|i| v[(i % ow) * w + (w - 1 - i / ow)]).collect()
}

pub fn apply_augmentation(sample: &SegSample, aug: Augmentation) -> SegSample {
    if aug.is_identity() {
        return sample.clone();
    }
    let shape = sample.image.shape();
    let (ch, mut h, mut w) = (shape[0], shape[1], shape[2]);
    let mut planes: Vec<Vec<f64>> = sample.image.data().chunks(h * w).map(<[f64]>::to_vec).collect();
    let mut mask = sample.mask.clone();
    if aug.flip {
        planes = planes.iter().map(|p| flip_grid(p, h, w)).collect();
        mask = mask.flip_horizontal();
    }
    for _ in 0..aug.quarter_turns % 4 {
        planes = planes.iter().map(|p| rot90_grid(p, h, w)).collect();
        mask = mask.rot90();
        std::mem::swap(&mut h, &mut w);
    }
    let image = Tensor::new(&[ch, h, w], planes.concat()).expect("transform preserves element count");
    SegSample::new(sample.id.clone(), image, mask)
}

/// Draws a flip with probability one half and a uniform quarter-turn count.
pub fn augment<R: Rng + ?Sized>(sample: &SegSample, rng: &mut R) -> (SegSample, Augmentation) {
    let aug = Augmentation { flip: rng.random_bool(0.5), quarter_turns: rng.random_range(0..4) };
    (apply_augmentation(sample, aug), aug)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bd::boundary_gt;
    use crate::mask::BinaryMask;

    fn sample() -> SegSample {
        let (h, w) = (5, 7);
        let img: Vec<f64> = (0..h * w).map(|i| i as f64).collect();
        let mask = BinaryMask::from_fn(h, w, |r, c| r >= 1 && r <= 3 && c >= 1 && c <= 4);
        SegSample::new("s", Tensor::new(&[1, h, w], img).unwrap(), mask)
    }

    #[test]
    fn identity_is_noop() {
        let s = sample();
        let t = apply_augmentation(&s, Augmentation::default());
        assert_eq!(t.image.data(), s.image.data());
        assert_eq!(t.mask, s.mask);
    }

    #[test]
    fn image_and_mask_move_together() {
        let s = sample();
        for flip in [false, true] {
            for q in 0..4 {
                let t = apply_augmentation(&s, Augmentation { flip, quarter_turns: q });
                // pixel values are unique, so the set of values under the mask must match
                let under = |x: &SegSample| {
                    let mut v: Vec<f64> =
                        x.image.data().iter().zip(x.mask.data()).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
                    v.sort_by(f64::total_cmp);
                    v
                };
                assert_eq!(under(&t), under(&s));
                assert_eq!(t.boundary, boundary_gt(&t.mask));
                assert_eq!(t.mask.count(), s.mask.count());
            }
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let f = Augmentation { flip: true, quarter_turns: 0 };
        let t = apply_augmentation(&apply_augmentation(&s, f), f);
        assert_eq!(t.image.data(), s.image.data());
        assert_eq!(t.mask, s.mask);
    }

    #[test]
    fn four_turns_return_home() {
        let s = sample();
        let mut t = s.clone();
        for _ in 0..4 {
            t = apply_augmentation(&t, Augmentation { flip: false, quarter_turns: 1 });
        }
        assert_eq!(t.image.data(), s.image.data());
        assert_eq!(t.image.shape(), s.image.shape());
    }
}
