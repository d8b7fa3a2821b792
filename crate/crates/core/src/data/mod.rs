//! Samples, synthetic generation, on-disk datasets, folds and augmentation.

mod augment;
mod folds;
mod io;
mod phantom;

pub use augment::{apply_augmentation, augment, Augmentation};
pub use folds::kfold_split;
pub use io::{load_dataset, load_gray_png, load_image, save_dataset, save_mask_png};
pub use phantom::{generate_phantom, sample_seed, LesionShape, PhantomParams};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bd::boundary_gt;
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// One image with its lesion mask and derived boundary mask.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    /// `[1, h, w]` in `[0, 1]`.
    pub image: Tensor,
    pub mask: BinaryMask,
    /// Always `boundary_gt(mask)`.
    pub boundary: BinaryMask,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: BinaryMask) -> Self {
        let boundary = boundary_gt(&mask);
        SegSample { id: id.into(), image, mask, boundary }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }
}

/// Generates `count` phantoms with per-sample seeds derived from
/// `params.seed`. Stems are `phantom_0000`, `phantom_0001`, ...
pub fn generate_dataset(params: &PhantomParams, count: usize) -> crate::Result<Vec<SegSample>> {
    (0..count)
        .map(|i| {
            let p = PhantomParams { seed: sample_seed(params.seed, i as u64), ..params.clone() };
            generate_phantom(&p, format!("phantom_{i:04}"))
        })
        .collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent 64-bit seed from a base seed, a purpose tag and
/// an index.
pub fn mix_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ purpose).wrapping_add(index))
}

pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, purpose, index))
}
