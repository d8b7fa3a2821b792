use rand::seq::SliceRandom;

use crate::error::{Error, Result};

/// Assigns each of `n` items to one of `k` folds. The assignment is a
/// seeded shuffle dealt round-robin, so fold sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot split {n} items into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut super::stream_rng(seed, 0x464f_4c44, 0));
    let mut fold = vec![0; n];
    for (pos, &idx) in order.iter().enumerate() {
        fold[idx] = pos % k;
    }
    Ok(fold)
}
