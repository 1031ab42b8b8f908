//! Deterministic top-K selection by magnitude.

use std::cmp::Ordering;

/// Ordering used everywhere a "largest K" set is needed: larger magnitude
/// first, lower index first among equal magnitudes.
#[inline]
fn rank(mags: &[f64], a: usize, b: usize) -> Ordering {
    mags[b].total_cmp(&mags[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest entries of `mags`, in ascending index order.
///
/// `k` is clamped to `mags.len()`.
pub fn top_k_indices(mags: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(mags.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..mags.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank(mags, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Boolean membership mask of the top-`k` set.
pub fn top_k_mask(mags: &[f64], k: usize) -> Vec<bool> {
    let mut mask = vec![false; mags.len()];
    for i in top_k_indices(mags, k) {
        mask[i] = true;
    }
    mask
}
