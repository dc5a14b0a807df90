//! Patch-level memory matching.
//!
//! A query key map is cut into overlapping patches, every query patch is
//! compared with every memory patch, the `K` best memory patches are kept,
//! and pixel-level softmax matching runs only inside those. The readout
//! patches are folded back into a map. [`dense_readout`] is the all-pairs
//! pixel matcher the patch scheme approximates.

mod affinity;
mod dense;
mod pixel;
mod plmm;
mod topk;

pub use affinity::{patch_affinity, AffinityMatrix};
pub use dense::dense_readout;
pub use pixel::{pixel_match_weights, readout, MatchWeights};
pub use plmm::{plmm_forward, PlmmGradients, PlmmMatcher, PlmmOutput, PlmmParams};
pub use topk::{topk_select, TopKIndex};

#[doc(hidden)]
pub use dense::dense_readout_with;
#[doc(hidden)]
pub use plmm::plmm_forward_with;

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts of comparisons performed by the matchers.
///
/// Workers keep their own counter and merge at the end; merging is plain
/// addition so the order of merges does not matter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub patch_pairs: u64,
    pub pixel_pairs: u64,
}

impl OpCounter {
    pub fn merge(&mut self, other: OpCounter) {
        *self += other;
    }
}

impl AddAssign for OpCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.patch_pairs += rhs.patch_pairs;
        self.pixel_pairs += rhs.pixel_pairs;
    }
}

impl Add for OpCounter {
    type Output = OpCounter;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

/// Sign convention of the matching score.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Similarity {
    /// `−‖a − b‖²`: larger means more alike.
    #[default]
    NegSqL2,
    /// `+‖a − b‖²`. Only used to check that the verification harness catches
    /// a wrong sign.
    Inverted,
}

impl Similarity {
    #[inline]
    pub(crate) fn sign(self) -> f64 {
        match self {
            Similarity::NegSqL2 => -1.0,
            Similarity::Inverted => 1.0,
        }
    }
}

/// Negative squared Euclidean distance between two equal-length vectors.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("similarity of vectors with lengths {} and {}", a.len(), b.len())));
    }
    Ok(-sq_dist(a, b))
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// In-place numerically stable softmax of one row.
#[inline]
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `out (m×n) = a (m×k) · b (k×n)` with explicit strides (row, col).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    out: &mut [f64],
) {
    debug_assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    debug_assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserted extents keep every strided access of `a`, `b` and
    // the row-major `out` inside the borrowed slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
