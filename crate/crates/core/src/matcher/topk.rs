use crate::error::{ensure_dims, Error, Result};

use super::AffinityMatrix;

/// Per query patch, the `K` selected memory patch ids in descending score
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKIndex {
    k: usize,
    rows: usize,
    memory_patches: usize,
    ids: Vec<usize>,
}

impl TopKIndex {
    pub fn new(k: usize, memory_patches: usize, ids: Vec<usize>) -> Result<Self> {
        ensure_dims!(k >= 1 && ids.len().is_multiple_of(k), "top-k table length {} not a multiple of k={k}", ids.len());
        let index = Self { k, rows: ids.len() / k, memory_patches, ids };
        for r in 0..index.rows {
            let row = index.row(r);
            if let Some(&bad) = row.iter().find(|&&id| id >= memory_patches) {
                return Err(Error::Dimension(format!("top-k id {bad} outside 0..{memory_patches}")));
            }
            for (a, &x) in row.iter().enumerate() {
                if row[..a].contains(&x) {
                    return Err(Error::Dimension(format!("duplicate top-k id {x} in row {r}")));
                }
            }
        }
        Ok(index)
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    /// Size `T·N` of the memory patch set the ids index into.
    pub fn memory_patches(&self) -> usize {
        self.memory_patches
    }
    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.k..(r + 1) * self.k]
    }
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

/// Keeps the `k` best memory patches of every affinity row. Ties go to the
/// lower memory patch index.
pub fn topk_select(aff: &AffinityMatrix, k: usize) -> Result<TopKIndex> {
    if k == 0 || k > aff.cols() {
        return Err(Error::Parameter(format!("k={k} outside 1..={}", aff.cols())));
    }
    let mut ids = Vec::with_capacity(aff.rows() * k);
    let mut order: Vec<usize> = Vec::with_capacity(aff.cols());
    for r in 0..aff.rows() {
        let row = aff.row(r);
        order.clear();
        order.extend(0..aff.cols());
        let by_score = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, by_score);
            order.truncate(k);
        }
        order.sort_by(by_score);
        ids.extend_from_slice(&order[..k]);
    }
    TopKIndex::new(k, aff.cols(), ids)
}
