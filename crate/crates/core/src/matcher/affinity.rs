use crate::error::{ensure_dims, Result};
use crate::par;
use crate::patcher::PatchGrid;

use super::{gemm, OpCounter, Similarity};

const BLOCK: usize = 64;

/// Patch-level scores: one row per query patch, one column per memory patch
/// (`t·N + j` for patch `j` of memory frame `t`). Higher is more similar.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    rows: usize,
    cols: usize,
    scores: Vec<f64>,
}

impl AffinityMatrix {
    pub fn new(rows: usize, cols: usize, scores: Vec<f64>) -> Result<Self> {
        ensure_dims!(scores.len() == rows * cols, "affinity needs {rows}x{cols} scores, got {}", scores.len());
        ensure_dims!(scores.iter().all(|v| v.is_finite()), "affinity scores must be finite");
        Ok(Self { rows, cols, scores })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.cols..(i + 1) * self.cols]
    }
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.cols + j]
    }
}

/// Scores every query patch against every patch of every memory frame.
pub fn patch_affinity(q: &PatchGrid, mem: &[&PatchGrid], counter: &mut OpCounter) -> Result<AffinityMatrix> {
    patch_affinity_with(q, mem, counter, Similarity::NegSqL2)
}

pub(crate) fn patch_affinity_with(
    q: &PatchGrid,
    mem: &[&PatchGrid],
    counter: &mut OpCounter,
    sim: Similarity,
) -> Result<AffinityMatrix> {
    ensure_dims!(!mem.is_empty(), "memory must hold at least one frame");
    for m in mem {
        ensure_dims!(
            m.layout() == q.layout() && m.channels() == q.channels(),
            "memory patches do not share the query layout"
        );
    }
    let n = q.layout().len();
    let d = q.channels() * q.layout().patch_area();
    let cols = mem.len() * n;
    let sign = sim.sign();
    let norms = |g: &PatchGrid| (0..n).map(|j| g.patch(j).iter().map(|v| v * v).sum::<f64>()).collect::<Vec<_>>();
    let qn = norms(q);
    let mn: Vec<Vec<f64>> = mem.iter().map(|m| norms(m)).collect();
    // ‖a−b‖² = ‖a‖² + ‖b‖² − 2a·b with the cross terms as one product per
    // block of query patches and memory frame.
    let blocks = par::map_range(n.div_ceil(BLOCK), |b| {
        let r0 = b * BLOCK;
        let rows = BLOCK.min(n - r0);
        let qa = &q.data()[r0 * d..(r0 + rows) * d];
        let mut out = vec![0.0; rows * cols];
        let mut cross = vec![0.0; rows * n];
        for (t, m) in mem.iter().enumerate() {
            gemm(rows, d, n, qa, (d, 1), m.data(), (1, d), &mut cross);
            for i in 0..rows {
                let row = &mut out[i * cols + t * n..i * cols + (t + 1) * n];
                for (j, v) in row.iter_mut().enumerate() {
                    *v = sign * (qn[r0 + i] + mn[t][j] - 2.0 * cross[i * n + j]).max(0.0);
                }
            }
        }
        out
    });
    counter.patch_pairs += (n * cols) as u64;
    AffinityMatrix::new(n, cols, blocks.concat())
}
