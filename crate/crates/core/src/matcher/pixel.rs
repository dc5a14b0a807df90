use crate::error::{ensure_dims, Result};

use super::{gemm, softmax_in_place, OpCounter, Similarity};

/// Softmax weights of one query patch: `P²` query pixels by `K·P²` memory
/// pixels (memory pixel `j = k·P² + i` is pixel `i` of the `k`-th selected
/// patch).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchWeights {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatchWeights {
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[cfg(test)]
    fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }
}

/// Concatenates `K` channel-major patches (`C×A` each) into one `C×(K·A)`
/// block so that memory pixel `k·A + i` of channel `c` sits at
/// `c·K·A + k·A + i`.
pub(crate) fn gather_channel_major(patches: &[&[f64]], channels: usize, area: usize) -> Vec<f64> {
    let ka = patches.len() * area;
    let mut out = vec![0.0; channels * ka];
    for (k, p) in patches.iter().enumerate() {
        for c in 0..channels {
            out[c * ka + k * area..c * ka + (k + 1) * area].copy_from_slice(&p[c * area..(c + 1) * area]);
        }
    }
    out
}

/// Fills `out` (`A×(K·A)`) with softmax weights for the gathered keys.
///
/// Squared distances are expanded as `‖q‖² + ‖k‖² − 2q·k` so the cross term
/// runs as one matrix product.
pub(crate) fn weights_into(q: &[f64], keys: &[f64], channels: usize, area: usize, sim: Similarity, out: &mut [f64]) {
    let ka = keys.len() / channels;
    gemm(area, channels, ka, q, (1, area), keys, (ka, 1), out);
    let mut qn = vec![0.0; area];
    let mut kn = vec![0.0; ka];
    for c in 0..channels {
        for (n, v) in qn.iter_mut().zip(&q[c * area..(c + 1) * area]) {
            *n += v * v;
        }
        for (n, v) in kn.iter_mut().zip(&keys[c * ka..(c + 1) * ka]) {
            *n += v * v;
        }
    }
    let sign = sim.sign();
    for (row, &qi) in out.chunks_mut(ka).zip(&qn) {
        for (r, &kj) in row.iter_mut().zip(&kn) {
            *r = sign * (qi + kj - 2.0 * *r).max(0.0);
        }
        softmax_in_place(row);
    }
}

/// Readout `C_v×A` from gathered values `C_v×(K·A)` and weights `A×(K·A)`.
pub(crate) fn readout_into(weights: &[f64], values: &[f64], cv: usize, area: usize, out: &mut [f64]) {
    let ka = weights.len() / area;
    gemm(cv, ka, area, values, (ka, 1), weights, (1, ka), out);
}

fn check_patch(len: usize, channels: usize, area: usize, what: &str) -> Result<()> {
    ensure_dims!(len == channels * area, "{what} has {len} values, expected {channels}x{area}");
    Ok(())
}

fn patch_area(q_len: usize, channels: usize) -> Result<usize> {
    ensure_dims!(channels > 0 && q_len.is_multiple_of(channels), "query patch length {q_len} not divisible by {channels}");
    let area = q_len / channels;
    let side = (area as f64).sqrt().round() as usize;
    ensure_dims!(side * side == area, "query patch area {area} is not square");
    Ok(area)
}

/// Pixel-level softmax matching between one query patch and its `K`
/// selected memory patches. All patches are channel-major `C×P×P`.
pub fn pixel_match_weights(
    q_patch: &[f64],
    k_patches: &[&[f64]],
    channels: usize,
    counter: &mut OpCounter,
) -> Result<MatchWeights> {
    let area = patch_area(q_patch.len(), channels)?;
    ensure_dims!(!k_patches.is_empty(), "need at least one memory patch");
    for k in k_patches {
        check_patch(k.len(), channels, area, "memory patch")?;
    }
    let keys = gather_channel_major(k_patches, channels, area);
    let cols = k_patches.len() * area;
    let mut data = vec![0.0; area * cols];
    weights_into(q_patch, &keys, channels, area, Similarity::NegSqL2, &mut data);
    counter.pixel_pairs += (area * cols) as u64;
    Ok(MatchWeights { rows: area, cols, data })
}

/// Weighted sum of the selected value patches (`C_v×P×P` each) for every
/// query pixel. Returns a channel-major `C_v×P×P` patch.
pub fn readout(weights: &MatchWeights, v_patches: &[&[f64]], cv: usize) -> Result<Vec<f64>> {
    let area = weights.rows;
    ensure_dims!(
        v_patches.len() * area == weights.cols,
        "{} value patches of area {area} do not match {} weight columns",
        v_patches.len(),
        weights.cols
    );
    for v in v_patches {
        check_patch(v.len(), cv, area, "value patch")?;
    }
    let values = gather_channel_major(v_patches, cv, area);
    let mut out = vec![0.0; cv * area];
    readout_into(&weights.data, &values, cv, area, &mut out);
    Ok(out)
}
