use crate::error::{ensure_dims, Result};
use crate::grid::FeatureGrid;
use crate::par;

use super::pixel::{readout_into, weights_into};
use super::{OpCounter, Similarity};

/// Query pixels handled per block; bounds the `B×(T·H·W)` weight buffer.
const BLOCK: usize = 64;

/// All-pairs pixel matching: every query pixel attends to every pixel of
/// every memory frame.
pub fn dense_readout(
    q_key: &FeatureGrid,
    mem_keys: &[&FeatureGrid],
    mem_values: &[&FeatureGrid],
    counter: &mut OpCounter,
) -> Result<FeatureGrid> {
    dense_readout_with(q_key, mem_keys, mem_values, counter, Similarity::NegSqL2)
}

pub fn dense_readout_with(
    q_key: &FeatureGrid,
    mem_keys: &[&FeatureGrid],
    mem_values: &[&FeatureGrid],
    counter: &mut OpCounter,
    sim: Similarity,
) -> Result<FeatureGrid> {
    ensure_dims!(!mem_keys.is_empty(), "memory must hold at least one frame");
    ensure_dims!(
        mem_keys.len() == mem_values.len(),
        "{} memory keys but {} memory values",
        mem_keys.len(),
        mem_values.len()
    );
    let (c, h, w) = q_key.dims();
    let cv = mem_values[0].channels();
    for k in mem_keys {
        ensure_dims!(k.dims() == (c, h, w), "memory key {:?} does not match query key {:?}", k.dims(), (c, h, w));
    }
    for v in mem_values {
        ensure_dims!(v.dims() == (cv, h, w), "memory value {:?} incompatible with {cv}x{h}x{w}", v.dims());
    }
    let plane = h * w;
    let m = mem_keys.len() * plane;

    // Channel-major concatenation over frames: memory pixel `t·HW + p`.
    let concat = |maps: &[&FeatureGrid], ch: usize| {
        let mut out = vec![0.0; ch * m];
        for (t, g) in maps.iter().enumerate() {
            for cc in 0..ch {
                out[cc * m + t * plane..cc * m + (t + 1) * plane].copy_from_slice(g.channel(cc));
            }
        }
        out
    };
    let keys = concat(mem_keys, c);
    let values = concat(mem_values, cv);

    let blocks = plane.div_ceil(BLOCK);
    let outs = par::map_range(blocks, |b| {
        let p0 = b * BLOCK;
        let len = BLOCK.min(plane - p0);
        let mut qb = vec![0.0; c * len];
        for cc in 0..c {
            qb[cc * len..(cc + 1) * len].copy_from_slice(&q_key.channel(cc)[p0..p0 + len]);
        }
        let mut wts = vec![0.0; len * m];
        weights_into(&qb, &keys, c, len, sim, &mut wts);
        let mut out = vec![0.0; cv * len];
        readout_into(&wts, &values, cv, len, &mut out);
        out
    });
    counter.pixel_pairs += (plane * m) as u64;

    let mut data = vec![0.0; cv * plane];
    for (b, out) in outs.iter().enumerate() {
        let p0 = b * BLOCK;
        let len = out.len() / cv;
        for cc in 0..cv {
            data[cc * plane + p0..cc * plane + p0 + len].copy_from_slice(&out[cc * len..(cc + 1) * len]);
        }
    }
    FeatureGrid::new(cv, h, w, data)
}
