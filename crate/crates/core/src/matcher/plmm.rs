use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::grid::FeatureGrid;
use crate::par;
use crate::patcher::{fold, make_layout, unfold, PatchGrid, PatchLayout};

use super::affinity::patch_affinity_with;
use super::pixel::{gather_channel_major, readout_into, weights_into};
use super::{gemm, topk_select, OpCounter, Similarity, TopKIndex};

/// Patch side `P` and number of kept memory patches `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlmmParams {
    pub patch: usize,
    pub k: usize,
}

impl Default for PlmmParams {
    fn default() -> Self {
        Self { patch: 6, k: 4 }
    }
}

#[derive(Debug, Clone)]
pub struct PlmmOutput {
    /// `C_v×H×W` folded readout.
    pub readout: FeatureGrid,
    /// The top-K table used, computed or supplied.
    pub topk: TopKIndex,
}

/// Gradients of a scalar loss through one PLMM forward pass.
#[derive(Debug, Clone)]
pub struct PlmmGradients {
    pub q_key: FeatureGrid,
    pub mem_keys: Vec<FeatureGrid>,
    pub mem_values: Vec<FeatureGrid>,
}

struct Shapes {
    channels: usize,
    value_channels: usize,
    frames: usize,
    height: usize,
    width: usize,
}

fn check_inputs(q: &FeatureGrid, mem_keys: &[&FeatureGrid], mem_values: &[&FeatureGrid]) -> Result<Shapes> {
    ensure_dims!(!mem_keys.is_empty(), "memory must hold at least one frame");
    ensure_dims!(
        mem_keys.len() == mem_values.len(),
        "{} memory keys but {} memory values",
        mem_keys.len(),
        mem_values.len()
    );
    for k in mem_keys {
        ensure_dims!(k.dims() == q.dims(), "memory key {:?} does not match query key {:?}", k.dims(), q.dims());
    }
    let cv = mem_values[0].channels();
    for v in mem_values {
        ensure_dims!(
            v.channels() == cv && v.height() == q.height() && v.width() == q.width(),
            "memory value {:?} incompatible with {}x{}x{}",
            v.dims(),
            cv,
            q.height(),
            q.width()
        );
    }
    Ok(Shapes {
        channels: q.channels(),
        value_channels: cv,
        frames: mem_keys.len(),
        height: q.height(),
        width: q.width(),
    })
}

struct Unfolded {
    layout: PatchLayout,
    q: PatchGrid,
    keys: Vec<PatchGrid>,
    values: Vec<PatchGrid>,
}

fn unfold_all(
    q: &FeatureGrid,
    mem_keys: &[&FeatureGrid],
    mem_values: &[&FeatureGrid],
    patch: usize,
) -> Result<Unfolded> {
    let layout = make_layout(q.height(), q.width(), patch)?;
    let keys = mem_keys.iter().map(|k| unfold(k, &layout)).collect::<Result<Vec<_>>>()?;
    let values = mem_values.iter().map(|v| unfold(v, &layout)).collect::<Result<Vec<_>>>()?;
    Ok(Unfolded { q: unfold(q, &layout)?, keys, values, layout })
}

impl Unfolded {
    /// Selected key and value patches for query patch `n`.
    fn selected(&self, row: &[usize]) -> (Vec<&[f64]>, Vec<&[f64]>) {
        let n = self.layout.len();
        row.iter().map(|&id| (self.keys[id / n].patch(id % n), self.values[id / n].patch(id % n))).unzip()
    }
}

fn check_override(topk: &TopKIndex, n: usize, frames: usize) -> Result<()> {
    ensure_dims!(
        topk.rows() == n && topk.memory_patches() == frames * n,
        "top-k table for {} query / {} memory patches used with {n} / {}",
        topk.rows(),
        topk.memory_patches(),
        frames * n
    );
    Ok(())
}

struct Forward {
    output: PlmmOutput,
    weights: Option<Vec<Vec<f64>>>,
}

#[allow(clippy::too_many_arguments)]
fn forward_impl(
    q: &FeatureGrid,
    mem_keys: &[&FeatureGrid],
    mem_values: &[&FeatureGrid],
    params: PlmmParams,
    counter: &mut OpCounter,
    topk_override: Option<&TopKIndex>,
    sim: Similarity,
    keep_weights: bool,
) -> Result<Forward> {
    let shapes = check_inputs(q, mem_keys, mem_values)?;
    let u = unfold_all(q, mem_keys, mem_values, params.patch)?;
    let n = u.layout.len();
    let topk = match topk_override {
        Some(t) => {
            check_override(t, n, shapes.frames)?;
            t.clone()
        }
        None => {
            let key_refs: Vec<&PatchGrid> = u.keys.iter().collect();
            let aff = patch_affinity_with(&u.q, &key_refs, counter, sim)?;
            topk_select(&aff, params.k)?
        }
    };
    let area = u.layout.patch_area();
    let (c, cv) = (shapes.channels, shapes.value_channels);
    let ka = topk.k() * area;

    let per_patch = par::map_range(n, |p| {
        let (ks, vs) = u.selected(topk.row(p));
        let keys = gather_channel_major(&ks, c, area);
        let values = gather_channel_major(&vs, cv, area);
        let mut w = vec![0.0; area * ka];
        weights_into(u.q.patch(p), &keys, c, area, sim, &mut w);
        let mut out = vec![0.0; cv * area];
        readout_into(&w, &values, cv, area, &mut out);
        (out, keep_weights.then_some(w))
    });
    counter.pixel_pairs += (n * area * ka) as u64;

    let mut patches = Vec::with_capacity(n * cv * area);
    let mut weights = keep_weights.then(|| Vec::with_capacity(n));
    for (out, w) in per_patch {
        patches.extend_from_slice(&out);
        if let (Some(all), Some(w)) = (weights.as_mut(), w) {
            all.push(w);
        }
    }
    let readout = fold(&PatchGrid::from_patches(u.layout.clone(), cv, patches)?);
    Ok(Forward { output: PlmmOutput { readout, topk }, weights })
}

/// Patch-level memory matching of one query key map against `T` memory
/// frames.
///
/// Unfolds every map into stride-`P/2` patches, picks the `K` best memory
/// patches per query patch (unless `topk_override` supplies the table),
/// softmax-matches pixels inside the selection, reads out values and folds
/// the readout patches back with overlap averaging.
pub fn plmm_forward(
    q_key: &FeatureGrid,
    mem_keys: &[&FeatureGrid],
    mem_values: &[&FeatureGrid],
    params: PlmmParams,
    counter: &mut OpCounter,
    topk_override: Option<&TopKIndex>,
) -> Result<PlmmOutput> {
    plmm_forward_with(q_key, mem_keys, mem_values, params, counter, topk_override, Similarity::NegSqL2)
}

#[allow(clippy::too_many_arguments)]
pub fn plmm_forward_with(
    q_key: &FeatureGrid,
    mem_keys: &[&FeatureGrid],
    mem_values: &[&FeatureGrid],
    params: PlmmParams,
    counter: &mut OpCounter,
    topk_override: Option<&TopKIndex>,
    sim: Similarity,
) -> Result<PlmmOutput> {
    forward_impl(q_key, mem_keys, mem_values, params, counter, topk_override, sim, false).map(|f| f.output)
}

struct Tape {
    topk: TopKIndex,
    weights: Vec<Vec<f64>>,
    dims: ((usize, usize, usize), usize, usize),
}

/// PLMM with a recorded forward pass, for gradient computation.
///
/// The top-K table and the fold coverage are constants of the backward pass;
/// gradients flow through the softmax, the similarity and the readout.
pub struct PlmmMatcher {
    params: PlmmParams,
    sim: Similarity,
    tape: Option<Tape>,
}

impl PlmmMatcher {
    pub fn new(params: PlmmParams) -> Self {
        Self { params, sim: Similarity::NegSqL2, tape: None }
    }

    pub fn params(&self) -> PlmmParams {
        self.params
    }

    /// The top-K table of the last forward pass.
    pub fn last_topk(&self) -> Option<&TopKIndex> {
        self.tape.as_ref().map(|t| &t.topk)
    }

    pub fn forward(
        &mut self,
        q_key: &FeatureGrid,
        mem_keys: &[&FeatureGrid],
        mem_values: &[&FeatureGrid],
        counter: &mut OpCounter,
        topk_override: Option<&TopKIndex>,
    ) -> Result<PlmmOutput> {
        let f = forward_impl(q_key, mem_keys, mem_values, self.params, counter, topk_override, self.sim, true)?;
        self.tape = Some(Tape {
            topk: f.output.topk.clone(),
            weights: f.weights.expect("weights kept"),
            dims: (q_key.dims(), mem_keys.len(), mem_values[0].channels()),
        });
        Ok(f.output)
    }

    /// Gradients of `Σ upstream ⊙ readout` with respect to every input map.
    pub fn backward(
        &self,
        q_key: &FeatureGrid,
        mem_keys: &[&FeatureGrid],
        mem_values: &[&FeatureGrid],
        upstream: &FeatureGrid,
    ) -> Result<PlmmGradients> {
        let tape = self.tape.as_ref().ok_or_else(|| Error::State("backward called before forward".into()))?;
        let shapes = check_inputs(q_key, mem_keys, mem_values)?;
        if tape.dims != (q_key.dims(), shapes.frames, shapes.value_channels) {
            return Err(Error::State("backward inputs differ in shape from the recorded forward pass".into()));
        }
        ensure_dims!(
            upstream.dims() == (shapes.value_channels, shapes.height, shapes.width),
            "upstream gradient {:?} does not match readout shape",
            upstream.dims()
        );
        let u = unfold_all(q_key, mem_keys, mem_values, self.params.patch)?;
        backward_impl(&u, &shapes, tape, upstream, self.sim.sign())
    }
}

fn backward_impl(u: &Unfolded, shapes: &Shapes, tape: &Tape, upstream: &FeatureGrid, sign: f64) -> Result<PlmmGradients> {
    let layout = &u.layout;
    let n = layout.len();
    let area = layout.patch_area();
    let (c, cv) = (shapes.channels, shapes.value_channels);
    let k = tape.topk.k();
    let ka = k * area;
    let plane = shapes.height * shapes.width;
    let cov = layout.coverage();

    let per_patch = par::map_range(n, |p| {
        let row = tape.topk.row(p);
        let (ks, vs) = u.selected(row);
        let keys = gather_channel_major(&ks, c, area);
        let values = gather_channel_major(&vs, cv, area);
        let q = u.q.patch(p);
        let w = &tape.weights[p];

        // Upstream gradient of the patch readout: fold averages, so each
        // pixel's share is divided by its coverage.
        let mut g = vec![0.0; cv * area];
        for ch in 0..cv {
            for i in 0..area {
                let pix = layout.pixel_index(p, i);
                g[ch * area + i] = upstream.data()[ch * plane + pix] / cov[pix] as f64;
            }
        }

        let mut dv = vec![0.0; cv * ka];
        gemm(cv, area, ka, &g, (area, 1), w, (ka, 1), &mut dv);
        let mut dw = vec![0.0; area * ka];
        gemm(area, cv, ka, &g, (1, area), &values, (ka, 1), &mut dw);

        // Softmax backward.
        let mut ds = vec![0.0; area * ka];
        for i in 0..area {
            let wr = &w[i * ka..(i + 1) * ka];
            let dwr = &dw[i * ka..(i + 1) * ka];
            let dot: f64 = wr.iter().zip(dwr).map(|(a, b)| a * b).sum();
            for j in 0..ka {
                ds[i * ka + j] = wr[j] * (dwr[j] - dot);
            }
        }
        let row_sum: Vec<f64> = ds.chunks(ka).map(|r| r.iter().sum()).collect();
        let mut col_sum = vec![0.0; ka];
        for r in ds.chunks(ka) {
            for (s, v) in col_sum.iter_mut().zip(r) {
                *s += v;
            }
        }
        // logit_ij = sign · Σ_c (q_ci − k_cj)²
        let mut ds_k = vec![0.0; c * area];
        gemm(c, ka, area, &keys, (ka, 1), &ds, (1, ka), &mut ds_k);
        let mut q_ds = vec![0.0; c * ka];
        gemm(c, area, ka, q, (area, 1), &ds, (ka, 1), &mut q_ds);

        let two_sign = 2.0 * sign;
        let mut dq = vec![0.0; c * area];
        for ch in 0..c {
            for i in 0..area {
                dq[ch * area + i] = two_sign * (q[ch * area + i] * row_sum[i] - ds_k[ch * area + i]);
            }
        }
        let mut dk = vec![0.0; c * ka];
        for ch in 0..c {
            for j in 0..ka {
                dk[ch * ka + j] = -two_sign * (q_ds[ch * ka + j] - keys[ch * ka + j] * col_sum[j]);
            }
        }
        (dq, dk, dv)
    });

    let mut dq_map = vec![0.0; c * plane];
    let mut dk_maps = vec![vec![0.0; c * plane]; shapes.frames];
    let mut dv_maps = vec![vec![0.0; cv * plane]; shapes.frames];
    for (p, (dq, dk, dv)) in per_patch.into_iter().enumerate() {
        for i in 0..area {
            let pix = layout.pixel_index(p, i);
            for ch in 0..c {
                dq_map[ch * plane + pix] += dq[ch * area + i];
            }
        }
        for (slot, &id) in tape.topk.row(p).iter().enumerate() {
            let (t, j) = (id / n, id % n);
            for i in 0..area {
                let pix = layout.pixel_index(j, i);
                let col = slot * area + i;
                for ch in 0..c {
                    dk_maps[t][ch * plane + pix] += dk[ch * ka + col];
                }
                for ch in 0..cv {
                    dv_maps[t][ch * plane + pix] += dv[ch * ka + col];
                }
            }
        }
    }
    let (h, w) = (shapes.height, shapes.width);
    Ok(PlmmGradients {
        q_key: FeatureGrid::new(c, h, w, dq_map)?,
        mem_keys: dk_maps.into_iter().map(|d| FeatureGrid::new(c, h, w, d)).collect::<Result<_>>()?,
        mem_values: dv_maps.into_iter().map(|d| FeatureGrid::new(cv, h, w, d)).collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::dense_readout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f64) -> FeatureGrid {
        FeatureGrid::from_fn(c, h, w, |_, _, _| rng.random_range(-scale..scale)).unwrap()
    }

    #[test]
    fn default_configuration_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_grid(&mut rng, 4, 24, 24, 1.0);
        let keys = [random_grid(&mut rng, 4, 24, 24, 1.0), random_grid(&mut rng, 4, 24, 24, 1.0)];
        let vals = [random_grid(&mut rng, 2, 24, 24, 1.0), random_grid(&mut rng, 2, 24, 24, 1.0)];
        let mut counter = OpCounter::default();
        let out = plmm_forward(
            &q,
            &[&keys[0], &keys[1]],
            &[&vals[0], &vals[1]],
            PlmmParams { patch: 6, k: 4 },
            &mut counter,
            None,
        )
        .unwrap();
        assert_eq!(out.topk.rows(), 49);
        assert_eq!(out.readout.dims(), (2, 24, 24));
        assert_eq!(counter, OpCounter { patch_pairs: 4802, pixel_pairs: 254016 });
    }

    #[test]
    fn single_patch_equals_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_grid(&mut rng, 3, 6, 6, 1.0);
        let keys: Vec<_> = (0..2).map(|_| random_grid(&mut rng, 3, 6, 6, 1.0)).collect();
        let vals: Vec<_> = (0..2).map(|_| random_grid(&mut rng, 2, 6, 6, 1.0)).collect();
        let kr: Vec<_> = keys.iter().collect();
        let vr: Vec<_> = vals.iter().collect();
        let plmm =
            plmm_forward(&q, &kr, &vr, PlmmParams { patch: 6, k: 2 }, &mut OpCounter::default(), None).unwrap();
        let dense = dense_readout(&q, &kr, &vr, &mut OpCounter::default()).unwrap();
        assert!(plmm.readout.max_abs_diff(&dense) <= 1e-12);
    }

    #[test]
    fn override_skips_patch_affinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_grid(&mut rng, 2, 8, 8, 1.0);
        let m = random_grid(&mut rng, 2, 8, 8, 1.0);
        let v = random_grid(&mut rng, 1, 8, 8, 1.0);
        let params = PlmmParams { patch: 4, k: 2 };
        let first = plmm_forward(&q, &[&m], &[&v], params, &mut OpCounter::default(), None).unwrap();
        let mut counter = OpCounter::default();
        let second = plmm_forward(&q, &[&m], &[&v], params, &mut counter, Some(&first.topk)).unwrap();
        assert_eq!(counter.patch_pairs, 0);
        assert_eq!(counter.pixel_pairs, 9 * 2 * 16 * 16);
        assert_eq!(first.readout, second.readout);
    }

    #[test]
    fn mismatched_override_is_rejected() {
        let q = FeatureGrid::zeros(1, 8, 8);
        let bad = TopKIndex::new(1, 2, vec![0, 1]).unwrap();
        let err = plmm_forward(&q, &[&q], &[&q], PlmmParams { patch: 4, k: 1 }, &mut OpCounter::default(), Some(&bad));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let q = FeatureGrid::zeros(1, 8, 8);
        let m = PlmmMatcher::new(PlmmParams { patch: 4, k: 1 });
        assert!(matches!(m.backward(&q, &[&q], &[&q], &q), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_grid(&mut rng, 2, 8, 8, 0.5);
        let k = random_grid(&mut rng, 2, 8, 8, 0.5);
        let v = random_grid(&mut rng, 2, 8, 8, 0.5);
        let mut m = PlmmMatcher::new(PlmmParams { patch: 4, k: 2 });
        m.forward(&q, &[&k], &[&v], &mut OpCounter::default(), None).unwrap();
        let g = m.backward(&q, &[&k], &[&v], &FeatureGrid::zeros(2, 8, 8)).unwrap();
        assert!(g.q_key.data().iter().all(|&x| x == 0.0));
        assert!(g.mem_keys[0].data().iter().all(|&x| x == 0.0));
        assert!(g.mem_values[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unselected_memory_pixels_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_grid(&mut rng, 2, 12, 12, 0.5);
        let k = random_grid(&mut rng, 2, 12, 12, 0.5);
        let v = random_grid(&mut rng, 1, 12, 12, 0.5);
        let up = random_grid(&mut rng, 1, 12, 12, 1.0);
        let mut m = PlmmMatcher::new(PlmmParams { patch: 4, k: 1 });
        m.forward(&q, &[&k], &[&v], &mut OpCounter::default(), None).unwrap();
        let g = m.backward(&q, &[&k], &[&v], &up).unwrap();
        let layout = make_layout(12, 12, 4).unwrap();
        let mut touched = [false; 144];
        for &id in m.last_topk().unwrap().ids() {
            for i in 0..16 {
                touched[layout.pixel_index(id, i)] = true;
            }
        }
        for (pix, &t) in touched.iter().enumerate() {
            if !t {
                assert_eq!(g.mem_values[0].data()[pix], 0.0);
                assert_eq!(g.mem_keys[0].data()[pix], 0.0);
            }
        }
    }
}
