//! Two-scale matching: top-K is chosen on the stride-16 maps and reused on
//! the stride-8 maps with doubled patch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::matcher::{dense_readout, plmm_forward_with, OpCounter, PlmmParams, Similarity, TopKIndex};
use crate::patcher::{make_layout, PatchLayout};

/// A stride-16 map and the matching stride-8 map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    scale4: FeatureGrid,
    scale3: FeatureGrid,
}

impl FeaturePyramid {
    /// Channel counts may differ between scales; spatial dims must be exactly
    /// doubled at scale 3.
    pub fn new(scale4: FeatureGrid, scale3: FeatureGrid) -> Result<Self> {
        if scale3.height() != 2 * scale4.height() || scale3.width() != 2 * scale4.width() {
            return Err(Error::Pyramid(format!(
                "scale-3 map {}x{} is not twice scale-4 map {}x{}",
                scale3.height(),
                scale3.width(),
                scale4.height(),
                scale4.width()
            )));
        }
        Ok(Self { scale4, scale3 })
    }

    pub fn scale4(&self) -> &FeatureGrid {
        &self.scale4
    }
    pub fn scale3(&self) -> &FeatureGrid {
        &self.scale3
    }
}

/// Patch sides at both scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScalePair {
    pub p4: usize,
    pub p3: usize,
}

impl ScalePair {
    pub fn new(p4: usize) -> Self {
        Self { p4, p3: 2 * p4 }
    }

    /// Layouts for a scale-4 map of `h4×w4`.
    pub fn layouts(&self, h4: usize, w4: usize) -> Result<(PatchLayout, PatchLayout)> {
        Ok((make_layout(h4, w4, self.p4)?, make_layout(2 * h4, 2 * w4, self.p3)?))
    }
}

/// Which scales take part in matching.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scales {
    #[default]
    #[serde(rename = "3,4")]
    Both,
    #[serde(rename = "4")]
    Only4,
    #[serde(rename = "3")]
    Only3,
}

impl Scales {
    pub fn uses4(self) -> bool {
        self != Scales::Only3
    }
    pub fn uses3(self) -> bool {
        self != Scales::Only4
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut set: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        set.sort_unstable();
        set.dedup();
        match set.as_slice() {
            ["3", "4"] => Ok(Scales::Both),
            ["4"] => Ok(Scales::Only4),
            ["3"] => Ok(Scales::Only3),
            _ => Err(Error::Parameter(format!("scales must be a nonempty subset of {{3,4}}, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Scales {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scales::Both => "3,4",
            Scales::Only4 => "4",
            Scales::Only3 => "3",
        })
    }
}

/// Reuses a scale-4 top-K table at scale 3.
pub fn lift_topk(topk: &TopKIndex, layout4: &PatchLayout, layout3: &PatchLayout) -> Result<TopKIndex> {
    if layout4.len() != layout3.len() || topk.rows() != layout3.len() {
        return Err(Error::Layout {
            axis: "scale",
            detail: format!(
                "scale-4 table has {} rows, scale-4 layout {} patches, scale-3 layout {} patches",
                topk.rows(),
                layout4.len(),
                layout3.len()
            ),
        });
    }
    Ok(topk.clone())
}

/// Readouts of a two-scale match; a scale that is switched off is `None`.
#[derive(Debug, Clone)]
pub struct MultiscaleReadout {
    pub readout4: Option<FeatureGrid>,
    pub readout3: Option<FeatureGrid>,
}

fn scale_refs<'a>(p: &[&'a FeaturePyramid], fine: bool) -> Vec<&'a FeatureGrid> {
    p.iter().map(|p| if fine { &p.scale3 } else { &p.scale4 }).collect()
}

/// PLMM at scale 4, then scale 3 with the lifted top-K and patch `2P`.
pub fn match_multiscale(
    query: &FeaturePyramid,
    mem_keys: &[&FeaturePyramid],
    mem_values: &[&FeaturePyramid],
    params: PlmmParams,
    scales: Scales,
    counter: &mut OpCounter,
) -> Result<MultiscaleReadout> {
    match_multiscale_with(query, mem_keys, mem_values, params, scales, counter, Similarity::NegSqL2)
}

#[doc(hidden)]
pub fn match_multiscale_with(
    query: &FeaturePyramid,
    mem_keys: &[&FeaturePyramid],
    mem_values: &[&FeaturePyramid],
    params: PlmmParams,
    scales: Scales,
    counter: &mut OpCounter,
    sim: Similarity,
) -> Result<MultiscaleReadout> {
    let pair = ScalePair::new(params.patch);
    let (k4, v4) = (scale_refs(mem_keys, false), scale_refs(mem_values, false));
    let (k3, v3) = (scale_refs(mem_keys, true), scale_refs(mem_values, true));
    let fine = PlmmParams { patch: pair.p3, k: params.k };
    match scales {
        Scales::Both => {
            let coarse = plmm_forward_with(&query.scale4, &k4, &v4, params, counter, None, sim)?;
            let (l4, l3) = pair.layouts(query.scale4.height(), query.scale4.width())?;
            let lifted = lift_topk(&coarse.topk, &l4, &l3)?;
            let fine_out = plmm_forward_with(&query.scale3, &k3, &v3, fine, counter, Some(&lifted), sim)?;
            Ok(MultiscaleReadout { readout4: Some(coarse.readout), readout3: Some(fine_out.readout) })
        }
        Scales::Only4 => {
            let coarse = plmm_forward_with(&query.scale4, &k4, &v4, params, counter, None, sim)?;
            Ok(MultiscaleReadout { readout4: Some(coarse.readout), readout3: None })
        }
        Scales::Only3 => {
            let fine_out = plmm_forward_with(&query.scale3, &k3, &v3, fine, counter, None, sim)?;
            Ok(MultiscaleReadout { readout4: None, readout3: Some(fine_out.readout) })
        }
    }
}

/// The dense-matching counterpart of [`match_multiscale`].
pub fn dense_multiscale(
    query: &FeaturePyramid,
    mem_keys: &[&FeaturePyramid],
    mem_values: &[&FeaturePyramid],
    scales: Scales,
    counter: &mut OpCounter,
) -> Result<MultiscaleReadout> {
    let readout4 = if scales.uses4() {
        Some(dense_readout(&query.scale4, &scale_refs(mem_keys, false), &scale_refs(mem_values, false), counter)?)
    } else {
        None
    };
    let readout3 = if scales.uses3() {
        Some(dense_readout(&query.scale3, &scale_refs(mem_keys, true), &scale_refs(mem_values, true), counter)?)
    } else {
        None
    };
    Ok(MultiscaleReadout { readout4, readout3 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::plmm_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pyramid(rng: &mut ChaCha8Rng, c: usize, h4: usize, w4: usize) -> FeaturePyramid {
        let mut g = |h, w| FeatureGrid::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let s4 = g(h4, w4);
        let s3 = g(2 * h4, 2 * w4);
        FeaturePyramid::new(s4, s3).unwrap()
    }

    #[test]
    fn pyramid_rejects_bad_scale_dims() {
        let err = FeaturePyramid::new(FeatureGrid::zeros(32, 24, 24), FeatureGrid::zeros(32, 50, 50));
        assert!(matches!(err, Err(Error::Pyramid(_))));
    }

    #[test]
    fn default_layouts_have_equal_patch_counts() {
        let (l4, l3) = ScalePair::new(6).layouts(24, 24).unwrap();
        assert_eq!((l4.len(), l3.len()), (49, 49));
        for (a, b) in l4.origins().iter().zip(l3.origins()) {
            assert_eq!((2 * a.0, 2 * a.1), *b);
        }
    }

    #[test]
    fn lift_is_identity_and_checks_n() {
        let t = TopKIndex::new(2, 8, vec![3, 1, 0, 7]).unwrap();
        let (l4, l3) = ScalePair::new(4).layouts(6, 4).unwrap();
        assert_eq!(l4.len(), 2);
        assert_eq!(lift_topk(&t, &l4, &l3).unwrap(), t);
        let other = make_layout(8, 8, 4).unwrap();
        assert!(matches!(lift_topk(&t, &l4, &other), Err(Error::Layout { .. })));
    }

    #[test]
    fn scale3_pass_adds_no_patch_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_pyramid(&mut rng, 3, 12, 12);
        let m = [random_pyramid(&mut rng, 3, 12, 12), random_pyramid(&mut rng, 3, 12, 12)];
        let v = [random_pyramid(&mut rng, 2, 12, 12), random_pyramid(&mut rng, 2, 12, 12)];
        let mut counter = OpCounter::default();
        match_multiscale(&q, &[&m[0], &m[1]], &[&v[0], &v[1]], PlmmParams { patch: 4, k: 3 }, Scales::Both, &mut counter)
            .unwrap();
        let n = 25u64;
        assert_eq!(counter.patch_pairs, 2 * n * n);
        assert_eq!(counter.pixel_pairs, n * 3 * 16 * 16 + n * 3 * 64 * 64);
    }

    #[test]
    fn degenerate_layout_matches_dense_at_both_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_pyramid(&mut rng, 2, 4, 4);
        let m = [random_pyramid(&mut rng, 2, 4, 4), random_pyramid(&mut rng, 2, 4, 4)];
        let v = [random_pyramid(&mut rng, 3, 4, 4), random_pyramid(&mut rng, 3, 4, 4)];
        let (mr, vr) = ([&m[0], &m[1]], [&v[0], &v[1]]);
        let mut c = OpCounter::default();
        let plmm = match_multiscale(&q, &mr, &vr, PlmmParams { patch: 4, k: 2 }, Scales::Both, &mut c).unwrap();
        let dense = dense_multiscale(&q, &mr, &vr, Scales::Both, &mut c).unwrap();
        assert!(plmm.readout4.unwrap().max_abs_diff(&dense.readout4.unwrap()) <= 1e-6);
        assert!(plmm.readout3.unwrap().max_abs_diff(&dense.readout3.unwrap()) <= 1e-6);
    }

    #[test]
    fn only4_equals_plain_scale4_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_pyramid(&mut rng, 2, 8, 8);
        let m = random_pyramid(&mut rng, 2, 8, 8);
        let v = random_pyramid(&mut rng, 1, 8, 8);
        let params = PlmmParams { patch: 4, k: 2 };
        let out = match_multiscale(&q, &[&m], &[&v], params, Scales::Only4, &mut OpCounter::default()).unwrap();
        let direct = plmm_forward(q.scale4(), &[m.scale4()], &[v.scale4()], params, &mut OpCounter::default(), None)
            .unwrap();
        assert_eq!(out.readout4.unwrap(), direct.readout);
        assert!(out.readout3.is_none());
    }

    #[test]
    fn scales_parse_and_display() {
        assert_eq!(Scales::parse("4,3").unwrap(), Scales::Both);
        assert_eq!(Scales::parse("4").unwrap(), Scales::Only4);
        assert_eq!(Scales::parse(" 3 ").unwrap(), Scales::Only3);
        assert!(Scales::parse("2").is_err());
        assert!(Scales::parse("").is_err());
        for s in [Scales::Both, Scales::Only3, Scales::Only4] {
            assert_eq!(Scales::parse(&s.to_string()).unwrap(), s);
        }
    }
}
