//! Overlapping square patches with stride `P/2` (unfold) and their reassembly
//! with overlap averaging (fold).

use crate::error::{ensure_dims, Error, Result};
use crate::grid::FeatureGrid;
use crate::par;

/// Geometry of a `P×P`, stride `P/2` tiling of an `H×W` map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLayout {
    map_h: usize,
    map_w: usize,
    patch: usize,
    stride: usize,
    n_h: usize,
    n_w: usize,
    origins: Vec<(usize, usize)>,
}

/// Builds the row-major patch layout for an `map_h×map_w` map.
pub fn make_layout(map_h: usize, map_w: usize, patch: usize) -> Result<PatchLayout> {
    if patch == 0 || !patch.is_multiple_of(2) {
        return Err(Error::Layout { axis: "patch", detail: format!("patch size {patch} must be even and positive") });
    }
    let stride = patch / 2;
    let count = |len: usize, axis: &'static str| -> Result<usize> {
        if len < patch {
            return Err(Error::Layout { axis, detail: format!("extent {len} smaller than patch {patch}") });
        }
        if !(len - patch).is_multiple_of(stride) {
            return Err(Error::Layout {
                axis,
                detail: format!("({len} - {patch}) is not a multiple of stride {stride}"),
            });
        }
        Ok((len - patch) / stride + 1)
    };
    let n_h = count(map_h, "height")?;
    let n_w = count(map_w, "width")?;
    let origins = (0..n_h).flat_map(|i| (0..n_w).map(move |j| (i * stride, j * stride))).collect();
    Ok(PatchLayout { map_h, map_w, patch, stride, n_h, n_w, origins })
}

/// Whether `len` admits a stride-`P/2` tiling with patch `patch`.
pub fn is_admissible(len: usize, patch: usize) -> bool {
    patch > 0 && patch.is_multiple_of(2) && len >= patch && (len - patch).is_multiple_of(patch / 2)
}

impl PatchLayout {
    pub fn map_h(&self) -> usize {
        self.map_h
    }
    pub fn map_w(&self) -> usize {
        self.map_w
    }
    pub fn patch(&self) -> usize {
        self.patch
    }
    pub fn stride(&self) -> usize {
        self.stride
    }
    pub fn n_h(&self) -> usize {
        self.n_h
    }
    pub fn n_w(&self) -> usize {
        self.n_w
    }
    /// Total patch count `N`.
    pub fn len(&self) -> usize {
        self.origins.len()
    }
    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }
    /// Pixels per patch, `P²`.
    pub fn patch_area(&self) -> usize {
        self.patch * self.patch
    }

    /// Map-level pixel index of pixel `i` (row-major within the patch) of patch `n`.
    #[inline]
    pub fn pixel_index(&self, n: usize, i: usize) -> usize {
        let (oy, ox) = self.origins[n];
        (oy + i / self.patch) * self.map_w + ox + i % self.patch
    }

    /// Number of patches covering each map pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let mut cov = vec![0u32; self.map_h * self.map_w];
        for &(oy, ox) in &self.origins {
            for y in oy..oy + self.patch {
                for c in &mut cov[y * self.map_w + ox..y * self.map_w + ox + self.patch] {
                    *c += 1;
                }
            }
        }
        cov
    }

    /// Offset and side of the central block of a patch used for the
    /// pixel-center property.
    pub fn center_block(&self) -> (usize, usize) {
        let side = self.patch / 2;
        ((self.patch - side) / 2, side)
    }
}

/// `N` patches of `C×P×P` values, patch-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    layout: PatchLayout,
    channels: usize,
    data: Vec<f64>,
}

impl PatchGrid {
    /// Wraps arbitrary per-patch data laid out on `layout`.
    pub fn from_patches(layout: PatchLayout, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dims!(
            data.len() == layout.len() * channels * layout.patch_area(),
            "patch data length {} does not match {} patches of {channels}x{}x{}",
            data.len(),
            layout.len(),
            layout.patch,
            layout.patch
        );
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("non-finite patch value".into()));
        }
        Ok(Self { layout, channels, data })
    }

    pub fn layout(&self) -> &PatchLayout {
        &self.layout
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Patch `n` as `C×P×P`.
    pub fn patch(&self, n: usize) -> &[f64] {
        let len = self.channels * self.layout.patch_area();
        &self.data[n * len..(n + 1) * len]
    }

    /// `αA + βB` on identical layouts.
    pub fn axpby(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        ensure_dims!(self.layout == other.layout && self.channels == other.channels, "patch grids differ in shape");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| alpha * a + beta * b).collect();
        Ok(Self { layout: self.layout.clone(), channels: self.channels, data })
    }
}

/// Copies every patch of `grid` described by `layout`.
pub fn unfold(grid: &FeatureGrid, layout: &PatchLayout) -> Result<PatchGrid> {
    ensure_dims!(
        grid.height() == layout.map_h && grid.width() == layout.map_w,
        "grid {}x{} does not match layout {}x{}",
        grid.height(),
        grid.width(),
        layout.map_h,
        layout.map_w
    );
    let p = layout.patch;
    let c = grid.channels();
    let patches = par::map_range(layout.len(), |n| {
        let (oy, ox) = layout.origins[n];
        let mut out = Vec::with_capacity(c * p * p);
        for ch in 0..c {
            let plane = grid.channel(ch);
            for y in oy..oy + p {
                out.extend_from_slice(&plane[y * layout.map_w + ox..y * layout.map_w + ox + p]);
            }
        }
        out
    });
    Ok(PatchGrid { layout: layout.clone(), channels: c, data: patches.concat() })
}

/// Reassembles patches into a map, averaging wherever patches overlap.
///
/// Accumulation runs in patch order so the result does not depend on how the
/// patches were produced.
pub fn fold(patches: &PatchGrid) -> FeatureGrid {
    let layout = &patches.layout;
    let (p, w) = (layout.patch, layout.map_w);
    let plane = layout.map_h * w;
    let mut sum = vec![0.0; patches.channels * plane];
    for (n, &(oy, ox)) in layout.origins.iter().enumerate() {
        let src = patches.patch(n);
        for ch in 0..patches.channels {
            for dy in 0..p {
                let row = &src[(ch * p + dy) * p..(ch * p + dy + 1) * p];
                let dst = &mut sum[ch * plane + (oy + dy) * w + ox..ch * plane + (oy + dy) * w + ox + p];
                for (d, s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
    }
    let cov = layout.coverage();
    for ch in 0..patches.channels {
        for (v, &k) in sum[ch * plane..(ch + 1) * plane].iter_mut().zip(&cov) {
            *v /= k as f64;
        }
    }
    FeatureGrid::new(patches.channels, layout.map_h, w, sum).expect("fold preserves shape and finiteness")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_layout_counts() {
        let l = make_layout(24, 24, 6).unwrap();
        assert_eq!((l.n_h(), l.n_w(), l.len()), (7, 7, 49));
    }

    #[test]
    fn small_layout_origins() {
        let l = make_layout(9, 9, 6).unwrap();
        assert_eq!(l.origins(), &[(0, 0), (0, 3), (3, 0), (3, 3)]);
    }

    #[test]
    fn inadmissible_width_names_axis() {
        match make_layout(24, 25, 6) {
            Err(Error::Layout { axis, .. }) => assert_eq!(axis, "width"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(make_layout(24, 24, 5), Err(Error::Layout { axis: "patch", .. })));
        assert!(matches!(make_layout(4, 24, 6), Err(Error::Layout { axis: "height", .. })));
    }

    #[test]
    fn coverage_matches_brute_force() {
        let l = make_layout(9, 9, 6).unwrap();
        let cov = l.coverage();
        // Brute force: count origins whose square contains the pixel.
        for y in 0..9 {
            for x in 0..9 {
                let n = l
                    .origins()
                    .iter()
                    .filter(|&&(oy, ox)| (oy..oy + 6).contains(&y) && (ox..ox + 6).contains(&x))
                    .count() as u32;
                assert_eq!(cov[y * 9 + x], n);
            }
        }
        assert_eq!(cov[0], 1);
        assert_eq!(cov[8], 1);
        assert_eq!(cov[80], 1);
        for y in 3..6 {
            for x in 3..6 {
                assert_eq!(cov[y * 9 + x], 4);
            }
        }
    }

    #[test]
    fn unfold_copies_windows() {
        let g = FeatureGrid::from_fn(3, 9, 9, |c, y, x| (c * 81 + y * 9 + x) as f64).unwrap();
        let l = make_layout(9, 9, 6).unwrap();
        let pg = unfold(&g, &l).unwrap();
        assert_eq!(pg.channels(), 3);
        let p0 = pg.patch(0);
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    assert_eq!(p0[(c * 6 + y) * 6 + x], g.get(c, y, x));
                }
            }
        }
        let constant = unfold(&FeatureGrid::filled(1, 9, 9, 2.5), &l).unwrap();
        assert!(constant.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn unfold_rejects_mismatched_grid() {
        let l = make_layout(9, 9, 6).unwrap();
        assert!(matches!(unfold(&FeatureGrid::zeros(1, 12, 9), &l), Err(Error::Dimension(_))));
    }

    #[test]
    fn overlap_band_is_averaged() {
        let l = make_layout(6, 9, 6).unwrap();
        assert_eq!(l.len(), 2);
        let mut data = vec![1.0; 36];
        data.extend(vec![3.0; 36]);
        let out = fold(&PatchGrid::from_patches(l, 1, data).unwrap());
        for y in 0..6 {
            assert_eq!(out.get(0, y, 0), 1.0);
            assert_eq!(out.get(0, y, 4), 2.0);
            assert_eq!(out.get(0, y, 8), 3.0);
        }
    }

    #[test]
    fn interior_pixels_sit_in_a_patch_center() {
        for (h, w, p) in [(24, 24, 6), (16, 20, 4), (30, 18, 6), (40, 40, 8)] {
            let l = make_layout(h, w, p).unwrap();
            let (off, side) = l.center_block();
            let margin = p / 2;
            for y in margin..h - margin {
                for x in margin..w - margin {
                    let hit = l.origins().iter().any(|&(oy, ox)| {
                        (oy + off..oy + off + side).contains(&y) && (ox + off..ox + off + side).contains(&x)
                    });
                    assert!(hit, "pixel ({y},{x}) never central for {h}x{w} P={p}");
                }
            }
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn grid_strategy() -> impl Strategy<Value = (FeatureGrid, PatchLayout)> {
            (1usize..5, 1usize..4, 1usize..4, 1usize..3).prop_flat_map(|(half, nh, nw, c)| {
                let p = 2 * half;
                let (h, w) = (p + (nh - 1) * half, p + (nw - 1) * half);
                proptest::collection::vec(-10.0f64..10.0, c * h * w).prop_map(move |v| {
                    (FeatureGrid::new(c, h, w, v).unwrap(), make_layout(h, w, p).unwrap())
                })
            })
        }

        proptest! {
            #[test]
            fn fold_inverts_unfold((g, l) in grid_strategy()) {
                let back = fold(&unfold(&g, &l).unwrap());
                prop_assert!(back.max_abs_diff(&g) <= 1e-6);
            }

            #[test]
            fn fold_is_linear((g, l) in grid_strategy(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
                let a = unfold(&g, &l).unwrap();
                let b = unfold(&g.flip_horizontal(), &l).unwrap();
                let lhs = fold(&a.axpby(alpha, &b, beta).unwrap());
                let fa = fold(&a);
                let fb = fold(&b);
                let rhs: Vec<f64> = fa.data().iter().zip(fb.data()).map(|(x, y)| alpha * x + beta * y).collect();
                let diff = lhs.data().iter().zip(&rhs).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                prop_assert!(diff <= 1e-6);
            }
        }
    }
}
