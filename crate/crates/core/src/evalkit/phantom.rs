use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{class, CineVolume, LabelVolume};

const BLOOD: f64 = 0.9;
const MYOCARDIUM: f64 = 0.45;
const BACKGROUND: f64 = 0.15;
const DISTRACTOR: f64 = 0.85;
const MARGIN: f64 = 2.0;

/// Geometry and acquisition parameters of the analytic cine phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub z_count: usize,
    pub t_count: usize,
    pub height: usize,
    pub width: usize,
    pub spacing_mm: (f64, f64),
    pub lv_radius_px: f64,
    pub myo_thickness_px: f64,
    /// Horizontal distance between the LV and RV centers.
    pub rv_offset_px: f64,
    pub contraction_frac: f64,
    pub longaxis_shorten_frac: f64,
    pub noise_sigma: f64,
    pub distractor: bool,
    /// Linear shrink of all radii from slice 0 to the last slice.
    pub apex_taper: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            z_count: 9,
            t_count: 10,
            height: 128,
            width: 128,
            spacing_mm: (1.5, 1.5),
            lv_radius_px: 16.0,
            myo_thickness_px: 6.0,
            rv_offset_px: 26.0,
            contraction_frac: 0.3,
            longaxis_shorten_frac: 2.0 / 9.0,
            noise_sigma: 0.03,
            distractor: true,
            apex_taper: 0.0,
            seed: 7,
        }
    }
}

impl PhantomSpec {
    /// Motionless, noise-free phantom with identical anatomy on every slice.
    pub fn static_case() -> Self {
        Self { contraction_frac: 0.0, longaxis_shorten_frac: 0.0, noise_sigma: 0.0, ..Self::default() }
    }

    /// Phase with the strongest contraction.
    pub fn es_phase(&self) -> usize {
        (0..self.t_count).max_by(|&a, &b| self.squeeze(a).total_cmp(&self.squeeze(b)).then(b.cmp(&a))).unwrap_or(0)
    }

    fn squeeze(&self, t: usize) -> f64 {
        (PI * t as f64 / self.t_count as f64).sin().powi(2)
    }

    /// Number of apical slices without ventricle at phase `t`.
    pub fn lost_slices(&self, t: usize) -> usize {
        let full = (self.longaxis_shorten_frac * self.z_count as f64 - 1e-9).ceil().max(0.0);
        (full * self.squeeze(t) + 1e-9).floor() as usize
    }

    fn lv_center(&self) -> (f64, f64) {
        (self.height as f64 / 2.0, self.width as f64 / 2.0 + self.rv_offset_px / 2.0)
    }

    fn distractor_geometry(&self) -> ((f64, f64), f64) {
        let (cy, cx) = self.lv_center();
        let outer = self.lv_radius_px + self.myo_thickness_px;
        let r = 0.6 * self.lv_radius_px;
        ((cy + outer + 1.5 * r, cx + 0.5 * outer), r)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.z_count == 0 || self.t_count < 2 || self.height == 0 || self.width == 0 {
            return bad(format!(
                "need Z>=1, T>=2 and a nonempty frame, got {}x{}x{}x{}",
                self.z_count, self.t_count, self.height, self.width
            ));
        }
        if !(self.spacing_mm.0 > 0.0 && self.spacing_mm.1 > 0.0) {
            return bad(format!("spacing {:?} must be positive", self.spacing_mm));
        }
        for (name, v) in [("contraction_frac", self.contraction_frac), ("longaxis_shorten_frac", self.longaxis_shorten_frac)]
        {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} must lie in [0,1)"));
            }
        }
        if !(0.0..1.0).contains(&self.apex_taper) {
            return bad(format!("apex_taper {} must lie in [0,1)", self.apex_taper));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be nonnegative", self.noise_sigma));
        }
        if !(self.lv_radius_px > 0.0 && self.myo_thickness_px >= 0.0 && self.rv_offset_px >= 0.0) {
            return bad("radii and offsets must be positive".into());
        }
        // The largest extent occurs at end diastole.
        let (cy, cx) = self.lv_center();
        let outer = self.lv_radius_px + self.myo_thickness_px;
        let rv = 1.1 * self.lv_radius_px;
        let mut boxes = vec![
            (cy - outer, cy + outer, cx - outer, cx + outer),
            (cy - rv, cy + rv, cx - self.rv_offset_px - rv, cx - self.rv_offset_px + rv),
        ];
        if self.distractor {
            let ((dy, dx), r) = self.distractor_geometry();
            boxes.push((dy - r, dy + r, dx - r, dx + r));
        }
        let (h, w) = (self.height as f64 - 1.0, self.width as f64 - 1.0);
        for (y0, y1, x0, x1) in boxes {
            if y0 < MARGIN || x0 < MARGIN || y1 > h - MARGIN || x1 > w - MARGIN {
                return bad(format!(
                    "geometry [{y0:.1},{y1:.1}]x[{x0:.1},{x1:.1}] leaves less than {MARGIN} px margin in {}x{}",
                    self.height, self.width
                ));
            }
        }
        Ok(())
    }
}

/// Renders the phantom: intensities with noise, and the noise-free labels.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<(CineVolume, LabelVolume)> {
    spec.validate()?;
    let (zc, tc, h, w) = (spec.z_count, spec.t_count, spec.height, spec.width);
    let (cy, cx) = spec.lv_center();
    let ((dy, dx), dr) = spec.distractor_geometry();
    let plane = h * w;
    let mut labels = vec![class::BACKGROUND; zc * tc * plane];
    let mut image = vec![BACKGROUND; zc * tc * plane];
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    for z in 0..zc {
        let taper = 1.0 - spec.apex_taper * if zc > 1 { z as f64 / (zc - 1) as f64 } else { 0.0 };
        for t in 0..tc {
            let scale = (1.0 - spec.contraction_frac * spec.squeeze(t)) * taper;
            let present = z < zc - spec.lost_slices(t).min(zc);
            let r_lv = spec.lv_radius_px * scale;
            let r_out = (spec.lv_radius_px + spec.myo_thickness_px) * scale;
            let r_rv = 1.1 * spec.lv_radius_px * scale;
            let base = (z * tc + t) * plane;
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = (y as f64, x as f64);
                    let d_lv = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
                    let d_rv = ((fy - cy).powi(2) + (fx - cx + spec.rv_offset_px).powi(2)).sqrt();
                    let label = if !present {
                        class::BACKGROUND
                    } else if d_lv < r_lv {
                        class::LV
                    } else if d_lv < r_out {
                        class::MYO
                    } else if d_rv < r_rv {
                        class::RV
                    } else {
                        class::BACKGROUND
                    };
                    let mut v = match label {
                        class::LV | class::RV => BLOOD,
                        class::MYO => MYOCARDIUM,
                        _ => BACKGROUND,
                    };
                    if spec.distractor && ((fy - dy).powi(2) + (fx - dx).powi(2)).sqrt() < dr {
                        v = DISTRACTOR;
                    }
                    labels[base + y * w + x] = label;
                    image[base + y * w + x] = v;
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in &mut image {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let dims = [zc, tc, h, w];
    Ok((CineVolume::new(dims, spec.spacing_mm, image)?, LabelVolume::new(dims, spec.spacing_mm, labels)?))
}
