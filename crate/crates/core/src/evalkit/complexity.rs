use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::matcher::{dense_readout, plmm_forward, OpCounter, PlmmParams};
use crate::par;
use crate::patcher::make_layout;
use crate::pyramid::{lift_topk, ScalePair};

const KEY_CHANNELS: usize = 32;
const VALUE_CHANNELS: usize = 4;

/// One benchmark configuration. `h×w` is the map being matched; at scale 3
/// the patch is `2P` and top-K comes from a half-size scale-4 pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexityConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub p: usize,
    pub k: usize,
    #[serde(default = "default_scale")]
    pub scale: u8,
}

fn default_scale() -> u8 {
    4
}

impl ComplexityConfig {
    pub fn new(t: usize, h: usize, w: usize, p: usize, k: usize, scale: u8) -> Self {
        Self { t, h, w, p, k, scale }
    }

    fn patch_side(&self) -> usize {
        if self.scale == 3 {
            2 * self.p
        } else {
            self.p
        }
    }

    /// Checks admissibility and returns the patch count `N`.
    pub fn validate(&self) -> Result<usize> {
        if self.t == 0 {
            return Err(Error::Parameter("T must be at least 1".into()));
        }
        if self.scale != 3 && self.scale != 4 {
            return Err(Error::Parameter(format!("scale {} must be 3 or 4", self.scale)));
        }
        if self.scale == 3 && (!self.h.is_multiple_of(2) || !self.w.is_multiple_of(2)) {
            return Err(Error::Parameter(format!("scale-3 map {}x{} must have even sides", self.h, self.w)));
        }
        let n = make_layout(self.h, self.w, self.patch_side())?.len();
        if self.k == 0 || self.k > self.t * n {
            return Err(Error::Parameter(format!("k {} outside 1..={}", self.k, self.t * n)));
        }
        Ok(n)
    }

    pub fn predicted_patch_pairs(&self, n: usize) -> u64 {
        if self.scale == 3 {
            0
        } else {
            (self.t * n * n) as u64
        }
    }

    pub fn predicted_pixel_pairs(&self, n: usize) -> u64 {
        let area = (self.patch_side() * self.patch_side()) as u64;
        n as u64 * self.k as u64 * area * area
    }

    pub fn predicted_dense_pixel_pairs(&self) -> u64 {
        let hw = (self.h * self.w) as u64;
        self.t as u64 * hw * hw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityRow {
    pub config: ComplexityConfig,
    pub predicted_patch_pairs: u64,
    pub measured_patch_pairs: u64,
    pub predicted_pixel_pairs: u64,
    pub measured_pixel_pairs: u64,
    pub plmm_ms: f64,
    pub dense_ms: f64,
    pub predicted_dense_pixel_pairs: u64,
    pub measured_dense_pixel_pairs: u64,
}

impl ComplexityRow {
    pub fn counts_match(&self) -> bool {
        self.predicted_patch_pairs == self.measured_patch_pairs
            && self.predicted_pixel_pairs == self.measured_pixel_pairs
            && self.predicted_dense_pixel_pairs == self.measured_dense_pixel_pairs
    }
}

/// Covers the default setting (T=2, 24×24, P=6, K=4) and both scales.
pub fn default_grid() -> Vec<ComplexityConfig> {
    let c = ComplexityConfig::new;
    vec![
        c(2, 24, 24, 6, 4, 4),
        c(1, 24, 24, 6, 4, 4),
        c(3, 24, 24, 6, 4, 4),
        c(2, 24, 24, 4, 2, 4),
        c(2, 24, 24, 8, 4, 4),
        c(2, 16, 16, 4, 4, 4),
        c(2, 30, 42, 6, 6, 4),
        c(2, 36, 36, 6, 1, 4),
        c(2, 48, 48, 6, 4, 4),
        c(3, 48, 48, 6, 4, 4),
        c(2, 48, 48, 6, 4, 3),
        c(2, 64, 64, 4, 4, 4),
    ]
}

fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureGrid {
    FeatureGrid::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0)).expect("finite")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn time_ms<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(f()?);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(samples))
}

fn measure(cfg: &ComplexityConfig, reps: usize, seed: u64) -> Result<ComplexityRow> {
    let n = cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_grid(&mut rng, KEY_CHANNELS, cfg.h, cfg.w);
    let keys: Vec<_> = (0..cfg.t).map(|_| random_grid(&mut rng, KEY_CHANNELS, cfg.h, cfg.w)).collect();
    let vals: Vec<_> = (0..cfg.t).map(|_| random_grid(&mut rng, VALUE_CHANNELS, cfg.h, cfg.w)).collect();
    let (kr, vr): (Vec<_>, Vec<_>) = (keys.iter().collect(), vals.iter().collect());

    let lifted = if cfg.scale == 3 {
        let pair = ScalePair::new(cfg.p);
        let (h4, w4) = (cfg.h / 2, cfg.w / 2);
        let half = |g: &FeatureGrid| crate::grid::downsample_avg(g, 2);
        let q4 = half(&q)?;
        let k4: Vec<_> = keys.iter().map(half).collect::<Result<_>>()?;
        let v4: Vec<_> = vals.iter().map(half).collect::<Result<_>>()?;
        let coarse = plmm_forward(
            &q4,
            &k4.iter().collect::<Vec<_>>(),
            &v4.iter().collect::<Vec<_>>(),
            PlmmParams { patch: cfg.p, k: cfg.k },
            &mut OpCounter::default(),
            None,
        )?;
        let (l4, l3) = pair.layouts(h4, w4)?;
        Some(lift_topk(&coarse.topk, &l4, &l3)?)
    } else {
        None
    };
    let params = PlmmParams { patch: cfg.patch_side(), k: cfg.k };

    let mut plmm_count = OpCounter::default();
    plmm_forward(&q, &kr, &vr, params, &mut plmm_count, lifted.as_ref())?;
    let mut dense_count = OpCounter::default();
    dense_readout(&q, &kr, &vr, &mut dense_count)?;

    let (plmm_ms, dense_ms) = par::single_threaded(|| -> Result<(f64, f64)> {
        let p = time_ms(reps, || plmm_forward(&q, &kr, &vr, params, &mut OpCounter::default(), lifted.as_ref()))?;
        let d = time_ms(reps, || dense_readout(&q, &kr, &vr, &mut OpCounter::default()))?;
        Ok((p, d))
    })?;

    Ok(ComplexityRow {
        config: *cfg,
        predicted_patch_pairs: cfg.predicted_patch_pairs(n),
        measured_patch_pairs: plmm_count.patch_pairs,
        predicted_pixel_pairs: cfg.predicted_pixel_pairs(n),
        measured_pixel_pairs: plmm_count.pixel_pairs,
        plmm_ms,
        dense_ms,
        predicted_dense_pixel_pairs: cfg.predicted_dense_pixel_pairs(),
        measured_dense_pixel_pairs: dense_count.pixel_pairs,
    })
}

/// Runs PLMM and dense matching on random maps for every config, comparing
/// counters with the closed forms and timing both (median of `reps`,
/// single worker). A count mismatch shows up in the row, not as an error.
pub fn check_complexity(configs: &[ComplexityConfig], reps: usize, seed: u64) -> Result<Vec<ComplexityRow>> {
    let reps = reps.max(1);
    configs.iter().enumerate().map(|(i, c)| measure(c, reps, seed.wrapping_add(i as u64))).collect()
}

pub fn complexity_csv(rows: &[ComplexityRow]) -> String {
    let mut s = String::from(
        "T,H,W,P,K,scale,predicted_patch_pairs,measured_patch_pairs,predicted_pixel_pairs,measured_pixel_pairs,\
         plmm_ms,dense_ms,predicted_dense_pixel_pairs,measured_dense_pixel_pairs\n",
    );
    for r in rows {
        let c = &r.config;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{:.3},{:.3},{},{}",
            c.t,
            c.h,
            c.w,
            c.p,
            c.k,
            c.scale,
            r.predicted_patch_pairs,
            r.measured_patch_pairs,
            r.predicted_pixel_pairs,
            r.measured_pixel_pairs,
            r.plmm_ms,
            r.dense_ms,
            r.predicted_dense_pixel_pairs,
            r.measured_dense_pixel_pairs
        );
    }
    s
}
