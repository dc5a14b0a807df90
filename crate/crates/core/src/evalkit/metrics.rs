use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{ensure_dims, Result};
use crate::grid::{class, LabelMap, LabelVolume};
use crate::par;
use crate::propagator::{Region, RegionPartition};

/// Anything that exposes a flat label array with a shape.
pub trait LabelGrid {
    fn shape(&self) -> Vec<usize>;
    fn labels(&self) -> &[u8];
}

impl LabelGrid for LabelMap {
    fn shape(&self) -> Vec<usize> {
        vec![self.height(), self.width()]
    }
    fn labels(&self) -> &[u8] {
        self.data()
    }
}

impl LabelGrid for LabelVolume {
    fn shape(&self) -> Vec<usize> {
        self.dims().to_vec()
    }
    fn labels(&self) -> &[u8] {
        self.data()
    }
}

/// Intersection and total size counts for one label.
fn overlap(pred: &[u8], truth: &[u8], label: u8) -> (u64, u64) {
    let mut inter = 0;
    let mut total = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        let (a, b) = (p == label, t == label);
        inter += (a && b) as u64;
        total += a as u64 + b as u64;
    }
    (inter, total)
}

fn dice_from(inter: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both are empty.
pub fn dice<G: LabelGrid>(pred: &G, truth: &G, label: u8) -> Result<f64> {
    ensure_dims!(pred.shape() == truth.shape(), "shapes {:?} and {:?} differ", pred.shape(), truth.shape());
    let (i, t) = overlap(pred.labels(), truth.labels(), label);
    Ok(dice_from(i, t))
}

/// Labeled pixels with an unlabeled 4-neighbor; the image border counts
/// as unlabeled.
fn boundary(map: &[u8], h: usize, w: usize, label: u8) -> Vec<(usize, usize)> {
    let at = |y: usize, x: usize| map[y * w + x] == label;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !at(y, x) {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            if edge || !at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1) {
                out.push((y, x));
            }
        }
    }
    out
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)], spacing: (f64, f64), out: &mut Vec<f64>) {
    for &(y, x) in from {
        let mut best = f64::INFINITY;
        for &(v, u) in to {
            let dy = (y as f64 - v as f64) * spacing.0;
            let dx = (x as f64 - u as f64) * spacing.1;
            best = best.min(dy * dy + dx * dx);
        }
        out.push(best.sqrt());
    }
}

fn hd95_raw(pred: &[u8], truth: &[u8], h: usize, w: usize, label: u8, spacing: (f64, f64)) -> Option<f64> {
    let a = boundary(pred, h, w, label);
    let b = boundary(truth, h, w, label);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let mut d = Vec::with_capacity(a.len() + b.len());
    directed(&a, &b, spacing, &mut d);
    directed(&b, &a, spacing, &mut d);
    d.sort_by(f64::total_cmp);
    let rank = (0.95 * d.len() as f64).ceil() as usize;
    Some(d[rank.max(1) - 1])
}

/// 95th-percentile symmetric boundary distance in mm (nearest rank over
/// both directed distance sets pooled). `None` when either mask is empty.
pub fn hd95(pred: &LabelMap, truth: &LabelMap, label: u8, spacing_mm: (f64, f64)) -> Result<Option<f64>> {
    ensure_dims!(pred.shape() == truth.shape(), "shapes {:?} and {:?} differ", pred.shape(), truth.shape());
    ensure_dims!(spacing_mm.0 > 0.0 && spacing_mm.1 > 0.0, "spacing {spacing_mm:?} must be positive");
    Ok(hd95_raw(pred.data(), truth.data(), pred.height(), pred.width(), label, spacing_mm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKey {
    Basal,
    Middle,
    Apex,
    Whole,
}

impl RegionKey {
    pub const ALL: [RegionKey; 4] = [RegionKey::Basal, RegionKey::Middle, RegionKey::Apex, RegionKey::Whole];

    pub fn name(self) -> &'static str {
        match self {
            RegionKey::Basal => "basal",
            RegionKey::Middle => "middle",
            RegionKey::Apex => "apex",
            RegionKey::Whole => "whole",
        }
    }
}

impl From<Region> for RegionKey {
    fn from(r: Region) -> Self {
        match r {
            Region::Basal => RegionKey::Basal,
            Region::Middle => RegionKey::Middle,
            Region::Apex => RegionKey::Apex,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub region: RegionKey,
    /// Class name, or `Avg` for the mean over the three classes.
    pub class: String,
    pub dice: f64,
    pub hd95_mm: Option<f64>,
    pub n_frames: usize,
    pub n_excluded_hd: usize,
    /// Voxels of this class in prediction plus truth.
    #[serde(skip)]
    pub voxels: u64,
}

/// Per region and class Dice (pooled over the region's voxels) and HD95
/// (mean over frames where both masks are present).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

#[derive(Clone, Copy, Default)]
struct FrameStats {
    inter: u64,
    total: u64,
    hd: Option<f64>,
}

pub fn report_by_region(
    pred: &LabelVolume,
    truth: &LabelVolume,
    partition: &RegionPartition,
    spacing_mm: (f64, f64),
) -> Result<MetricsReport> {
    ensure_dims!(pred.dims() == truth.dims(), "volumes {:?} and {:?} differ", pred.dims(), truth.dims());
    let [z_count, t_count, h, w] = pred.dims();
    ensure_dims!(partition.slices() == z_count, "partition covers {} slices, volume has {z_count}", partition.slices());
    ensure_dims!(spacing_mm.0 > 0.0 && spacing_mm.1 > 0.0, "spacing {spacing_mm:?} must be positive");

    let frames: Vec<[FrameStats; 3]> = par::map_range(z_count * t_count, |i| {
        let (z, t) = (i / t_count, i % t_count);
        let (p, q) = (pred.frame_slice(z, t), truth.frame_slice(z, t));
        class::FOREGROUND.map(|c| {
            let (inter, total) = overlap(p, q, c);
            FrameStats { inter, total, hd: hd95_raw(p, q, h, w, c, spacing_mm) }
        })
    });

    let mut rows = Vec::new();
    for key in RegionKey::ALL {
        let slices = match key {
            RegionKey::Basal => partition.basal(),
            RegionKey::Middle => partition.middle(),
            RegionKey::Apex => partition.apex(),
            RegionKey::Whole => 0..z_count,
        };
        let n_frames = slices.len() * t_count;
        let mut class_rows = Vec::new();
        for (ci, &c) in class::FOREGROUND.iter().enumerate() {
            let (mut inter, mut total, mut hd_sum, mut hd_n) = (0, 0, 0.0, 0usize);
            for z in slices.clone() {
                for t in 0..t_count {
                    let s = frames[z * t_count + t][ci];
                    inter += s.inter;
                    total += s.total;
                    if let Some(d) = s.hd {
                        hd_sum += d;
                        hd_n += 1;
                    }
                }
            }
            class_rows.push(MetricsRow {
                region: key,
                class: class::name(c).to_string(),
                dice: dice_from(inter, total),
                hd95_mm: (hd_n > 0).then(|| hd_sum / hd_n as f64),
                n_frames,
                n_excluded_hd: n_frames - hd_n,
                voxels: total,
            });
        }
        let hds: Vec<f64> = class_rows.iter().filter_map(|r| r.hd95_mm).collect();
        let avg = MetricsRow {
            region: key,
            class: "Avg".into(),
            dice: class_rows.iter().map(|r| r.dice).sum::<f64>() / class_rows.len() as f64,
            hd95_mm: (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64),
            n_frames,
            n_excluded_hd: class_rows.iter().map(|r| r.n_excluded_hd).sum(),
            voxels: class_rows.iter().map(|r| r.voxels).sum(),
        };
        rows.extend(class_rows);
        rows.push(avg);
    }
    Ok(MetricsReport { rows })
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "method,region,class,dice,hd95_mm,n_frames,n_excluded_hd";

    pub fn row(&self, region: RegionKey, class: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.region == region && r.class == class)
    }

    /// Whole-heart mean Dice over the three classes.
    pub fn whole_avg_dice(&self) -> f64 {
        self.row(RegionKey::Whole, "Avg").map(|r| r.dice).unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self, method: &str) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let hd = r.hd95_mm.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{method},{},{},{:.6},{hd},{},{}",
                r.region.name(),
                r.class,
                r.dice,
                r.n_frames,
                r.n_excluded_hd
            );
        }
        s
    }

    /// Fixed-width table grouped by region.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:<5} {:>7} {:>9} {:>8}\n", "region", "class", "dice", "hd95_mm", "excl_hd");
        for key in RegionKey::ALL {
            for r in self.rows.iter().filter(|r| r.region == key) {
                let hd = r.hd95_mm.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
                let _ = writeln!(s, "{:<8} {:<5} {:>7.3} {:>9} {:>8}", key.name(), r.class, r.dice, hd, r.n_excluded_hd);
            }
        }
        s
    }
}
