//! Training-free key and value features, the label decoder, and loading of
//! externally computed feature maps.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::load_features;
use crate::error::{ensure_dims, Error, Result};
use crate::grid::{downsample_avg, resize_bilinear, FeatureGrid, Image, SoftLabelMap};
use crate::pyramid::FeaturePyramid;

/// Pooling factors of the two matching scales.
pub const STRIDE4: usize = 16;
pub const STRIDE3: usize = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    #[default]
    Handcrafted,
    /// Key maps are read from CGRID files instead of being computed.
    ExternalFile,
}

/// How soft labels become value maps and readouts become soft labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueMode {
    /// Space-to-depth: each stride-`s` cell carries the full `s×s` block of
    /// class probabilities, `(L+1)·s²` channels. Decoding is the exact
    /// inverse rearrangement.
    #[default]
    Subpixel,
    /// Area-averaged class probabilities, `L+1` channels, decoded by bilinear
    /// upsampling.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub c_k: usize,
    pub gaussian_sigmas: Vec<f64>,
    pub include_coords: bool,
    pub projection_seed: u64,
    /// Scale applied to the projected keys. Larger values sharpen the
    /// matching softmax.
    pub key_gain: f64,
    pub value_mode: ValueMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Handcrafted,
            c_k: 32,
            gaussian_sigmas: vec![1.0, 2.0, 4.0],
            include_coords: true,
            projection_seed: 0,
            key_gain: 4.0,
            value_mode: ValueMode::Subpixel,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_k == 0 {
            return Err(Error::Parameter("c_k must be at least 1".into()));
        }
        if let Some(s) = self.gaussian_sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!("gaussian sigma {s} must be positive")));
        }
        if !(self.key_gain > 0.0 && self.key_gain.is_finite()) {
            return Err(Error::Parameter(format!("key_gain {} must be positive", self.key_gain)));
        }
        Ok(())
    }

    /// Raw channel count before projection.
    pub fn raw_channel_count(&self) -> usize {
        1 + self.gaussian_sigmas.len() + 2 + if self.include_coords { 2 } else { 0 }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution with edge clamping.
fn blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] =
                k.iter().enumerate().map(|(j, kv)| kv * src[y * w + clamp(x as isize + j as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                k.iter().enumerate().map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x]).sum();
        }
    }
    out
}

fn gradient_magnitude(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: usize, x: usize| src[y * w + x];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1))) / 2.0;
            let gy = (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x)) / 2.0;
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

fn local_std(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut s2) = (0.0, 0.0);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let v = src[yy * w + xx];
                    s += v;
                    s2 += v * v;
                }
            }
            let m = s / 9.0;
            out[y * w + x] = (s2 / 9.0 - m * m).max(0.0).sqrt();
        }
    }
    out
}

fn coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        i as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

/// Full-resolution raw bank: intensity, blurs, gradient magnitude, 3×3
/// local std, then row and column coordinates if enabled.
pub fn raw_channels(image: &Image, cfg: &EncoderConfig) -> Result<FeatureGrid> {
    cfg.validate()?;
    let (h, w) = (image.height(), image.width());
    let src = image.data();
    let mut data = Vec::with_capacity(cfg.raw_channel_count() * h * w);
    data.extend_from_slice(src);
    for &s in &cfg.gaussian_sigmas {
        data.extend(blur(src, h, w, s));
    }
    data.extend(gradient_magnitude(src, h, w));
    data.extend(local_std(src, h, w));
    if cfg.include_coords {
        data.extend((0..h).flat_map(|y| std::iter::repeat_n(coord(y, h), w)));
        data.extend((0..h).flat_map(|_| (0..w).map(|x| coord(x, w))));
    }
    FeatureGrid::new(cfg.raw_channel_count(), h, w, data)
}

fn standardize(grid: FeatureGrid) -> FeatureGrid {
    let (c, h, w) = grid.dims();
    let plane = h * w;
    let mut data = grid.into_data();
    for ch in data.chunks_mut(plane) {
        let mean = ch.iter().sum::<f64>() / plane as f64;
        let var = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64).max(1e-6);
        let inv = 1.0 / var.sqrt();
        ch.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    FeatureGrid::new(c, h, w, data).expect("standardized values are finite")
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    ensure_dims!(h.is_multiple_of(STRIDE4) && w.is_multiple_of(STRIDE4) && h > 0 && w > 0, "frame {h}x{w} is not divisible by 16");
    Ok(())
}

/// Pooled and standardized raw channels at stride 16 and stride 8, before
/// projection.
pub fn standardized_channels(image: &Image, cfg: &EncoderConfig) -> Result<(FeatureGrid, FeatureGrid)> {
    check_divisible(image.height(), image.width())?;
    let raw = raw_channels(image, cfg)?;
    Ok((standardize(downsample_avg(&raw, STRIDE4)?), standardize(downsample_avg(&raw, STRIDE3)?)))
}

/// Seeded projection from the raw bank to `C_k` key channels at both scales.
#[derive(Debug, Clone)]
pub struct KeyEncoder {
    cfg: EncoderConfig,
    proj4: Vec<f64>,
    proj3: Vec<f64>,
}

impl KeyEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.raw_channel_count();
        let scale = cfg.key_gain / (r as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.projection_seed);
        let mut draw = || -> Vec<f64> {
            (0..cfg.c_k * r)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v * scale
                })
                .collect()
        };
        let proj4 = draw();
        let proj3 = draw();
        Ok(Self { cfg: cfg.clone(), proj4, proj3 })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn project(&self, g: &FeatureGrid, proj: &[f64]) -> FeatureGrid {
        let (r, h, w) = g.dims();
        let plane = h * w;
        let mut data = vec![0.0; self.cfg.c_k * plane];
        for (o, out) in data.chunks_mut(plane).enumerate() {
            for i in 0..r {
                let m = proj[o * r + i];
                for (d, s) in out.iter_mut().zip(g.channel(i)) {
                    *d += m * s;
                }
            }
        }
        FeatureGrid::new(self.cfg.c_k, h, w, data).expect("projected keys are finite")
    }

    pub fn encode(&self, image: &Image) -> Result<FeaturePyramid> {
        let (s4, s3) = standardized_channels(image, &self.cfg)?;
        FeaturePyramid::new(self.project(&s4, &self.proj4), self.project(&s3, &self.proj3))
    }
}

/// Key pyramid of one frame (H, W divisible by 16).
pub fn encode_key(image: &Image, cfg: &EncoderConfig) -> Result<FeaturePyramid> {
    KeyEncoder::new(cfg)?.encode(image)
}

fn space_to_depth(soft: &SoftLabelMap, s: usize) -> FeatureGrid {
    let (l, h, w) = (soft.classes(), soft.height(), soft.width());
    let (oh, ow) = (h / s, w / s);
    let mut data = vec![0.0; l * s * s * oh * ow];
    for c in 0..l {
        let src = soft.channel(c);
        for dy in 0..s {
            for dx in 0..s {
                let ch = (c * s + dy) * s + dx;
                let dst = &mut data[ch * oh * ow..(ch + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src[(oy * s + dy) * w + ox * s + dx];
                    }
                }
            }
        }
    }
    FeatureGrid::new(l * s * s, oh, ow, data).expect("probabilities are finite")
}

fn depth_to_space(g: &FeatureGrid, classes: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = (g.height(), g.width());
    let (h, w) = (oh * s, ow * s);
    let mut out = vec![0.0; classes * h * w];
    for c in 0..classes {
        for dy in 0..s {
            for dx in 0..s {
                let src = g.channel((c * s + dy) * s + dx);
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[(c * h + oy * s + dy) * w + ox * s + dx] = src[oy * ow + ox];
                    }
                }
            }
        }
    }
    out
}

/// Value pyramid of a soft label map (H, W divisible by 16).
pub fn encode_value(soft: &SoftLabelMap, mode: ValueMode) -> Result<FeaturePyramid> {
    check_divisible(soft.height(), soft.width())?;
    match mode {
        ValueMode::Subpixel => FeaturePyramid::new(space_to_depth(soft, STRIDE4), space_to_depth(soft, STRIDE3)),
        ValueMode::Pooled => {
            let g = soft.to_grid();
            FeaturePyramid::new(downsample_avg(&g, STRIDE4)?, downsample_avg(&g, STRIDE3)?)
        }
    }
}

fn decode_one(g: &FeatureGrid, classes: usize, stride: usize, mode: ValueMode, h: usize, w: usize) -> Result<Vec<f64>> {
    match mode {
        ValueMode::Subpixel => {
            ensure_dims!(
                g.channels() == classes * stride * stride && g.height() * stride == h && g.width() * stride == w,
                "readout {:?} is not a stride-{stride} subpixel map of {classes} classes at {h}x{w}",
                g.dims()
            );
            Ok(depth_to_space(g, classes, stride))
        }
        ValueMode::Pooled => {
            ensure_dims!(g.channels() == classes, "readout has {} channels, expected {classes}", g.channels());
            let mut out = Vec::with_capacity(classes * h * w);
            for c in 0..classes {
                out.extend(resize_bilinear(g.channel(c), g.height(), g.width(), h, w)?);
            }
            Ok(out)
        }
    }
}

/// Soft labels at `h×w` from the active scale readouts: each is brought to
/// full resolution, the scales are averaged, then clamped and renormalized.
pub fn decode(
    readout3: Option<&FeatureGrid>,
    readout4: Option<&FeatureGrid>,
    classes: usize,
    mode: ValueMode,
    h: usize,
    w: usize,
) -> Result<SoftLabelMap> {
    let parts: Vec<Vec<f64>> = [(readout3, STRIDE3), (readout4, STRIDE4)]
        .into_iter()
        .filter_map(|(g, s)| g.map(|g| decode_one(g, classes, s, mode, h, w)))
        .collect::<Result<_>>()?;
    if parts.is_empty() {
        return Err(Error::Parameter("decode needs at least one scale readout".into()));
    }
    let n = parts.len() as f64;
    let mut data = parts[0].clone();
    for p in &parts[1..] {
        data.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    if parts.len() > 1 {
        data.iter_mut().for_each(|v| *v /= n);
    }
    SoftLabelMap::normalized_from(classes, h, w, data)
}

/// Loads a pyramid from one `CYX` CGRID file per scale.
pub fn load_feature_pyramid(scale4: impl AsRef<Path>, scale3: impl AsRef<Path>) -> Result<FeaturePyramid> {
    FeaturePyramid::new(load_features(scale4)?, load_features(scale3)?)
}
