//! Dense arrays: feature maps, single-channel images, label maps and 4D cine
//! volumes, plus the resampling primitives shared by the pipeline.
//!
//! Storage order is fixed: grids are `C,Y,X`, volumes are `Z,T,Y,X`, planes
//! are `Y,X`, all row-major.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};

/// Number of foreground classes (LV, Myo, RV).
pub const NUM_FG: usize = 3;

/// Class ids stored in label volumes.
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const LV: u8 = 1;
    pub const MYO: u8 = 2;
    pub const RV: u8 = 3;

    pub const FOREGROUND: [u8; 3] = [LV, MYO, RV];

    pub fn name(label: u8) -> &'static str {
        match label {
            BACKGROUND => "BG",
            LV => "LV",
            MYO => "Myo",
            RV => "RV",
            _ => "?",
        }
    }
}

/// A `C×H×W` real-valued feature map at one pyramid scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dims!(
            data.len() == channels * height * width,
            "feature grid {channels}x{height}x{width} needs {} values, got {}",
            channels * height * width,
            data.len()
        );
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("non-finite feature value at index {bad}")));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    /// Builds a grid from a function of `(channel, row, col)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Copies the grid into pixel-major (`Y,X,C`) order.
    pub fn to_pixel_major(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            let src = &self.data[c * plane..(c + 1) * plane];
            for (p, &v) in src.iter().enumerate() {
                out[p * self.channels + c] = v;
            }
        }
        out
    }

    /// Inverse of [`FeatureGrid::to_pixel_major`].
    pub fn from_pixel_major(channels: usize, height: usize, width: usize, pm: &[f64]) -> Result<Self> {
        ensure_dims!(pm.len() == channels * height * width, "pixel-major buffer length mismatch");
        let plane = height * width;
        let mut data = vec![0.0; pm.len()];
        for p in 0..plane {
            for c in 0..channels {
                data[c * plane + p] = pm[p * channels + c];
            }
        }
        Self::new(channels, height, width, data)
    }

    /// Mirrors every channel left to right.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// A single-channel real image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dims!(data.len() == height * width, "image {height}x{width} needs {} values", height * width);
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let data = resize_bilinear(&self.data, self.height, self.width, out_h, out_w)?;
        Ok(Self { height: out_h, width: out_w, data })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }
}

/// A 2D integer label map with values in `{0..=3}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure_dims!(data.len() == height * width, "label map {height}x{width} needs {} values", height * width);
        check_labels(&data)?;
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.data[y * self.width + x] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }
}

fn check_labels(data: &[u8]) -> Result<()> {
    match data.iter().position(|&v| v as usize > NUM_FG) {
        Some(i) => Err(Error::Label(format!("label {} at index {i} outside 0..={NUM_FG}", data[i]))),
        None => Ok(()),
    }
}

/// Per-pixel class probabilities, class-major (`L+1, Y, X`).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SoftLabelMap {
    /// Tolerance on the per-pixel probability sum.
    pub const SUM_TOL: f64 = 1e-5;

    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dims!(data.len() == classes * height * width, "soft label map length mismatch");
        let map = Self { classes, height, width, data };
        map.check_normalized()?;
        Ok(map)
    }

    /// Clamps to `[0,1]` and rescales every pixel to sum to one. Pixels whose
    /// mass vanishes entirely become background.
    pub fn normalized_from(classes: usize, height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        ensure_dims!(data.len() == classes * height * width, "soft label map length mismatch");
        let plane = height * width;
        for p in 0..plane {
            let mut sum = 0.0;
            for c in 0..classes {
                let v = &mut data[c * plane + p];
                *v = v.clamp(0.0, 1.0);
                sum += *v;
            }
            if sum > 0.0 {
                for c in 0..classes {
                    data[c * plane + p] /= sum;
                }
            } else {
                data[p] = 1.0;
            }
        }
        Ok(Self { classes, height, width, data })
    }

    fn check_normalized(&self) -> Result<()> {
        let plane = self.height * self.width;
        for p in 0..plane {
            let mut sum = 0.0;
            for c in 0..self.classes {
                let v = self.data[c * plane + p];
                if v.is_nan() || v < 0.0 {
                    return Err(Error::Label(format!("negative or NaN probability at pixel {p}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > Self::SUM_TOL {
                return Err(Error::Label(format!("pixel {p} probabilities sum to {sum}")));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    #[inline]
    pub fn prob(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Views the probabilities as a feature grid with one channel per class.
    pub fn to_grid(&self) -> FeatureGrid {
        FeatureGrid { channels: self.classes, height: self.height, width: self.width, data: self.data.clone() }
    }

    /// Bilinear resize of every class plane followed by renormalization.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if (out_h, out_w) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(self.classes * out_h * out_w);
        for c in 0..self.classes {
            data.extend(resize_bilinear(&self.data[c * plane..(c + 1) * plane], self.height, self.width, out_h, out_w)?);
        }
        Self::normalized_from(self.classes, out_h, out_w, data)
    }

    /// Per-pixel argmax; ties go to the lower class id.
    pub fn argmax(&self) -> LabelMap {
        let plane = self.height * self.width;
        let data = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.data[c * plane + p] > self.data[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap { height: self.height, width: self.width, data }
    }
}

/// `Z×T×H×W` intensities in `[0,1]` with in-plane pixel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct CineVolume {
    slices: usize,
    phases: usize,
    height: usize,
    width: usize,
    spacing_mm: (f64, f64),
    data: Vec<f64>,
}

fn check_spacing(spacing: (f64, f64)) -> Result<()> {
    if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.0.is_finite() && spacing.1.is_finite()) {
        return Err(Error::Dimension(format!("pixel spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

impl CineVolume {
    pub fn new(dims: [usize; 4], spacing_mm: (f64, f64), data: Vec<f64>) -> Result<Self> {
        let [slices, phases, height, width] = dims;
        ensure_dims!(slices >= 1, "cine volume needs at least one slice");
        ensure_dims!(phases >= 2, "cine volume needs at least two phases, got {phases}");
        ensure_dims!(data.len() == slices * phases * height * width, "cine payload length mismatch");
        check_spacing(spacing_mm)?;
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dimension(format!("intensity {} at index {i} outside [0,1]", data[i])));
        }
        Ok(Self { slices, phases, height, width, spacing_mm, data })
    }

    /// Min-max rescales arbitrary finite intensities to `[0,1]`. Data already
    /// inside `[0,1]` is kept verbatim.
    pub fn normalized(dims: [usize; 4], spacing_mm: (f64, f64), mut data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("non-finite intensity at index {i}")));
        }
        let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo < 0.0 || hi > 1.0 {
            let span = hi - lo;
            for v in &mut data {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
        Self::new(dims, spacing_mm, data)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.slices, self.phases, self.height, self.width]
    }
    pub fn slices(&self) -> usize {
        self.slices
    }
    pub fn phases(&self) -> usize {
        self.phases
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn spacing_mm(&self) -> (f64, f64) {
        self.spacing_mm
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, z: usize, t: usize) -> Image {
        let plane = self.height * self.width;
        let start = (z * self.phases + t) * plane;
        Image { height: self.height, width: self.width, data: self.data[start..start + plane].to_vec() }
    }

    /// Reverses the slice axis.
    pub fn flip_z(&self) -> Self {
        let block = self.phases * self.height * self.width;
        let data = self.data.chunks(block).rev().flatten().copied().collect();
        Self { data, ..self.clone() }
    }
}

/// `Z×T×H×W` integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    slices: usize,
    phases: usize,
    height: usize,
    width: usize,
    spacing_mm: (f64, f64),
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 4], spacing_mm: (f64, f64), data: Vec<u8>) -> Result<Self> {
        let [slices, phases, height, width] = dims;
        ensure_dims!(data.len() == slices * phases * height * width, "label payload length mismatch");
        check_spacing(spacing_mm)?;
        check_labels(&data)?;
        Ok(Self { slices, phases, height, width, spacing_mm, data })
    }

    pub fn zeros(dims: [usize; 4], spacing_mm: (f64, f64)) -> Self {
        let [slices, phases, height, width] = dims;
        Self { slices, phases, height, width, spacing_mm, data: vec![0; slices * phases * height * width] }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.slices, self.phases, self.height, self.width]
    }
    pub fn slices(&self) -> usize {
        self.slices
    }
    pub fn phases(&self) -> usize {
        self.phases
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn spacing_mm(&self) -> (f64, f64) {
        self.spacing_mm
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    fn frame_range(&self, z: usize, t: usize) -> std::ops::Range<usize> {
        let plane = self.height * self.width;
        let start = (z * self.phases + t) * plane;
        start..start + plane
    }

    pub fn frame(&self, z: usize, t: usize) -> LabelMap {
        LabelMap { height: self.height, width: self.width, data: self.data[self.frame_range(z, t)].to_vec() }
    }

    pub fn frame_slice(&self, z: usize, t: usize) -> &[u8] {
        &self.data[self.frame_range(z, t)]
    }

    pub fn set_frame(&mut self, z: usize, t: usize, map: &LabelMap) -> Result<()> {
        ensure_dims!(
            map.height == self.height && map.width == self.width,
            "frame {}x{} does not fit volume plane {}x{}",
            map.height,
            map.width,
            self.height,
            self.width
        );
        let range = self.frame_range(z, t);
        self.data[range].copy_from_slice(&map.data);
        Ok(())
    }

    pub fn flip_z(&self) -> Self {
        let block = self.phases * self.height * self.width;
        let data = self.data.chunks(block).rev().flatten().copied().collect();
        Self { data, ..self.clone() }
    }
}

/// Bilinear resampling of a row-major `h×w` plane.
///
/// Uses half-pixel centers: output pixel `i` samples source coordinate
/// `(i + 0.5)·in/out − 0.5`, clamped to the valid range. Integer down-scaling
/// by an odd factor therefore hits source pixel centers exactly.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter(format!("resize target {out_h}x{out_w} must be at least 1x1")));
    }
    ensure_dims!(src.len() == h * w && h > 0 && w > 0, "resize source length mismatch");
    if (h, w) == (out_h, out_w) {
        return Ok(src.to_vec());
    }
    let ys = sample_axis(h, out_h);
    let xs = sample_axis(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    Ok(out)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn sample_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * input as f64 / output as f64 - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Non-overlapping `factor×factor` mean pooling of every channel.
pub fn downsample_avg(grid: &FeatureGrid, factor: usize) -> Result<FeatureGrid> {
    if factor == 0 {
        return Err(Error::Parameter("pooling factor must be positive".into()));
    }
    ensure_dims!(
        grid.height.is_multiple_of(factor) && grid.width.is_multiple_of(factor),
        "grid {}x{} not divisible by pooling factor {factor}",
        grid.height,
        grid.width
    );
    let (oh, ow) = (grid.height / factor, grid.width / factor);
    let norm = (factor * factor) as f64;
    let mut data = Vec::with_capacity(grid.channels * oh * ow);
    for c in 0..grid.channels {
        let plane = grid.channel(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0;
                for y in oy * factor..(oy + 1) * factor {
                    let row = &plane[y * grid.width + ox * factor..y * grid.width + (ox + 1) * factor];
                    sum += row.iter().sum::<f64>();
                }
                data.push(sum / norm);
            }
        }
    }
    Ok(FeatureGrid { channels: grid.channels, height: oh, width: ow, data })
}

/// One probability channel per class: background plus `num_fg` foreground.
pub fn one_hot(labels: &LabelMap, num_fg: usize) -> Result<SoftLabelMap> {
    if let Some(&bad) = labels.data.iter().find(|&&v| v as usize > num_fg) {
        return Err(Error::Label(format!("label {bad} outside 0..={num_fg}")));
    }
    let plane = labels.height * labels.width;
    let classes = num_fg + 1;
    let mut data = vec![0.0; classes * plane];
    for (p, &l) in labels.data.iter().enumerate() {
        data[l as usize * plane + p] = 1.0;
    }
    Ok(SoftLabelMap { classes, height: labels.height, width: labels.width, data })
}

/// On-disk legend for label volumes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabelLegend(pub std::collections::BTreeMap<String, String>);

impl Default for LabelLegend {
    fn default() -> Self {
        Self(
            [("1", "LV"), ("2", "Myo"), ("3", "RV")]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }
}
