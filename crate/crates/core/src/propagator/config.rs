use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::STRIDE4;
use crate::matcher::PlmmParams;
use crate::patcher::is_admissible;
use crate::pyramid::Scales;

use super::region::{partition_regions, Region, RegionPartition};

/// Which continuity directions propagation may use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinuityMode {
    #[default]
    Both,
    SpatialOnly,
    TemporalOnly,
}

impl std::str::FromStr for ContinuityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "spatial-only" | "spatial" => Ok(Self::SpatialOnly),
            "temporal-only" | "temporal" => Ok(Self::TemporalOnly),
            _ => Err(Error::Parameter(format!("unknown continuity mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatcherMode {
    #[default]
    Plmm,
    Dense,
}

impl std::str::FromStr for MatcherMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plmm" => Ok(Self::Plmm),
            "dense" => Ok(Self::Dense),
            _ => Err(Error::Parameter(format!("unknown matcher {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    /// Annotated slice; `None` means `⌊Z/2⌋`.
    pub z0: Option<usize>,
    pub t0: usize,
    pub patch: usize,
    pub k: usize,
    pub scales: Scales,
    pub region_fractions: (f64, f64),
    pub apex_t_max: usize,
    pub continuity_mode: ContinuityMode,
    pub matcher: MatcherMode,
    /// Frames are resampled so their shorter side is about this long before
    /// feature extraction.
    pub work_short_side: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            z0: None,
            t0: 0,
            patch: 6,
            k: 4,
            scales: Scales::Both,
            region_fractions: (1.0 / 3.0, 1.0 / 3.0),
            apex_t_max: 3,
            continuity_mode: ContinuityMode::Both,
            matcher: MatcherMode::Plmm,
            work_short_side: 384,
        }
    }
}

impl PropagationConfig {
    pub fn z0_for(&self, z_count: usize) -> usize {
        self.z0.unwrap_or(z_count / 2)
    }

    pub fn plmm_params(&self) -> PlmmParams {
        PlmmParams { patch: self.patch, k: self.k }
    }

    /// Checks the config against a `Z×T` volume and returns its partition.
    pub fn validate(&self, z_count: usize, t_count: usize) -> Result<RegionPartition> {
        if self.patch == 0 || !self.patch.is_multiple_of(2) {
            return Err(Error::Parameter(format!("patch size {} must be even and positive", self.patch)));
        }
        if self.k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        if self.apex_t_max < 2 {
            return Err(Error::Parameter(format!("apex_t_max {} must be at least 2", self.apex_t_max)));
        }
        if self.work_short_side < STRIDE4 {
            return Err(Error::Parameter(format!("work_short_side {} must be at least 16", self.work_short_side)));
        }
        if self.t0 >= t_count {
            return Err(Error::Parameter(format!("t0 {} outside 0..{t_count}", self.t0)));
        }
        let z0 = self.z0_for(z_count);
        if z0 >= z_count {
            return Err(Error::Parameter(format!("z0 {z0} outside 0..{z_count}")));
        }
        let partition = partition_regions(z_count, self.region_fractions)?;
        if partition.region_of(z0) != Some(Region::Middle) {
            return Err(Error::Parameter(format!(
                "z0 {z0} must lie in the middle region {:?}",
                partition.middle()
            )));
        }
        Ok(partition)
    }
}

/// Smallest admissible dimension at or above `target`: a multiple of 16
/// whose stride-16 extent tiles with patch `patch`.
fn admissible_at_least(target: usize, patch: usize) -> usize {
    let mut m = target.div_ceil(STRIDE4).max(patch);
    while !is_admissible(m, patch) {
        m += 1;
    }
    m * STRIDE4
}

/// Working resolution for `h×w` frames: the shorter side is scaled to
/// `short_side`, then each side is rounded up to the next admissible size.
pub fn working_dims(h: usize, w: usize, short_side: usize, patch: usize) -> Result<(usize, usize)> {
    if h == 0 || w == 0 {
        return Err(Error::Dimension(format!("frame {h}x{w} is empty")));
    }
    if patch == 0 || !patch.is_multiple_of(2) {
        return Err(Error::Parameter(format!("patch size {patch} must be even and positive")));
    }
    let scale = short_side as f64 / h.min(w) as f64;
    let target = |d: usize| ((d as f64 * scale).round() as usize).max(1);
    Ok((admissible_at_least(target(h), patch), admissible_at_least(target(w), patch)))
}
