use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Basal,
    Middle,
    Apex,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Basal, Region::Middle, Region::Apex];

    pub fn name(self) -> &'static str {
        match self {
            Region::Basal => "basal",
            Region::Middle => "middle",
            Region::Apex => "apex",
        }
    }
}

/// Contiguous base, middle and apex slice ranges covering `0..Z`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    basal: Range<usize>,
    middle: Range<usize>,
    apex: Range<usize>,
}

fn ceil_frac(z: usize, f: f64) -> usize {
    // Guard against 9·(1/3) landing a hair above 3.
    (z as f64 * f - 1e-9).ceil().max(0.0) as usize
}

/// Basal = first `⌈Z·basal_frac⌉` slices, apex = last `⌈Z·apex_frac⌉`,
/// middle = the rest. Stacks of one or two slices are all middle.
pub fn partition_regions(z_count: usize, fractions: (f64, f64)) -> Result<RegionPartition> {
    let (bf, af) = fractions;
    if !(bf > 0.0 && af > 0.0 && bf + af < 1.0) {
        return Err(Error::Partition(format!("fractions {fractions:?} must be positive with sum below 1")));
    }
    if z_count == 0 {
        return Err(Error::Partition("slice count must be positive".into()));
    }
    if z_count < 3 {
        return Ok(RegionPartition { basal: 0..0, middle: 0..z_count, apex: z_count..z_count });
    }
    let nb = ceil_frac(z_count, bf);
    let na = ceil_frac(z_count, af);
    if nb + na >= z_count {
        return Err(Error::Partition(format!(
            "{nb} basal and {na} apical slices leave no middle region in a stack of {z_count}"
        )));
    }
    Ok(RegionPartition { basal: 0..nb, middle: nb..z_count - na, apex: z_count - na..z_count })
}

impl RegionPartition {
    pub fn basal(&self) -> Range<usize> {
        self.basal.clone()
    }
    pub fn middle(&self) -> Range<usize> {
        self.middle.clone()
    }
    pub fn apex(&self) -> Range<usize> {
        self.apex.clone()
    }
    pub fn slices(&self) -> usize {
        self.apex.end
    }

    pub fn range(&self, r: Region) -> Range<usize> {
        match r {
            Region::Basal => self.basal(),
            Region::Middle => self.middle(),
            Region::Apex => self.apex(),
        }
    }

    pub fn region_of(&self, z: usize) -> Option<Region> {
        Region::ALL.into_iter().find(|r| self.range(*r).contains(&z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const THIRDS: (f64, f64) = (1.0 / 3.0, 1.0 / 3.0);

    #[test]
    fn nine_slices_in_thirds() {
        let p = partition_regions(9, THIRDS).unwrap();
        assert_eq!((p.basal(), p.middle(), p.apex()), (0..3, 3..6, 6..9));
    }

    #[test]
    fn ten_slices_round_up_outer_regions() {
        let p = partition_regions(10, THIRDS).unwrap();
        assert_eq!((p.basal(), p.middle(), p.apex()), (0..4, 4..6, 6..10));
    }

    #[test]
    fn empty_middle_is_an_error() {
        assert!(matches!(partition_regions(3, (0.45, 0.45)), Err(Error::Partition(_))));
        assert!(matches!(partition_regions(9, (0.5, 0.5)), Err(Error::Partition(_))));
        assert!(matches!(partition_regions(9, (0.0, 0.3)), Err(Error::Partition(_))));
    }

    #[test]
    fn tiny_stacks_are_middle_only() {
        let p = partition_regions(1, THIRDS).unwrap();
        assert_eq!(p.region_of(0), Some(Region::Middle));
        assert_eq!(p.basal().len() + p.apex().len(), 0);
    }

    #[test]
    fn partitions_cover_the_stack() {
        for z in 1..40 {
            for (b, a) in [(0.1, 0.1), (1.0 / 3.0, 1.0 / 3.0), (0.2, 0.4), (0.05, 0.5)] {
                if let Ok(p) = partition_regions(z, (b, a)) {
                    assert_eq!(p.basal().start, 0);
                    assert_eq!(p.basal().end, p.middle().start);
                    assert_eq!(p.middle().end, p.apex().start);
                    assert_eq!(p.apex().end, z);
                    assert!(!p.middle().is_empty());
                    assert!((0..z).all(|s| p.region_of(s).is_some()));
                }
            }
        }
    }
}
