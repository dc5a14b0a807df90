//! Which frame is segmented when, and with which memory frames.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ContinuityMode;
use super::region::{Region, RegionPartition};

/// A `(slice, phase)` frame coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameId {
    pub z: usize,
    pub t: usize,
}

impl FrameId {
    pub fn new(z: usize, t: usize) -> Self {
        Self { z, t }
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.z, self.t)
    }
}

impl std::str::FromStr for FrameId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("frame id {s:?} is not \"z,t\""));
        let (z, t) = s.split_once(',').ok_or_else(bad)?;
        Ok(Self { z: z.trim().parse().map_err(|_| bad())?, t: t.trim().parse().map_err(|_| bad())? })
    }
}

/// Which rule produced a step's memory bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankRule {
    Temporal,
    /// Basal and middle slices on a z-pass.
    Spatial,
    Apex,
}

/// One query frame and the memory frames it reads from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub query: FrameId,
    pub bank: Vec<FrameId>,
    pub rule: BankRule,
    pub t_max: usize,
}

/// Inputs of the scheduling policy.
#[derive(Debug, Clone)]
pub struct SchedulePlan<'a> {
    pub partition: &'a RegionPartition,
    pub t_count: usize,
    pub z0: usize,
    pub t0: usize,
    pub apex_t_max: usize,
    pub continuity: ContinuityMode,
}

/// Phases in processing order: `t0` forward to the last phase, then the
/// phases before `t0` walking backward.
pub fn phase_order(t0: usize, t_count: usize) -> Vec<usize> {
    (t0..t_count).chain((0..t0).rev()).collect()
}

/// The phase processed just before `t` on the temporal chain from `t0`.
pub fn chain_prev(t: usize, t0: usize) -> Option<usize> {
    match t.cmp(&t0) {
        std::cmp::Ordering::Greater => Some(t - 1),
        std::cmp::Ordering::Less => Some(t + 1),
        std::cmp::Ordering::Equal => None,
    }
}

fn push_unique(bank: &mut Vec<FrameId>, f: FrameId) {
    if !bank.contains(&f) {
        bank.push(f);
    }
}

impl SchedulePlan<'_> {
    fn anchor(&self) -> FrameId {
        FrameId::new(self.z0, self.t0)
    }

    fn temporal_step(&self, z: usize, t: usize, first: FrameId) -> Step {
        let mut bank = vec![first];
        if let Some(p) = chain_prev(t, self.t0) {
            push_unique(&mut bank, FrameId::new(z, p));
        }
        Step { query: FrameId::new(z, t), bank, rule: BankRule::Temporal, t_max: 2 }
    }

    /// The z-pass step for slice `z` at phase `tau`, reading the already
    /// segmented neighbor `z_prev` one step closer to `z0`.
    pub fn z_step(&self, z: usize, z_prev: usize, tau: usize) -> Step {
        let mut bank = vec![self.anchor()];
        push_unique(&mut bank, FrameId::new(z_prev, tau));
        let apex = self.partition.region_of(z) == Some(Region::Apex);
        if !apex {
            return Step { query: FrameId::new(z, tau), bank, rule: BankRule::Spatial, t_max: 2 };
        }
        if self.continuity == ContinuityMode::Both {
            let mut t = tau;
            while bank.len() < self.apex_t_max {
                match chain_prev(t, self.t0) {
                    Some(p) => {
                        push_unique(&mut bank, FrameId::new(z, p));
                        t = p;
                    }
                    None => break,
                }
            }
        }
        Step { query: FrameId::new(z, tau), bank, rule: BankRule::Apex, t_max: self.apex_t_max }
    }

    fn z_pass(&self, tau: usize, steps: &mut Vec<Step>) {
        for z in (0..self.z0).rev() {
            steps.push(self.z_step(z, z + 1, tau));
        }
        for z in self.z0 + 1..self.partition.slices() {
            steps.push(self.z_step(z, z - 1, tau));
        }
    }

    /// Every non-anchor frame exactly once, in execution order.
    pub fn build(&self) -> Vec<Step> {
        let phases = phase_order(self.t0, self.t_count);
        let mut steps = Vec::new();
        match self.continuity {
            ContinuityMode::Both | ContinuityMode::SpatialOnly => {
                for &t in &phases[1..] {
                    steps.push(self.temporal_step(self.z0, t, self.anchor()));
                }
                for &tau in &phases {
                    self.z_pass(tau, &mut steps);
                }
            }
            ContinuityMode::TemporalOnly => {
                self.z_pass(self.t0, &mut steps);
                let slices = std::iter::once(self.z0).chain((0..self.partition.slices()).filter(|&z| z != self.z0));
                for z in slices {
                    for &t in &phases[1..] {
                        steps.push(self.temporal_step(z, t, FrameId::new(z, self.t0)));
                    }
                }
            }
        }
        steps
    }
}

/// Checks completeness, bank capacity, anchor presence (for rules that
/// require it) and dependency order.
pub fn validate_schedule(
    steps: &[Step],
    anchor: FrameId,
    z_count: usize,
    t_count: usize,
    continuity: ContinuityMode,
) -> Result<()> {
    let mut done: BTreeSet<FrameId> = BTreeSet::from([anchor]);
    for s in steps {
        if s.query.z >= z_count || s.query.t >= t_count {
            return Err(Error::Scheduling(format!("frame {} outside the volume", s.query)));
        }
        if s.bank.is_empty() || s.bank.len() > s.t_max {
            return Err(Error::Scheduling(format!("bank of {} holds {} entries (max {})", s.query, s.bank.len(), s.t_max)));
        }
        let needs_anchor = continuity != ContinuityMode::TemporalOnly || s.rule != BankRule::Temporal;
        if needs_anchor && !s.bank.contains(&anchor) {
            return Err(Error::Scheduling(format!("bank of {} lacks the anchor {anchor}", s.query)));
        }
        if let Some(m) = s.bank.iter().find(|m| !done.contains(m)) {
            return Err(Error::Scheduling(format!("{} reads {m} before it is segmented", s.query)));
        }
        if !done.insert(s.query) {
            return Err(Error::Scheduling(format!("frame {} segmented twice", s.query)));
        }
    }
    if done.len() != z_count * t_count {
        return Err(Error::Scheduling(format!("{} of {} frames segmented", done.len(), z_count * t_count)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagator::region::partition_regions;

    fn f(z: usize, t: usize) -> FrameId {
        FrameId::new(z, t)
    }

    fn plan(p: &RegionPartition, t_count: usize, z0: usize, t0: usize, continuity: ContinuityMode) -> SchedulePlan<'_> {
        SchedulePlan { partition: p, t_count, z0, t0, apex_t_max: 3, continuity }
    }

    fn find(steps: &[Step], q: FrameId) -> &Step {
        steps.iter().find(|s| s.query == q).unwrap()
    }

    #[test]
    fn default_policy_matches_the_rules() {
        let p = partition_regions(9, (1.0 / 3.0, 1.0 / 3.0)).unwrap();
        let steps = plan(&p, 10, 4, 0, ContinuityMode::Both).build();
        validate_schedule(&steps, f(4, 0), 9, 10, ContinuityMode::Both).unwrap();
        assert_eq!(steps.len(), 89);
        assert_eq!(find(&steps, f(4, 1)).bank, vec![f(4, 0)]);
        assert_eq!(find(&steps, f(4, 5)).bank, vec![f(4, 0), f(4, 4)]);
        assert_eq!(find(&steps, f(3, 6)).bank, vec![f(4, 0), f(4, 6)]);
        assert_eq!(find(&steps, f(5, 6)).bank, vec![f(4, 0), f(4, 6)]);
        assert_eq!(find(&steps, f(8, 3)).bank, vec![f(4, 0), f(7, 3), f(8, 2)]);
        assert_eq!(find(&steps, f(6, 0)).bank, vec![f(4, 0), f(5, 0)]);
        assert_eq!(find(&steps, f(3, 0)).bank, vec![f(4, 0)]);
        // temporal pass first, then z-passes by ascending phase, base before apex
        assert_eq!(steps[8].query, f(4, 9));
        assert_eq!(steps[9].query, f(3, 0));
        assert_eq!(steps[13].query, f(5, 0));
    }

    #[test]
    fn tiny_volume_counts() {
        let p = partition_regions(3, (0.2, 0.2)).unwrap();
        assert_eq!((p.basal(), p.middle(), p.apex()), (0..1, 1..2, 2..3));
        let steps = plan(&p, 2, 1, 0, ContinuityMode::Both).build();
        assert_eq!(steps.len(), 5);
        validate_schedule(&steps, f(1, 0), 3, 2, ContinuityMode::Both).unwrap();
    }

    #[test]
    fn single_slice_is_temporal_only() {
        let p = partition_regions(1, (1.0 / 3.0, 1.0 / 3.0)).unwrap();
        let steps = plan(&p, 4, 0, 0, ContinuityMode::Both).build();
        assert!(steps.iter().all(|s| s.rule == BankRule::Temporal));
        assert_eq!(steps.len(), 3);
    }

    #[test]
    fn apex_capacity_variants() {
        let p = partition_regions(9, (1.0 / 3.0, 1.0 / 3.0)).unwrap();
        let mut pl = plan(&p, 10, 4, 0, ContinuityMode::Both);
        pl.apex_t_max = 5;
        assert_eq!(pl.z_step(8, 7, 6).bank, vec![f(4, 0), f(7, 6), f(8, 5), f(8, 4), f(8, 3)]);
        assert_eq!(pl.z_step(8, 7, 1).bank, vec![f(4, 0), f(7, 1), f(8, 0)]);
        pl.apex_t_max = 2;
        assert_eq!(pl.z_step(8, 7, 6).bank, vec![f(4, 0), f(7, 6)]);
        pl.apex_t_max = 3;
        pl.continuity = ContinuityMode::SpatialOnly;
        assert_eq!(pl.z_step(8, 7, 6).bank, vec![f(4, 0), f(7, 6)]);
    }

    #[test]
    fn late_annotation_walks_back() {
        assert_eq!(phase_order(3, 6), vec![3, 4, 5, 2, 1, 0]);
        assert_eq!(chain_prev(2, 3), Some(3));
        assert_eq!(chain_prev(4, 3), Some(3));
        let p = partition_regions(9, (1.0 / 3.0, 1.0 / 3.0)).unwrap();
        for mode in [ContinuityMode::Both, ContinuityMode::SpatialOnly, ContinuityMode::TemporalOnly] {
            let steps = plan(&p, 6, 5, 3, mode).build();
            validate_schedule(&steps, f(5, 3), 9, 6, mode).unwrap();
        }
        let steps = plan(&p, 6, 5, 3, ContinuityMode::Both).build();
        assert_eq!(find(&steps, f(8, 1)).bank, vec![f(5, 3), f(7, 1), f(8, 2)]);
    }

    #[test]
    fn temporal_only_chains_per_slice() {
        let p = partition_regions(9, (1.0 / 3.0, 1.0 / 3.0)).unwrap();
        let steps = plan(&p, 10, 4, 0, ContinuityMode::TemporalOnly).build();
        validate_schedule(&steps, f(4, 0), 9, 10, ContinuityMode::TemporalOnly).unwrap();
        assert_eq!(find(&steps, f(7, 5)).bank, vec![f(7, 0), f(7, 4)]);
        assert_eq!(find(&steps, f(7, 0)).bank, vec![f(4, 0), f(6, 0)]);
    }

    #[test]
    fn validation_catches_violations() {
        let p = partition_regions(3, (0.2, 0.2)).unwrap();
        let mut steps = plan(&p, 2, 1, 0, ContinuityMode::Both).build();
        steps.swap(0, 3);
        assert!(matches!(
            validate_schedule(&steps, f(1, 0), 3, 2, ContinuityMode::Both),
            Err(Error::Scheduling(_))
        ));
        let steps = plan(&p, 2, 1, 0, ContinuityMode::Both).build();
        assert!(validate_schedule(&steps[..4], f(1, 0), 3, 2, ContinuityMode::Both).is_err());
    }

    #[test]
    fn frame_id_text_form() {
        assert_eq!(f(8, 3).to_string(), "8,3");
        assert_eq!("8,3".parse::<FrameId>().unwrap(), f(8, 3));
        assert!("8;3".parse::<FrameId>().is_err());
    }
}
