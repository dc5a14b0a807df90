use std::collections::BTreeSet;

use plmm_core::evalkit::{gen_phantom, report_by_region, PhantomSpec};
use plmm_core::featurizer::EncoderConfig;
use plmm_core::propagator::{run_4d, ContinuityMode, FrameId, MatcherMode, PropagationConfig};

fn small_spec() -> PhantomSpec {
    PhantomSpec {
        z_count: 5,
        t_count: 4,
        height: 64,
        width: 64,
        lv_radius_px: 8.0,
        myo_thickness_px: 3.0,
        rv_offset_px: 13.0,
        ..PhantomSpec::default()
    }
}

fn small_cfg() -> PropagationConfig {
    PropagationConfig { work_short_side: 96, ..PropagationConfig::default() }
}

#[test]
fn every_frame_once_with_bounded_banks() {
    let spec = small_spec();
    let (vol, truth) = gen_phantom(&spec).unwrap();
    for mode in [ContinuityMode::Both, ContinuityMode::SpatialOnly, ContinuityMode::TemporalOnly] {
        let cfg = PropagationConfig { continuity_mode: mode, ..small_cfg() };
        let z0 = cfg.z0_for(5);
        let res = run_4d(&vol, &truth.frame(z0, 0), &cfg, &EncoderConfig::default()).unwrap();
        assert_eq!(res.order.len(), 20);
        assert_eq!(res.order.iter().collect::<BTreeSet<_>>().len(), 20);
        assert_eq!(res.order[0], FrameId::new(z0, 0));
        let anchor = FrameId::new(z0, 0);
        for (id, bank) in &res.provenance {
            if *id == anchor {
                assert!(bank.is_empty());
                continue;
            }
            assert!(bank.len() <= 3, "{mode:?} {id}: {bank:?}");
            let pos = res.order.iter().position(|f| f == id).unwrap();
            for m in bank {
                assert!(res.order[..pos].contains(m), "{mode:?} {id} uses unfinished {m}");
            }
        }
        assert_eq!(res.masks.frame(z0, 0), truth.frame(z0, 0));
    }
}

#[test]
fn propagation_is_deterministic_and_tracks_the_heart() {
    let (vol, truth) = gen_phantom(&small_spec()).unwrap();
    let cfg = small_cfg();
    let seed = truth.frame(2, 0);
    let a = run_4d(&vol, &seed, &cfg, &EncoderConfig::default()).unwrap();
    let b = run_4d(&vol, &seed, &cfg, &EncoderConfig::default()).unwrap();
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.counter, b.counter);
    let part = cfg.validate(5, 4).unwrap();
    let report = report_by_region(&a.masks, &truth, &part, truth.spacing_mm()).unwrap();
    assert!(report.whole_avg_dice() > 0.7, "{}", report.to_table());
}

#[test]
fn dense_matcher_runs_the_same_schedule() {
    let (vol, truth) = gen_phantom(&small_spec()).unwrap();
    // 192 px working size gives a 12x12 scale-4 map, so P=6 leaves several patches.
    let base = PropagationConfig { work_short_side: 192, ..small_cfg() };
    let plmm = run_4d(&vol, &truth.frame(2, 0), &base, &EncoderConfig::default()).unwrap();
    let cfg = PropagationConfig { matcher: MatcherMode::Dense, ..base };
    let dense = run_4d(&vol, &truth.frame(2, 0), &cfg, &EncoderConfig::default()).unwrap();
    assert_eq!(plmm.provenance, dense.provenance);
    assert_eq!(dense.counter.patch_pairs, 0);
    assert!(plmm.counter.patch_pairs > 0);
    assert_ne!(dense.masks, plmm.masks);
}

#[test]
fn seed_outside_the_middle_region_is_rejected() {
    let (vol, truth) = gen_phantom(&small_spec()).unwrap();
    let cfg = PropagationConfig { z0: Some(0), ..small_cfg() };
    assert!(run_4d(&vol, &truth.frame(0, 0), &cfg, &EncoderConfig::default()).is_err());
}
