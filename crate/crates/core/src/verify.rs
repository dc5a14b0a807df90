//! Self-checks run by `plmm verify`: each suite compares an optimized path
//! with a brute-force or analytic reference on seeded random inputs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grid::FeatureGrid;
use crate::matcher::{
    dense_readout, plmm_forward, plmm_forward_with, topk_select, AffinityMatrix, OpCounter, PlmmMatcher, PlmmParams,
    Similarity, TopKIndex,
};
use crate::patcher::{fold, make_layout, unfold};
use crate::propagator::{partition_regions, validate_schedule, BankRule, ContinuityMode, FrameId, SchedulePlan};

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Flip the similarity sign inside PLMM; the oracle suite must then fail.
    pub inject_fault: bool,
    pub seed: u64,
}

fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f64) -> FeatureGrid {
    FeatureGrid::from_fn(c, h, w, |_, _, _| rng.random_range(-scale..scale)).expect("finite")
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// PLMM with a single patch covering the map and `K = T` against dense
/// matching.
pub fn oracle_suite(instances: usize, seed: u64, sim: Similarity) -> SuiteResult {
    timed("oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for i in 0..instances {
            let t = 1 + i % 3;
            let side = [2, 4, 6, 8][i % 4];
            let c = rng.random_range(1..5);
            let cv = rng.random_range(1..5);
            let q = random_grid(&mut rng, c, side, side, 1.5);
            let keys: Vec<_> = (0..t).map(|_| random_grid(&mut rng, c, side, side, 1.5)).collect();
            let vals: Vec<_> = (0..t).map(|_| random_grid(&mut rng, cv, side, side, 1.0)).collect();
            let (kr, vr): (Vec<_>, Vec<_>) = (keys.iter().collect(), vals.iter().collect());
            let params = PlmmParams { patch: side, k: t };
            let p = plmm_forward_with(&q, &kr, &vr, params, &mut OpCounter::default(), None, sim)?;
            let d = dense_readout(&q, &kr, &vr, &mut OpCounter::default())?;
            worst = worst.max(p.readout.max_abs_diff(&d));
        }
        Ok((worst <= 1e-6, format!("{instances} instances, max |plmm - dense| = {worst:.3e} (tol 1e-6)")))
    })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Largest relative error between analytic and central-difference
/// gradients for one random instance (`C=2`, `8×8`, `P=4`, `K=2`).
pub fn gradient_instance(seed: u64, t: usize, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, side, cv) = (2, 8, 2);
    let q = random_grid(&mut rng, c, side, side, 0.5);
    let keys: Vec<_> = (0..t).map(|_| random_grid(&mut rng, c, side, side, 0.5)).collect();
    let vals: Vec<_> = (0..t).map(|_| random_grid(&mut rng, cv, side, side, 1.0)).collect();
    let up = random_grid(&mut rng, cv, side, side, 1.0);
    let params = PlmmParams { patch: 4, k: 2 };

    let mut m = PlmmMatcher::new(params);
    let (kr, vr): (Vec<_>, Vec<_>) = (keys.iter().collect(), vals.iter().collect());
    m.forward(&q, &kr, &vr, &mut OpCounter::default(), None)?;
    let topk = m.last_topk().expect("forward ran").clone();
    let grads = m.backward(&q, &kr, &vr, &up)?;

    let loss = |q: &FeatureGrid, k: &[FeatureGrid], v: &[FeatureGrid]| -> Result<f64> {
        let out = plmm_forward(
            q,
            &k.iter().collect::<Vec<_>>(),
            &v.iter().collect::<Vec<_>>(),
            params,
            &mut OpCounter::default(),
            Some(&topk),
        )?;
        Ok(out.readout.data().iter().zip(up.data()).map(|(a, b)| a * b).sum())
    };
    let perturb = |g: &FeatureGrid, i: usize, d: f64| {
        let mut data = g.data().to_vec();
        data[i] += d;
        FeatureGrid::new(g.channels(), g.height(), g.width(), data).expect("finite")
    };

    let mut worst = 0.0f64;
    let numeric_q: Vec<f64> = (0..q.data().len())
        .map(|i| Ok((loss(&perturb(&q, i, step), &keys, &vals)? - loss(&perturb(&q, i, -step), &keys, &vals)?) / (2.0 * step)))
        .collect::<Result<_>>()?;
    worst = worst.max(relative_error(grads.q_key.data(), &numeric_q));
    for f in 0..t {
        let mut numeric_k = Vec::new();
        let mut numeric_v = Vec::new();
        for i in 0..keys[f].data().len() {
            let mut plus = keys.clone();
            let mut minus = keys.clone();
            plus[f] = perturb(&keys[f], i, step);
            minus[f] = perturb(&keys[f], i, -step);
            numeric_k.push((loss(&q, &plus, &vals)? - loss(&q, &minus, &vals)?) / (2.0 * step));
        }
        for i in 0..vals[f].data().len() {
            let mut plus = vals.clone();
            let mut minus = vals.clone();
            plus[f] = perturb(&vals[f], i, step);
            minus[f] = perturb(&vals[f], i, -step);
            numeric_v.push((loss(&q, &keys, &plus)? - loss(&q, &keys, &minus)?) / (2.0 * step));
        }
        worst = worst.max(relative_error(grads.mem_keys[f].data(), &numeric_k));
        worst = worst.max(relative_error(grads.mem_values[f].data(), &numeric_v));
    }
    Ok(worst)
}

pub fn gradient_suite(instances: usize, seed: u64) -> SuiteResult {
    timed("gradient", || {
        let mut worst = 0.0f64;
        for i in 0..instances {
            worst = worst.max(gradient_instance(seed.wrapping_add(i as u64), 1 + i % 2, 1e-3)?);
        }
        Ok((worst < 1e-4, format!("{instances} instances, max relative error {worst:.3e} (tol 1e-4)")))
    })
}

pub fn fold_suite(layouts: usize, seed: u64) -> SuiteResult {
    timed("fold-unfold", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut done = 0;
        while done < layouts {
            let p = 2 * rng.random_range(1..6);
            let nh = rng.random_range(1..6);
            let nw = rng.random_range(1..6);
            let (h, w) = (p + (nh - 1) * p / 2, p + (nw - 1) * p / 2);
            let layout = make_layout(h, w, p)?;
            let c = rng.random_range(1..4);
            let g = random_grid(&mut rng, c, h, w, 10.0);
            worst = worst.max(fold(&unfold(&g, &layout)?).max_abs_diff(&g));
            done += 1;
        }
        Ok((worst <= 1e-6, format!("{layouts} layouts, max |fold(unfold(x)) - x| = {worst:.3e}")))
    })
}

pub fn topk_suite(instances: usize, seed: u64) -> SuiteResult {
    timed("top-k", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bad = 0;
        for _ in 0..instances {
            let rows = rng.random_range(1..8);
            let cols = rng.random_range(1..30);
            // Few distinct values force ties.
            let scores: Vec<f64> = (0..rows * cols).map(|_| -(rng.random_range(0..6) as f64)).collect();
            let aff = AffinityMatrix::new(rows, cols, scores)?;
            let k = rng.random_range(1..=cols);
            let got = topk_select(&aff, k)?;
            let mut want = Vec::new();
            for r in 0..rows {
                let mut idx: Vec<usize> = (0..cols).collect();
                idx.sort_by(|&a, &b| aff.get(r, b).total_cmp(&aff.get(r, a)).then(a.cmp(&b)));
                want.extend_from_slice(&idx[..k]);
            }
            if got != TopKIndex::new(k, cols, want)? {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{instances} random matrices with ties, {bad} disagreements with full sort")))
    })
}

pub fn scheduler_suite() -> SuiteResult {
    timed("scheduler", || {
        let part = partition_regions(9, (1.0 / 3.0, 1.0 / 3.0))?;
        let mut checked = 0;
        for mode in [ContinuityMode::Both, ContinuityMode::SpatialOnly, ContinuityMode::TemporalOnly] {
            for (z0, t0) in [(4, 0), (3, 2), (5, 9)] {
                for apex in [2, 3, 5] {
                    let plan = SchedulePlan { partition: &part, t_count: 10, z0, t0, apex_t_max: apex, continuity: mode };
                    let steps = plan.build();
                    validate_schedule(&steps, FrameId::new(z0, t0), 9, 10, mode)?;
                    for s in &steps {
                        let cap = if s.rule == BankRule::Apex { apex } else { 2 };
                        if s.bank.len() > cap {
                            return Ok((false, format!("bank of {} exceeds {cap}", s.query)));
                        }
                    }
                    checked += 1;
                }
            }
        }
        let plan = SchedulePlan {
            partition: &part,
            t_count: 10,
            z0: 4,
            t0: 0,
            apex_t_max: 3,
            continuity: ContinuityMode::Both,
        };
        let steps = plan.build();
        let f = FrameId::new;
        let apex = steps.iter().find(|s| s.query == f(8, 3)).map(|s| s.bank.clone());
        if apex != Some(vec![f(4, 0), f(7, 3), f(8, 2)]) {
            return Ok((false, format!("apex frame 8,3 reads {apex:?}")));
        }
        Ok((true, format!("{checked} schedules complete, ordered and within capacity")))
    })
}

/// All suites with fixed seeds.
pub fn run_all(opts: VerifyOptions) -> Vec<SuiteResult> {
    let sim = if opts.inject_fault { Similarity::Inverted } else { Similarity::NegSqL2 };
    vec![
        oracle_suite(120, opts.seed, sim),
        gradient_suite(20, opts.seed.wrapping_add(1)),
        fold_suite(60, opts.seed.wrapping_add(2)),
        topk_suite(200, opts.seed.wrapping_add(3)),
        scheduler_suite(),
    ]
}
