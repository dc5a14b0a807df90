use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use plmm_core::featurizer::{EncoderConfig, KeyEncoder};
use plmm_core::grid::{FeatureGrid, Image};
use plmm_core::matcher::{dense_readout, plmm_forward, OpCounter, PlmmParams};
use plmm_core::par;
use plmm_core::patcher::{fold, make_layout, unfold};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureGrid {
    FeatureGrid::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
}

struct Case {
    q: FeatureGrid,
    keys: Vec<FeatureGrid>,
    vals: Vec<FeatureGrid>,
}

fn case(side: usize, t: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(side as u64 * 31 + t as u64);
    Case {
        q: grid(&mut rng, 32, side, side),
        keys: (0..t).map(|_| grid(&mut rng, 32, side, side)).collect(),
        vals: (0..t).map(|_| grid(&mut rng, 4, side, side)).collect(),
    }
}

fn plmm(c: &Case) -> FeatureGrid {
    let kr: Vec<_> = c.keys.iter().collect();
    let vr: Vec<_> = c.vals.iter().collect();
    plmm_forward(&c.q, &kr, &vr, PlmmParams::default(), &mut OpCounter::default(), None).unwrap().readout
}

fn dense(c: &Case) -> FeatureGrid {
    let kr: Vec<_> = c.keys.iter().collect();
    let vr: Vec<_> = c.vals.iter().collect();
    dense_readout(&c.q, &kr, &vr, &mut OpCounter::default()).unwrap()
}

fn threading(cr: &mut Criterion) {
    let c = case(48, 2);
    let mut g = cr.benchmark_group("plmm_threads");
    g.sample_size(20);
    g.bench_function("pool", |b| b.iter(|| plmm(&c)));
    g.bench_function("single", |b| b.iter(|| par::single_threaded(|| plmm(&c))));
    g.finish();
}

fn matchers(cr: &mut Criterion) {
    let mut g = cr.benchmark_group("plmm_vs_dense");
    g.sample_size(10);
    for side in [24, 48] {
        let c = case(side, 2);
        g.bench_with_input(BenchmarkId::new("plmm", side), &c, |b, c| b.iter(|| plmm(c)));
        g.bench_with_input(BenchmarkId::new("dense", side), &c, |b, c| b.iter(|| dense(c)));
    }
    g.finish();
}

fn patches(cr: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = grid(&mut rng, 32, 48, 48);
    let layout = make_layout(48, 48, 6).unwrap();
    cr.bench_function("unfold_fold_48", |b| b.iter(|| fold(&unfold(&x, &layout).unwrap())));
}

fn encoding(cr: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Image::new(384, 384, (0..384 * 384).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let enc = KeyEncoder::new(&EncoderConfig::default()).unwrap();
    let mut g = cr.benchmark_group("encode_384");
    g.sample_size(10);
    g.bench_function("pool", |b| b.iter(|| enc.encode(&img).unwrap()));
    g.bench_function("single", |b| b.iter(|| par::single_threaded(|| enc.encode(&img).unwrap())));
    g.finish();
}

criterion_group!(benches, threading, matchers, patches, encoding);
criterion_main!(benches);
