//! Benchmark bodies, grouped into targets by `benches/`.

use albumseq::eval::levenshtein;
use albumseq::ingest::FeatureScaler;
use albumseq::sequencer::{find_template, fit_to_template, sample_orders, Sampling};
use albumseq::{
    seeded_rng, Album, EssenceSeries, Hyperparams, OrderingModel, Permutation, TrackFeatures,
};
use criterion::{black_box, BenchmarkId, Criterion};
use rand::Rng;

const DIMENSION: usize = 32;

fn album(m: usize, seed: u64) -> Album {
    let mut rng = seeded_rng(seed);
    let tracks = (0..m)
        .map(|i| {
            let features = (0..DIMENSION).map(|_| rng.gen_range(-1.0..1.0)).collect();
            TrackFeatures::new(format!("t{i}"), features).expect("finite")
        })
        .collect();
    Album::new("bench", tracks).expect("valid album")
}

fn model() -> OrderingModel {
    let hyper = Hyperparams {
        input_dim: DIMENSION,
        ..Hyperparams::default()
    };
    OrderingModel::new(hyper, FeatureScaler::identity(DIMENSION), 0).expect("valid hyperparameters")
}

pub fn template_fit(c: &mut Criterion) {
    let arch = find_template("arch").expect("built-in");
    let mut group = c.benchmark_group("template_fit");
    for m in [8, 20] {
        let mut rng = seeded_rng(m as u64);
        let essence =
            EssenceSeries::new((0..m).map(|_| rng.gen::<f64>()).collect()).expect("finite");
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, &m| {
            b.iter(|| fit_to_template(black_box(&essence), &arch, m))
        });
    }
    group.finish();
}

pub fn edit_distance(c: &mut Criterion) {
    let mut rng = seeded_rng(1);
    let a = Permutation::random(20, &mut rng).expect("m > 0").into_vec();
    let b = Permutation::random(20, &mut rng).expect("m > 0").into_vec();
    c.bench_function("levenshtein/20", |bench| {
        bench.iter(|| levenshtein(black_box(&a), black_box(&b)))
    });
}

pub fn model_passes(c: &mut Criterion) {
    let model = model();
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    for m in [8, 20] {
        let album = album(m, m as u64);
        let sigma = Permutation::random(m, &mut seeded_rng(2)).expect("m > 0");
        group.bench_with_input(BenchmarkId::new("loss", m), &m, |b, _| {
            b.iter(|| model.sequence_loss(black_box(&album), &sigma))
        });
        group.bench_with_input(BenchmarkId::new("backward", m), &m, |b, _| {
            b.iter(|| model.backward(black_box(&album), &sigma))
        });
    }
    group.finish();
}

pub fn sampling(c: &mut Criterion) {
    let model = model();
    let album = album(8, 3);
    let mut group = c.benchmark_group("sampling");
    group.sample_size(10);
    group.bench_function("100_orders/8", |b| {
        b.iter(|| {
            sample_orders(
                &model,
                &album,
                100,
                Sampling::Temperature(1.0),
                &mut seeded_rng(4),
            )
        })
    });
    group.bench_function("greedy/8", |b| {
        b.iter(|| sample_orders(&model, &album, 1, Sampling::Greedy, &mut seeded_rng(4)))
    });
    group.finish();
}
