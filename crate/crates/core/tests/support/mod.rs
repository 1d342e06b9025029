#![allow(dead_code)]

use albumseq::ingest::{generate_synthetic, FeatureScaler};
use albumseq::*;
use rand::Rng;

pub fn small_hyper(input_dim: usize, max_len: usize) -> Hyperparams {
    Hyperparams {
        input_dim,
        hidden_dim: 8,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_len,
        ..Hyperparams::default()
    }
}

pub fn synthetic(seed: u64, n_albums: usize, max_tracks: usize, dimension: usize) -> Corpus {
    generate_synthetic(&SyntheticSpec {
        seed,
        n_albums,
        min_tracks: 3,
        max_tracks,
        dimension,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

pub fn random_album(id: &str, m: usize, d: usize, rng: &mut SeededRng) -> Album {
    let tracks = (0..m)
        .map(|i| {
            TrackFeatures::new(
                format!("{id}-{i}"),
                (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    Album::new(id, tracks).unwrap()
}

pub fn model_for(corpus: &Corpus, max_len: usize, seed: u64) -> OrderingModel {
    OrderingModel::new(
        small_hyper(corpus.dimension, max_len),
        FeatureScaler::fit(corpus).unwrap(),
        seed,
    )
    .unwrap()
}

/// Log-likelihood of `order` (slot indices) recomputed one step at a time.
pub fn stepwise_log_likelihood(model: &OrderingModel, album: &Album, order: &[usize]) -> f64 {
    let prepared = model.prepare(&model.standardize(album).unwrap()).unwrap();
    (0..order.len())
        .map(|t| model.next_step_log_probs(&prepared, &order[..t]).unwrap()[order[t]])
        .sum()
}
