use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::OrderingModel;
use super::params::{Adam, AdamConfig, GradientSet};
use crate::domain::{derive_seed, seeded_rng, Album, Permutation};
use crate::error::{Error, Result};
use crate::ingest::Corpus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Draw a fresh shuffle for every album every epoch.
    pub resample_sigma_each_epoch: bool,
    /// Rescale the batch gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            resample_sigma_each_epoch: true,
            clip_norm: None,
            patience: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: OrderingModel,
    pub history: Vec<EpochStats>,
}

/// Mean per-step loss of a model that is uniform over the remaining
/// slots: `ln(M!)/M` averaged over albums.
pub fn uniform_baseline_nats(corpus: &Corpus) -> f64 {
    let n = corpus.len().max(1) as f64;
    corpus
        .albums
        .iter()
        .map(|a| {
            let m = a.len();
            (1..=m).map(|k| (k as f64).ln()).sum::<f64>() / m as f64
        })
        .sum::<f64>()
        / n
}

/// Fixed shuffles for scoring a held-out corpus, one per album.
pub fn evaluation_shuffles(corpus: &Corpus, seed: u64) -> Result<Vec<Permutation>> {
    corpus
        .albums
        .iter()
        .enumerate()
        .map(|(i, a)| Permutation::random(a.len(), &mut seeded_rng(derive_seed(seed, i as u64))))
        .collect()
}

pub fn mean_loss(model: &OrderingModel, albums: &[Album], shuffles: &[Permutation]) -> Result<f64> {
    let mut total = 0.0;
    for (a, s) in albums.iter().zip(shuffles) {
        total += model.sequence_loss(a, s)?;
    }
    Ok(total / albums.len().max(1) as f64)
}

/// Minibatches of equal-length albums, in shuffled order.
fn batches(
    albums: &[Album],
    batch_size: usize,
    rng: &mut crate::domain::SeededRng,
) -> Vec<Vec<usize>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, a) in albums.iter().enumerate() {
        by_len.entry(a.len()).or_default().push(i);
    }
    let mut out = Vec::new();
    for (_, mut idx) in by_len {
        idx.shuffle(rng);
        out.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    out.shuffle(rng);
    out
}

pub fn train(
    model: OrderingModel,
    train_corpus: &Corpus,
    validation: &Corpus,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(model, train_corpus, validation, config, |_| {})
}

/// Deterministic given `config.seed`. Validation uses one fixed shuffle per
/// album so epochs are comparable; when `validation` is empty the training
/// loss drives model selection.
pub fn train_with_progress(
    mut model: OrderingModel,
    train_corpus: &Corpus,
    validation: &Corpus,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    if train_corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let longest = train_corpus.max_album_len().max(validation.max_album_len());
    if longest > model.max_len() {
        return Err(Error::InvalidArgument(format!(
            "album of {longest} tracks exceeds model max_len {}",
            model.max_len()
        )));
    }
    let mut rng = seeded_rng(config.seed);
    let val_shuffles = evaluation_shuffles(validation, derive_seed(config.seed, u64::MAX))?;
    let mut adam = Adam::new(config.adam, &model.params);
    let mut sigmas: Vec<Permutation> = Vec::new();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, super::params::ParamStore)> = None;

    for epoch in 0..config.epochs {
        if epoch == 0 || config.resample_sigma_each_epoch {
            sigmas = train_corpus
                .albums
                .iter()
                .map(|a| Permutation::random(a.len(), &mut rng))
                .collect::<Result<_>>()?;
        }
        let mut epoch_loss = 0.0;
        for batch in batches(&train_corpus.albums, config.batch_size, &mut rng) {
            let weight = 1.0 / batch.len() as f64;
            let mut grads = GradientSet::zeros_like(&model.params);
            for &i in &batch {
                let (loss, g) = model
                    .backward_with(&train_corpus.albums[i], &sigmas[i], weight, Some(&mut rng))
                    .map_err(|e| Error::Diverged {
                        epoch,
                        message: e.to_string(),
                    })?;
                epoch_loss += loss / weight;
                grads.add_assign(&g);
            }
            if let Some(max) = config.clip_norm {
                let norm = grads.l2_norm();
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            adam.step(&mut model.params, &grads);
            model.params.round_to_f32();
        }
        let train_loss = epoch_loss / train_corpus.len() as f64;
        let validation_loss = if validation.is_empty() {
            train_loss
        } else {
            mean_loss(&model, &validation.albums, &val_shuffles)?
        };
        if !train_loss.is_finite() || !validation_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: format!("train loss {train_loss}, validation loss {validation_loss}"),
            });
        }
        let stats = EpochStats {
            epoch,
            train_loss,
            validation_loss,
        };
        progress(&stats);
        history.push(stats);
        if best.as_ref().is_none_or(|(b, _, _)| validation_loss < *b) {
            best = Some((validation_loss, epoch, model.params.clone()));
        }
        if let (Some(p), Some((_, best_epoch, _))) = (config.patience, &best) {
            if epoch - best_epoch >= p {
                break;
            }
        }
    }

    if let Some((_, epoch, params)) = best {
        model.params = params;
        model.meta.best_epoch = Some(epoch);
    }
    model.meta.seed = config.seed;
    model.meta.epochs = history.len();
    model.meta.train_losses = history.iter().map(|s| s.train_loss).collect();
    model.meta.validation_losses = history.iter().map(|s| s.validation_loss).collect();
    Ok(TrainOutcome { model, history })
}
