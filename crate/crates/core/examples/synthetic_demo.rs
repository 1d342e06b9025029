//! Train on a small synthetic corpus and compare the direct method with
//! templates and random guessing.
//!
//! cargo run --release -p albumseq-core --example synthetic_demo

use albumseq::eval::{run_evaluation, EvalConfig};
use albumseq::ingest::{generate_synthetic, split_corpus, SplitFractions};
use albumseq::nn::train_with_progress;
use albumseq::{FeatureScaler, Hyperparams, OrderingModel, SyntheticSpec, TrainConfig};

fn main() -> albumseq::Result<()> {
    let corpus = generate_synthetic(&SyntheticSpec {
        n_albums: 300,
        ..SyntheticSpec::default()
    })?;
    let split = split_corpus(&corpus, SplitFractions::default(), 0)?;
    let hyper = Hyperparams {
        input_dim: corpus.dimension,
        ..Hyperparams::default()
    };
    let model = OrderingModel::new(hyper, FeatureScaler::fit(&split.train)?, 0)?;
    let config = TrainConfig {
        epochs: 80,
        patience: Some(20),
        ..TrainConfig::default()
    };
    let trained = train_with_progress(model, &split.train, &split.validation, &config, |s| {
        println!(
            "epoch {:>3}  train {:.3}  validation {:.3}",
            s.epoch + 1,
            s.train_loss,
            s.validation_loss
        );
    })?;

    let report = run_evaluation(
        &trained.model,
        &split.test,
        &EvalConfig {
            k_values: vec![1, 3],
            ..EvalConfig::default()
        },
    )?;
    for row in &report.aggregates {
        println!("{:<8} k={}  {}", row.method, row.k, row.edit_score);
    }
    if let Some(info) = &report.information {
        println!("information: {} bits per album", info.bits);
    }
    Ok(())
}
