//! Album sequencing.
//!
//! Two ways to order the tracks of an album:
//!
//! * **direct**: a track encoder and an encoder-decoder transformer,
//!   trained jointly, predict which shuffled input slot comes next in the
//!   original order; orders are sampled and ranked by likelihood.
//! * **template**: the encoder's scalar per-track value is fitted to a
//!   narrative template curve by exact L1 monotone matching.
//!
//! [`eval`] scores proposals with the string-edit score and estimates how
//! much order information the model captures.

pub mod domain;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod nn;
pub mod sequencer;

pub use domain::{seeded_rng, Album, EssenceSeries, Permutation, SeededRng, TrackFeatures};
pub use error::{Error, Result};
pub use ingest::{Corpus, FeatureScaler, LoadConfig, SyntheticSpec};
pub use nn::{Hyperparams, OrderingModel, TrainConfig};
pub use sequencer::{ProposedOrder, TemplateCurve};
