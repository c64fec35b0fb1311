//! Few-shot handwritten character recognition with prototypical networks
//! and multi-granularity (character / row / column) episodic training.
//!
//! Module map:
//!
//! - [`alphabet`]: character → (row, column, split) lookup
//! - [`dataset`]: corpus ingestion, preprocessing, per-split index
//! - [`episodes`]: N-way K-shot sampling and training stream plans
//! - [`protonet`]: embedding backbones, prototypes, distances, loss
//! - [`training`]: episodic training loop with validation and checkpoints
//! - [`evaluation`]: test-split evaluation and results tables
//! - [`synthetic`]: parametric glyph corpora for smoke runs

pub mod alphabet;
pub mod dataset;
pub mod episodes;
mod error;
pub mod evaluation;
pub mod protonet;
pub mod synthetic;
pub mod training;

pub use alphabet::{load_alphabet, AlphabetTable, Split};
pub use dataset::{ingest, validate_dataset, DatasetIndex, GlyphImage};
pub use episodes::{make_stream_plan, sample_episode, Episode, EpisodeSpec, Granularity, Method};
pub use error::{Error, Result};
pub use evaluation::{evaluate, reproduce_table, EvalOutcome, RunResult};
pub use training::{run_experiment, train, validate, TrainConfig};
