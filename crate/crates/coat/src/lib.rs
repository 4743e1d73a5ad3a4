//! Concept-aware training for small in-context learners.
//!
//! This crate builds the full pipeline around one idea: when training a
//! model on few-shot prompts, pick demonstrations that share a reasoning
//! concept with the predicted sample (informativeness) and, among those,
//! prefer the ones the current model finds hardest (non-triviality).
//! Models trained this way learn to actually use their demonstrations,
//! which shows up as better accuracy on concepts never seen in training.
//!
//! The pieces, bottom up:
//!
//! - [`syndata`]: generates concept-annotated synthetic QA data (answers
//!   are produced by executing reasoning chains over entity tables, so
//!   every sample is checkable), plus JSONL ingestion for external data.
//! - [`prompts`]: the bit-exact few-shot prompt format and a word-level
//!   vocabulary.
//! - [`model`]: a from-scratch decoder-only transformer with hand-written
//!   backpropagation, Adam, gradient checking, greedy decoding, and
//!   bit-exact checkpoints.
//! - [`scoring`]: teacher-forced likelihood of the correct prediction,
//!   the quantity the non-triviality condition minimizes.
//! - [`sampler`]: the demonstration-selection strategies (concept-aware,
//!   informativeness-only, uniform random).
//! - [`trainer`]: the two-stage training pipeline with early stopping.
//! - [`evalharness`]: unseen-concept evaluation and strategy comparison.
//! - [`cli`]: configuration and command implementations behind the
//!   `coat` binary.
//!
//! The `book/` directory of the repository walks through each piece with
//! runnable examples; those snippets compile and run as doc-tests.

pub mod cli;
pub mod error;
pub mod evalharness;
pub mod model;
pub mod prompts;
pub mod sampler;
pub mod scoring;
pub mod seeds;
pub mod syndata;
pub mod trainer;

mod bookdoc;

pub use error::{CoatError, Result};
