//! Pointer-attention reader that recovers missing event arguments from earlier mentions.
//!
//! The pipeline reads pre-annotated event sequences ([`corpus`]), turns them
//! into argument-cloze document/query instances ([`clozegen`]), and trains a
//! BiGRU reader with pointer attention ([`model`], [`trainer`]) on a small
//! reverse-mode kernel ([`tensor`]). [`eval`] provides accuracy, baselines and
//! attention export.

pub mod cli;
pub mod clozegen;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{ParError, Result};
