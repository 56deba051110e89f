//! Dynamic correction decoding for layerwise language models.
//!
//! The crate is organised around a small set of pieces:
//!
//! * [`numerics`]: stable softmax, nucleus truncation and deterministic argmax.
//! * [`model`]: the [`model::LayerwiseModel`] contract with a toy decoder-only
//!   transformer and a replay model over recorded `LWT1` traces.
//! * [`deco`]: candidate acquisition, anchor-layer selection and the
//!   preceding-layer logit correction.
//! * [`decoding`]: greedy, nucleus and beam decoders, registered by name, with a
//!   chain of named logits processors.
//! * [`analysis`]: probing classifiers, early-exit activation tracking, hit
//!   rate, overlap rate and the anchor-perturbation ablation.
//! * [`eval`]: CHAIR, POPE, AMBER-style metrics and the latency benchmark.
//! * [`cli`]: command-line plumbing shared by the `deco` binary.

pub mod analysis;
pub mod cli;
pub mod deco;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
