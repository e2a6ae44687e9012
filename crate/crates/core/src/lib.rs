//! Desk-scale continual-learning lab for sequence tasks.
//!
//! The crate trains a small autoregressive decoder over a frozen synthetic
//! multi-layer encoder, with a learnable gated fusion of per-layer features,
//! and compares it against classic continual-learning baselines (fine-tuning,
//! experience replay, LwF, DER++, multi-task training) under a cumulative
//! evaluation protocol with forgetting and rank metrics.
//!
//! Module map:
//! - [`numerics`]: tensors, a reverse-mode tape, AdamW, gradient checking.
//! - [`model`]: vocabulary, frozen synthetic encoder, gate matrix, decoder.
//! - [`tasks`]: synthetic task generators, layer probes, few-shot subsetting.
//! - [`continual`]: sequential training harness and method losses.
//! - [`decoding`]: prompt templates, constraint tries, greedy decoding.
//! - [`metrics`]: task scorers and forgetting / mean-rank aggregates.
//! - [`config`]: run configuration with paper-default hyperparameters.
//! - [`rundir`]: run-directory persistence (curves, eval matrix, checkpoints).
//! - [`diagnostics`]: named gradient sweeps over every primitive.

pub mod config;
pub mod continual;
pub mod decoding;
pub mod diagnostics;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod rundir;
pub mod tasks;
