//! Temporally extended expert routing for a toy mixture-of-experts language model.
//!
//! A standard MoE router re-picks its active experts at nearly every token,
//! which makes expert offloading expensive: the resident expert set churns
//! constantly. This crate implements the full pipeline for converting a small
//! byte-level MoE transformer into one whose per-layer expert *masks* persist
//! across tokens, controlled by learned per-layer option controllers with a
//! deliberation cost:
//!
//! * [`tape`] — a minimal reverse-mode autodiff kernel over small dense
//!   tensors, with finite-difference verification.
//! * [`model`] — the decoder-only MoE transformer (doubles as the frozen
//!   teacher), mask-constrained routing, pretraining, incremental decoding.
//! * [`controller`] — per-layer mask embedding, termination, value heads and
//!   Plackett-Luce option selection (Gumbel-top-k sampling).
//! * [`rollout`] — call-and-return generation with teacher-mixed sampling,
//!   per-token reverse-KL rewards and importance weights.
//! * [`trainer`] — GAE critic targets with U-bootstrap, termination /
//!   selection / intra-option gradients, and the full conversion loop.
//! * [`baselines`] — static mask baselines (frequency, greedy reconstruction,
//!   random).
//! * [`metrics`] — switch-rate semantics, repetition rate, teacher perplexity,
//!   raster export.
//! * [`sim`] — a trace-driven serving-memory simulator quantifying the
//!   latency/bytes cost of mask switches.
//!
//! Batch-level loops (rollouts, per-trace gradients, sweeps) run on rayon when
//! the default `parallel` feature is enabled and fall back to sequential
//! iteration otherwise; results are reduced in index order either way, so both
//! modes produce identical output.

pub mod adamw;
pub mod baselines;
pub mod checkpoint;
pub mod controller;
pub mod corpus;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod real;
pub mod rng;
pub mod rollout;
pub mod sim;
pub mod tape;
pub mod tensor;
pub mod tracefile;
pub mod trainer;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use tensor::Tensor;
