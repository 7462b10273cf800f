//! Desk-scale simulator of private federated learning for an app-selection
//! ranking model.
//!
//! The crate is organized around the pipeline it simulates:
//!
//! - [`nn`] — a small reverse-mode autodiff engine over a fixed op set,
//!   plus SGD and AdamW optimizers and the named-parameter container.
//! - [`model`] — the app-selection network: featurization, cross-candidate
//!   multi-head attention, uncertainty gating, action selection, and metrics.
//! - [`dp`] — Gaussian moments accounting: subsampled-Gaussian RDP,
//!   composition, (ε, δ) conversion, and noise calibration.
//! - [`fed`] — the federated training loop: partitioning, cohort sampling,
//!   local SGD, clipping, noisy aggregation, server optimizer steps,
//!   checkpointing, and metrics streams.
//! - [`fedstats`] — DP histogram queries and the eligible-device launch gate.
//! - [`synth`] — seeded synthetic populations, usage records, and
//!   controllable temporal drift.
//!
//! Everything is deterministic under a master seed: all randomness flows
//! through [`seed`]-derived ChaCha streams keyed by (seed, domain, salt).

pub mod dp;
pub mod fed;
pub mod fedstats;
pub mod model;
pub mod nn;
pub mod seed;
pub mod synth;
