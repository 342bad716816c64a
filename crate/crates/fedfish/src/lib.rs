//! Deterministic federated-learning simulator with secure aggregation and a
//! gradient-disaggregation label-inference attack.
//!
//! A malicious server hands each selected client a "fishing" variant of the
//! global model whose embeddings are data-independent and distinct per
//! client. The securely aggregated final-layer gradient then factors into a
//! small linear system whose solution is each client's private per-class
//! label count. This crate simulates the whole loop at desk scale: model,
//! clients, masking-based secure aggregation, attack, defenses, and metrics.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release --example fedsgd_round          # honest federated round
//! cargo run --release --example label_inference       # end-to-end attack
//! cargo run --release --example fishing_models        # crafted-model internals
//! cargo run --release --example secure_aggregation    # masking codec
//! cargo run --release --example single_sample_leakage # one-sample gradient rule
//! cargo run --release --example defense_tradeoffs     # noise/compression curves
//! cargo run --release --example sweep_batch_size      # batch-size sweep
//! cargo run --release --example mnist_attack          # IDX data path
//! ```
//!
//! The `fedfish` binary wraps the same machinery: `fedfish run`,
//! `fedfish sweep`, `fedfish verify`.

pub mod attack;
pub mod defenses;
pub mod error;
pub mod federation;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod secure_agg;
pub mod seeding;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{lstsq, LstsqResult, DEFAULT_RANK_TOL};
pub use tensor::{matmul, Matrix, Tensor};
