//! Frame-level forgery localization on feature sequences.
//!
//! The crate is self-contained: a reverse-mode autodiff engine
//! ([`tensor`]), a synthetic feature-sequence generator and binary dataset
//! format ([`data`]), a dual-stream graph model with cross-attentive fusion
//! and an adversarial trace-separation head ([`model`]), a deterministic
//! trainer with checkpointing ([`train`]), segment extraction plus average
//! precision at temporal-IoU thresholds ([`eval`]), and the `ddnet` binary
//! ([`cli`]).

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;
