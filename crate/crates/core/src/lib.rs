//! Soft and hard visual-attention caption decoders.
//!
//! The crate is organised bottom-up:
//!
//! - [`graphcore`]: a small reverse-mode differentiation engine,
//! - [`attention`]: the attention MLP and both context functions,
//! - [`decoder`]: the conditional LSTM, deep output layer and decoding,
//! - [`training`]: penalised NLL, the REINFORCE-style hard estimator,
//!   optimizers and early stopping,
//! - [`data`]: a synthetic scene-caption corpus and its file format,
//! - [`evalviz`]: BLEU, attention heatmaps and alignment scoring,
//! - [`verify`]: runnable oracle suites used by the `verify` command.

pub mod attention;
pub mod data;
pub mod decoder;
pub mod evalviz;
pub mod graphcore;
pub mod training;
pub mod verify;
