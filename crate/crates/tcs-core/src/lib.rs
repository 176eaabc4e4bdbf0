//! Gradient-compression toolkit and deterministic federated-learning
//! simulator built around time-correlated sparsification (TCS).
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] — flat parameter vectors, layer layouts, masks, and seeded
//!   RNG substreams;
//! * [`compress`] — mask construction (top-K, rand-K, TCS global/local,
//!   layer-fair variants) and error-feedback compression;
//! * [`codec`] — the bit-exact wire format: block position bitstreams,
//!   scaled-sign and fractional quantization, payload framing, and bit-budget
//!   accounting;
//! * [`models`] — small analytic-gradient models (multinomial logistic
//!   regression, one-hidden-layer MLP) plus synthetic data and CSV I/O;
//! * [`fedsim`] — the federated training loops (FedAvg, TCS with error
//!   accumulation, TCS with global momentum), learning-rate schedule, and
//!   metrics logging.
//!
//! Everything is deterministic given a root seed: reruns produce
//! bit-identical models and metrics regardless of thread count.

pub mod codec;
pub mod compress;
pub mod fedsim;
pub mod models;
pub mod tensor;
