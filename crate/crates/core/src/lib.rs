//! Attention-guided dynamic watermarking for vision-language decoding.
//!
//! At every decoding step the engine scores each vocabulary token by how
//! strongly it relates to the attended image regions and to the current
//! hidden state, decides from next-token entropy and the spread of those
//! scores how many tokens to protect, swaps the protected tokens into the
//! keyed green list, and biases sampling toward green. Detection counts
//! green hits and applies a one-proportion z-test.
//!
//! A seeded toy model ([`model_state::ToyModel`]) and recorded traces
//! ([`model_state::Trace`]) both implement [`model_state::ModelSource`], the
//! only interface the engine needs.

pub mod attacks;
pub mod detector;
pub mod engine;
pub mod error;
pub mod generator;
pub mod harness;
pub mod model_state;
pub mod numerics;
pub mod partition;
pub mod rng;
pub mod weights;

pub use error::{Error, Result, TraceError};
