//! Backdoor detection and mitigation for small image classifiers.
//!
//! The crate trains poisoned models on a synthetic benchmark, recovers
//! candidate triggers per class, flags poisoned models with a robust
//! outlier test on trigger sizes, ranks neurons by Monte-Carlo Shapley
//! attribution of the attack success rate and prunes the top ones. A
//! data-free mode synthesizes the defender's images from batch-norm
//! statistics.

// numeric kernels index several buffers in lockstep; `!(x > 0)` also rejects NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod data;
pub mod datafree;
pub mod detect;
pub mod error;
pub mod io;
pub mod nn;
mod optim;
pub mod par;
pub mod pipeline;
pub mod reverse;
pub mod scalar;
pub mod shapley;
pub mod tensor;

pub use data::Dataset;
pub use error::{Error, Result};
pub use nn::{Model, NeuronId};
pub use scalar::Scalar;
pub use tensor::Tensor;
