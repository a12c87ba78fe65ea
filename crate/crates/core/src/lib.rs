//! Visual-prompted teacher ensembles over a frozen source model, with
//! confident noisy-argmax label aggregation, Rényi-DP accounting, and a
//! prompted student trained on the privately labelled public pool.
//!
//! The pipeline, end to end, lives in [`harness::run_experiment`].

pub mod accountant;
pub mod aggregator;
pub mod data;
pub mod harness;
pub mod nn;
pub mod prompt;
pub mod seed;

pub use nn::Tensor;
