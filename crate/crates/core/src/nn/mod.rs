//! A small dense-tensor training core: layers with analytic gradients, Adam,
//! the frozen source model, and the prompted classifiers built on it.

mod adam;
pub mod layers;
mod models;
mod source;
mod tensor;
mod train;

use thiserror::Error;

use crate::prompt::PromptError;

pub use adam::{Adam, AdamConfig};
pub use layers::{Conv2d, Layer, Linear, Network};
pub use models::{
    argmax, Classifier, HeadTeacher, PromptGrads, PromptTape, ReTeacher, ScratchNet, Trainable,
};
pub use source::{FrozenSourceModel, SourceArch};
pub use tensor::Tensor;
pub use train::{
    evaluate, fit, fit_with, mean_loss, self_train, train_head, train_reteacher, train_scratch,
    train_source, train_student, StudentConfig, TrainConfig,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("teacher slice is empty")]
    EmptySlice,
    #[error("student has no answered queries to train on")]
    NoAnsweredQueries,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("frozen source model changed: fingerprint {before} became {after}")]
    FrozenModelMutated { before: String, after: String },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged (non-finite loss)")]
    Diverged,
    #[error(transparent)]
    Prompt(#[from] PromptError),
}
