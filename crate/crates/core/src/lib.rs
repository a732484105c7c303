//! Subtask discovery from demonstrations.
//!
//! * [`datagen`] builds the color and driving datasets and the normalized
//!   data matrix.
//! * [`citest`] checks whether a candidate subgoal behaves like a selection
//!   variable using conditional-independence tests.
//! * [`seqnmf`] learns temporally extended subtask patterns and near-binary
//!   subgoal indicators with regularized convolutional NMF.
//! * [`subgoals`] turns fitted factors into segmentations and scores them.
//! * [`policy`] replays learned patterns to complete driving tasks.

pub mod citest;
pub mod datagen;
pub mod error;
pub mod policy;
pub mod seqnmf;
pub mod subgoals;
pub mod tensorops;

pub use error::{Error, Result};
pub use tensorops::{Matrix, Tensor3};
