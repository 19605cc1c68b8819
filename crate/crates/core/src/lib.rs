//! Test-time adaptation under joint covariate and label shift, built around
//! a label-distribution-conditioned adapter for the classifier head.

pub mod adapter;
pub mod checkpoint;
pub mod error;
pub mod estimator;
pub mod gradcore;
pub mod harness;
pub mod losses;
pub mod model;
pub mod normalization;
pub mod optim;
pub mod shiftbench;
pub mod tta;

pub use error::{Error, Result};
pub use gradcore::{Graph, RealMatrix, Var};
pub use losses::LabelDistribution;
