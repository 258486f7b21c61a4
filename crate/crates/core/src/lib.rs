//! Shared-gate ReLU networks: a reverse-mode tape, the shared activation,
//! gate budgeting, progressive gate substitution training, gate correlation
//! analysis and the single-gate checkerboard laboratory.

pub mod analytics;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gates;
pub mod model;
pub mod run;
pub mod sharing;
pub mod training;
pub mod verify;
pub mod xor;
pub mod tensor;

pub use error::{Error, Result};
