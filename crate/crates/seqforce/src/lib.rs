//! Interaction force estimation from image sequences.
//!
//! A CNN extracts per-frame features, sequential spatial/channel attention
//! refines them using adjacent frames, and a bidirectional LSTM regresses
//! the contact force at the window's last frame. Everything runs on a small
//! f64 tensor engine with reverse-mode autodiff so every block is
//! gradient-checkable against central differences.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod temporal;
pub mod tensor;
pub mod training;

pub use cli::cli_main;
pub use error::{Error, Result};
pub use tensor::Tensor;
