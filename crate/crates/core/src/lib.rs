//! Morph-robust face verification on top of frozen embeddings.
//!
//! A small adapter network is trained with a quadruplet objective that pushes
//! morphed samples away from both contributing subjects, then the full system
//! is evaluated with FMR / FNMR / IAPAR / RIAPAR at fixed operating points,
//! optionally fused with a differential morphing-attack detector.

pub mod adapter;
pub mod autodiff;
pub mod dmad;
pub mod embedding;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod mining;
mod seeding;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
