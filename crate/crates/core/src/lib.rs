//! Decoupled magnitude/phase speech dereverberation workbench.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod models;
pub mod parallel;
pub mod report;
pub mod signal_model;
pub mod stft;
pub mod training;
pub mod wav;

pub use error::{Error, Result};
