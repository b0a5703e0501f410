//! Estimating first- and second-order scores of a data density by denoising,
//! with the downstream uses that need them: Tweedie posterior moments,
//! denoising uncertainty, and Ozaki-preconditioned Langevin sampling.

pub mod autodiff;
pub mod distributions;
pub mod error;
pub mod linalg;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod samplers;
pub mod uq;

pub use error::{Error, Result};
pub use linalg::Matrix;
