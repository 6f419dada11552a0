//! Sparse canonical correlation analysis for paired longitudinal studies.
//!
//! Two long-format views (`X`, `Y`) observed on possibly different per-subject
//! time grids are linked through fixed sparse canonical weights. Each latent
//! series is modelled over time with a random-intercept mixed model, and the
//! fitted model is used to carry latent values across to the other view's
//! grid inside the alternating NIPALS updates.

pub mod cli;
pub mod data;
pub mod error;
pub mod lme;
pub mod mm;
pub mod scca;
pub mod selection;
pub mod simulation;

pub use error::{Error, Result};
