//! Markerless multi-view body, hand and face capture by fitting a parametric
//! mesh model to 2D landmarks.

pub mod camera;
pub mod energies;
pub mod error;
pub mod fitter;
pub mod metrics;
pub mod model;
pub mod observations;
pub mod optim;
pub mod par;
pub mod priors;
pub mod rotation;
pub mod synth;

pub use error::{Error, Result};
