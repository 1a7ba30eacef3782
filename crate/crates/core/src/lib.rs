//! Cyclic counterfactual explanations for black-box report generators.
//!
//! A conditional pixel-space diffusion model is trained on a frozen report
//! generator's own findings, findings are removed from the conditioning, the
//! query is regenerated through DDIM inversion, the edit is verified by
//! re-running the generator, and the evidence is localized with difference
//! frames.

pub mod blackbox;
pub mod cvla;
pub mod diffusion;
pub mod error;
pub mod evalx;
pub mod findings;
pub mod frames;
pub mod image;
pub mod rng;
pub mod synthworld;

pub use error::{Error, Result};
