//! wavemo: simulation and optimization toolkit for imaging through
//! aberrating media with learned phase-diversity modulations.
//!
//! The pipeline: a scene is imaged through an unknown Zernike-parameterized
//! aberration K times, each time with a known phase modulation added at the
//! pupil. The library simulates those measurement stacks, reconstructs the
//! scene either by iterative model-based phase diversity or by a learned
//! spectral-combiner proxy, and optimizes the modulation patterns themselves
//! end to end through the differentiable imaging model.

pub mod adam;
pub mod diversity;
pub mod error;
pub mod field;
pub mod io;
pub mod metrics;
pub mod modopt;
pub mod optics;
pub mod proxy;
pub mod recon;
pub mod scene;
pub mod zernike;

pub use error::{Result, WavemoError};
pub use field::{Field, GridSpec};
