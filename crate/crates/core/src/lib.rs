//! Terrain-conditioned diffusion super-resolution for wind-speed fields, with
//! sparse station observations blended in through a dynamic impact radius.

pub mod assimilation;
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod profile;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{Field2D, PatchPair};
