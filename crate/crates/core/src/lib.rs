//! Virtual CT scanner, sinogram-domain dose simulator, and a noise-entangled
//! GAN that synthesizes a continuum of dose levels from one routine-dose image.

pub mod container;
pub mod ct;
pub mod decompose;
pub mod error;
pub mod image;
pub mod metrics;
pub mod negan;
pub mod noise;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
pub use image::Image2D;
