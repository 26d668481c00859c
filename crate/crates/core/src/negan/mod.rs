//! The noise-entangled GAN: a generator conditioned on a scaled noise image
//! and one discriminator per lower-dose level.

pub mod factors;
pub mod loss;
pub mod model;
pub mod train;

pub use factors::{set_noise_factors, DoseLevels};
pub use loss::{AdvMode, LossWeights};
pub use model::{generate, ArchConfig, NeganModel, Window};
pub use train::{load_model, EpochStats, TrainCfg, Trainer, TrainingSample};
