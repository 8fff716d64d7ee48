//! Drivable Gaussian-avatar runtime: geometric substrate (skeleton, mesh,
//! hierarchy), localized pose conditioning, the avatar decoder, appearance
//! encoding, the autoregressive appearance predictor, and the CPU splat
//! renderer with image metrics.

pub mod canonical;
pub mod decoder;
pub mod formats;
pub mod hierarchy;
pub mod img;
pub mod localization;
pub mod mesh;
pub mod metrics;
pub mod render;
pub mod skeleton;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] gavatar_tensor::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
