//! Lossless event-camera data compression.
//!
//! Events are split by polarity into fixed-length time segments, each
//! segment's `(x, y, t)` voxels are coded as a level-order octree, and the
//! resulting occupancy bytes are range coded tile by tile under a symbol
//! distribution predicted by a small learned hyperprior network.
//!
//! The network and trainer are generic over the [`Scalar`] type; the aliases
//! below fix the common choices.

pub mod container;
pub mod entropy_coder;
pub mod error;
pub mod event_io;
pub mod hyperprior;
pub mod metrics;
pub mod octree;
pub mod preprocess;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use event_io::{Event, EventStream, Polarity};
pub use hyperprior::{Architecture, HyperpriorModel, Tile};
pub use preprocess::PreprocessConfig;
pub use scalar::Scalar;

/// Single-precision model; the precision weights are stored in.
pub type Model = hyperprior::HyperpriorModel<f32>;
/// Double-precision model, used for gradient checks.
pub type Model64 = hyperprior::HyperpriorModel<f64>;

/// Single-precision trainer.
pub type Trainer = trainer::Trainer<f32>;
/// Double-precision trainer.
pub type Trainer64 = trainer::Trainer<f64>;
/// Codec over a single-precision model.
pub type Codec<'m> = container::Codec<'m, f32>;
