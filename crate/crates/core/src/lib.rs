//! Dilated residual networks on a small, self-contained tensor engine.

pub mod analysis;
pub mod cam;
pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod rng;
pub mod segment;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ArchFamily, ModelGraph, WidthMultiplier};
pub use rng::SeedStream;
pub use tensor::{Real, Shape, Tensor};
