//! Interactive segmentation with multiple mask proposals per click.

pub mod checkpoint;
pub mod click;
pub mod data;
pub mod error;
pub mod eval;
pub mod mask;
pub mod matching;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod simulate;
pub mod tape;
pub mod tensor;
pub mod train;

pub use click::{Click, Polarity};
pub use data::TrainingSample;
pub use error::{Error, Result};
pub use mask::MaskGrid;
pub use model::{select_mask, ModelConfig, PiClick, Proposals};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type PiClickF32 = PiClick<f32>;
pub type PiClickF64 = PiClick<f64>;
