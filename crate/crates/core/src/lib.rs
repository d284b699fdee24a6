pub mod augment;
pub mod blocks;
pub mod data;
pub mod error;
pub mod explain;
pub mod image;
pub mod label;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use label::{Label, Prediction};
