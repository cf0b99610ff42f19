//! Attribution engine for small convolutional image classifiers.

pub mod bench;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod ig;
pub mod lime;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod verify;
pub mod viz;

pub use error::{Error, Result};
pub use nn::{Architecture, ForwardTrace, LayerSpec, ModelGraph, Params};
pub use tensor::{Precision, Scalar, Tensor};
