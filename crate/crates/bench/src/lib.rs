//! Fixtures shared by the criterion benchmarks in `benches/`.

use attrib_core::data::synth_dataset;
use attrib_core::nn::{mini_resnet, mini_vgg};
use attrib_core::{ModelGraph, Result, Tensor};

/// Benchmarks run at the default desk-scale input.
pub const BENCH_INPUT: usize = 64;

/// Untrained MiniVGG and MiniResNet in single precision. Timing does not
/// depend on the weight values.
pub fn models(size: usize) -> Result<Vec<ModelGraph<f32>>> {
    Ok(vec![mini_vgg(size, 3, 0)?, mini_resnet(size, 3, 0)?])
}

/// One planted-patch image per class.
pub fn images(size: usize) -> Result<Vec<Tensor<f32>>> {
    Ok(synth_dataset::<f32>(1, 3, size, 0)?.data.images)
}
