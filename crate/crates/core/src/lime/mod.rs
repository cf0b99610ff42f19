//! Model-agnostic local surrogate explanations.
//!
//! The image is split into segments; binary masks switch segments on or off
//! (absent segments take the image's per-channel mean colour). The black
//! box is queried on every masked image, samples are weighted by an
//! exponential kernel on their distance to the unmasked image, and a
//! weighted ridge regression over the masks gives one signed coefficient
//! per segment.

mod segment;
mod surrogate;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::ModelGraph;
use crate::tensor::{Scalar, Tensor};

pub use segment::{grid_segments, segment, slic_segments, SegmentMap, SegmentMethod};
pub use surrogate::{weighted_ridge, SurrogateFit};

pub const DEFAULT_NUM_SAMPLES: usize = 1000;
pub const DEFAULT_TOP_LABELS: usize = 3;
pub const DEFAULT_GRID_K: usize = 8;
pub const DEFAULT_SIGMA: f64 = 0.25;
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Anything that maps an image to class probabilities.
pub trait Classifier<T: Scalar>: Sync {
    fn predict_proba(&self, image: &Tensor<T>) -> Result<Vec<f64>>;
}

impl<T: Scalar> Classifier<T> for ModelGraph<T> {
    fn predict_proba(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        Ok(ModelGraph::predict_proba(self, image)?.to_f64_vec())
    }
}

/// Distance used inside the exponential kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KernelDistance {
    /// Cosine distance between the mask and the all-ones mask.
    #[default]
    Cosine,
    /// Root-mean-square pixel difference between the image and its
    /// perturbation.
    Pixel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimeParams {
    pub num_samples: usize,
    pub top_labels: usize,
    pub seed: u64,
    pub sigma: f64,
    pub lambda: f64,
    pub grid_k: usize,
    pub segmentation: SegmentMethod,
    pub distance: KernelDistance,
    /// Query the black box on the rayon pool. Masks are drawn up front, so
    /// this never changes the result.
    pub parallel: bool,
}

impl Default for LimeParams {
    fn default() -> Self {
        LimeParams {
            num_samples: DEFAULT_NUM_SAMPLES,
            top_labels: DEFAULT_TOP_LABELS,
            seed: 0,
            sigma: DEFAULT_SIGMA,
            lambda: DEFAULT_LAMBDA,
            grid_k: DEFAULT_GRID_K,
            segmentation: SegmentMethod::Grid,
            distance: KernelDistance::Cosine,
            parallel: true,
        }
    }
}

/// Masked samples, black-box outputs for one class, and kernel weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationBatch {
    /// `masks[0]` is always all ones.
    pub masks: Vec<Vec<bool>>,
    pub outputs: Vec<f64>,
    pub weights: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimeExplanation {
    pub target_class: usize,
    /// One signed coefficient per segment.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub r_squared: f64,
    pub segments: Arc<SegmentMap>,
    pub params: LimeParams,
}

impl LimeExplanation {
    /// Segment ids sorted by decreasing coefficient.
    pub fn ranked_segments(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.coefficients.len()).collect();
        ids.sort_by(|&a, &b| {
            self.coefficients[b]
                .total_cmp(&self.coefficients[a])
                .then(a.cmp(&b))
        });
        ids
    }

    pub fn top_positive_segment(&self) -> Option<usize> {
        self.ranked_segments()
            .into_iter()
            .next()
            .filter(|&s| self.coefficients[s] > 0.0)
    }
}

/// Per-channel mean colour of a `C x H x W` image.
fn channel_means<T: Scalar>(image: &Tensor<T>) -> Result<Vec<T>> {
    Ok(image.reduce_mean_spatial()?.into_data())
}

fn perturb_with<T: Scalar>(
    image: &Tensor<T>,
    segments: &SegmentMap,
    mask: &[bool],
    fill: &[T],
) -> Result<Tensor<T>> {
    if mask.len() != segments.count() {
        return Err(Error::invalid(format!(
            "mask has {} entries for {} segments",
            mask.len(),
            segments.count()
        )));
    }
    let &[c, h, w] = image.shape() else {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "expected C x H x W".into(),
        });
    };
    if (h, w) != (segments.height(), segments.width()) {
        return Err(Error::ShapeMismatch {
            left: vec![h, w],
            right: vec![segments.height(), segments.width()],
        });
    }
    let labels = segments.labels();
    let mut data = image.data().to_vec();
    for (ch, plane) in data.chunks_exact_mut(h * w).enumerate().take(c) {
        for (v, &l) in plane.iter_mut().zip(labels) {
            if !mask[l as usize] {
                *v = fill[ch];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), data)
}

/// Replaces every absent segment with the image's per-channel mean colour.
pub fn perturb<T: Scalar>(
    image: &Tensor<T>,
    segments: &SegmentMap,
    mask: &[bool],
) -> Result<Tensor<T>> {
    perturb_with(image, segments, mask, &channel_means(image)?)
}

/// Cosine distance between a binary mask and the all-ones mask; an empty
/// mask is at the maximum distance 1.
pub fn cosine_distance(mask: &[bool]) -> f64 {
    let on = mask.iter().filter(|&&b| b).count();
    if on == 0 || mask.is_empty() {
        return 1.0;
    }
    1.0 - (on as f64 / mask.len() as f64).sqrt()
}

/// `exp(-d^2 / sigma^2)`.
pub fn kernel_weight(distance: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!(
            "kernel width must be positive, got {sigma}"
        )));
    }
    Ok((-(distance * distance) / (sigma * sigma)).exp())
}

fn rms_difference<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let ss: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    (ss / a.len().max(1) as f64).sqrt()
}

/// Draws `n` masks: all ones first, then independent fair coin flips.
pub fn sample_masks(segments: usize, n: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(n);
    if n > 0 {
        masks.push(vec![true; segments]);
    }
    for _ in 1..n {
        masks.push((0..segments).map(|_| rng.random_bool(0.5)).collect());
    }
    masks
}

pub fn fit_surrogate(batch: &PerturbationBatch, lambda: f64) -> Result<SurrogateFit> {
    let features: Vec<Vec<f64>> = batch
        .masks
        .iter()
        .map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    weighted_ridge(&features, &batch.outputs, &batch.weights, lambda)
}

/// Explains the `top_labels` most probable classes of `image`.
pub fn explain<T: Scalar, C: Classifier<T> + ?Sized>(
    model: &C,
    image: &Tensor<T>,
    params: &LimeParams,
) -> Result<Vec<LimeExplanation>> {
    if params.num_samples < 2 {
        return Err(Error::invalid("LIME needs at least two samples"));
    }
    if params.top_labels == 0 {
        return Err(Error::invalid("top_labels must be at least 1"));
    }
    kernel_weight(0.0, params.sigma)?;
    let segments = Arc::new(segment(image, params.grid_k, params.segmentation)?);
    let fill = channel_means(image)?;
    let masks = sample_masks(segments.count(), params.num_samples, params.seed);

    let evaluate = |mask: &Vec<bool>| -> Result<(Vec<f64>, f64)> {
        let perturbed = perturb_with(image, &segments, mask, &fill)?;
        let probs = model.predict_proba(&perturbed)?;
        let d = match params.distance {
            KernelDistance::Cosine => cosine_distance(mask),
            KernelDistance::Pixel => rms_difference(image, &perturbed),
        };
        Ok((probs, d))
    };
    let results: Vec<(Vec<f64>, f64)> = if params.parallel {
        masks.par_iter().map(evaluate).collect::<Result<_>>()?
    } else {
        masks.iter().map(evaluate).collect::<Result<_>>()?
    };
    let weights = results
        .iter()
        .map(|(_, d)| kernel_weight(*d, params.sigma))
        .collect::<Result<Vec<f64>>>()?;

    // Sample 0 is the unperturbed image.
    let original = &results[0].0;
    let mut classes: Vec<usize> = (0..original.len()).collect();
    classes.sort_by(|&a, &b| original[b].total_cmp(&original[a]).then(a.cmp(&b)));
    classes.truncate(params.top_labels);

    classes
        .into_iter()
        .map(|class| {
            let batch = PerturbationBatch {
                masks: masks.clone(),
                outputs: results.iter().map(|(p, _)| p[class]).collect(),
                weights: weights.clone(),
                seed: params.seed,
            };
            let fit = fit_surrogate(&batch, params.lambda)?;
            Ok(LimeExplanation {
                target_class: class,
                coefficients: fit.coefficients,
                intercept: fit.intercept,
                r_squared: fit.r_squared,
                segments: Arc::clone(&segments),
                params: params.clone(),
            })
        })
        .collect()
}
