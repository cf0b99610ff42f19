//! Integrated Gradients along the straight path from a baseline to the input.
//!
//! `IG_i = (x_i - x'_i) * (1/m) * sum_{k=1..m} dF(x' + a_k (x - x'))/dx_i`
//! where `F` is the target-class logit and `a_k` is `(k - 1/2)/m` (midpoint,
//! the default) or `k/m` (right endpoint).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::ModelGraph;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_STEPS: usize = 50;

/// Interpolation steps evaluated together; bounds memory for large `m`.
const STEP_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub enum Baseline<T: Scalar = f64> {
    /// All-zero (black) image.
    Zeros,
    /// Uniform 0.5 gray.
    Gray,
    /// Every pixel set to the image's per-channel mean.
    Mean,
    Custom(Tensor<T>),
}

impl<T: Scalar> Baseline<T> {
    pub fn materialize(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Baseline::Zeros => Tensor::zeros(image.shape()),
            Baseline::Gray => Tensor::full(image.shape(), T::of(0.5)),
            Baseline::Mean => {
                let &[c, h, w] = image.shape() else {
                    return Err(Error::InvalidShape {
                        shape: image.shape().to_vec(),
                        reason: "mean baseline needs C x H x W".into(),
                    });
                };
                let means = image.reduce_mean_spatial()?;
                Tensor::from_fn(&[c, h, w], |i| means.data()[i / (h * w)])
            }
            Baseline::Custom(t) => {
                if t.shape() != image.shape() {
                    return Err(Error::ShapeMismatch {
                        left: image.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                Ok(t.clone())
            }
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "zeros" | "zero" | "black" => Ok(Baseline::Zeros),
            "gray" | "grey" => Ok(Baseline::Gray),
            "mean" => Ok(Baseline::Mean),
            other => Err(Error::invalid(format!(
                "unknown baseline {other:?} (valid: zeros, gray, mean)"
            ))),
        }
    }
}

/// Where the `m` path gradients are sampled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RiemannRule {
    /// `a_k = (k - 1/2) / m`; error shrinks as `1/m^2` on smooth paths.
    #[default]
    Midpoint,
    /// `a_k = k / m`; error shrinks as `1/m`.
    Right,
}

impl RiemannRule {
    pub fn alpha(self, k: usize, m: usize) -> f64 {
        match self {
            RiemannRule::Midpoint => (k as f64 - 0.5) / m as f64,
            RiemannRule::Right => k as f64 / m as f64,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "midpoint" | "mid" => Ok(RiemannRule::Midpoint),
            "right" => Ok(RiemannRule::Right),
            other => Err(Error::invalid(format!(
                "unknown Riemann rule {other:?} (valid: midpoint, right)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgParams<T: Scalar = f64> {
    pub steps: usize,
    pub rule: RiemannRule,
    pub baseline: Baseline<T>,
    /// `None` explains the top prediction for the input.
    pub target_class: Option<usize>,
    /// Evaluate path gradients on the rayon pool. The reduction order is
    /// fixed, so results do not depend on this flag.
    pub parallel: bool,
}

impl<T: Scalar> Default for IgParams<T> {
    fn default() -> Self {
        IgParams {
            steps: DEFAULT_STEPS,
            rule: RiemannRule::Midpoint,
            baseline: Baseline::Zeros,
            target_class: None,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgResult<T: Scalar = f64> {
    /// Signed, input-shaped (per pixel per channel).
    pub attributions: Tensor<T>,
    /// `|sum IG - (F(x) - F(x'))|`.
    pub completeness_gap: f64,
    /// `F(x) - F(x')`.
    pub score_delta: f64,
    pub target_class: usize,
    pub steps: usize,
    pub rule: RiemannRule,
    pub baseline: Tensor<T>,
}

impl<T: Scalar> IgResult<T> {
    /// Gap as a fraction of `|F(x) - F(x')|`.
    pub fn relative_gap(&self) -> f64 {
        self.completeness_gap / self.score_delta.abs()
    }
}

pub fn integrated_gradients<T: Scalar>(
    model: &ModelGraph<T>,
    image: &Tensor<T>,
    params: &IgParams<T>,
) -> Result<IgResult<T>> {
    if params.steps == 0 {
        return Err(Error::invalid(
            "integrated gradients needs at least one step",
        ));
    }
    let input_trace = model.forward(image)?;
    let image = input_trace.input().clone();
    let class = params
        .target_class
        .unwrap_or_else(|| input_trace.predicted());
    let score_input = input_trace.logits().data().get(class).copied();
    let baseline = params.baseline.materialize(&image)?;
    let diff = image.sub(&baseline)?;
    let m = params.steps;

    let gradient_at = |k: usize| -> Result<Tensor<T>> {
        let alpha = T::of(params.rule.alpha(k, m));
        let point: Vec<T> = baseline
            .data()
            .iter()
            .zip(diff.data())
            .map(|(&b, &d)| b + alpha * d)
            .collect();
        let point = Tensor::new(image.shape().to_vec(), point)?;
        model.forward(&point)?.gradient_wrt_input(class)
    };

    let mut sum = vec![T::zero(); image.len()];
    let steps: Vec<usize> = (1..=m).collect();
    for chunk in steps.chunks(STEP_CHUNK) {
        let grads: Vec<Tensor<T>> = if params.parallel {
            chunk
                .par_iter()
                .map(|&k| gradient_at(k))
                .collect::<Result<_>>()?
        } else {
            chunk
                .iter()
                .map(|&k| gradient_at(k))
                .collect::<Result<_>>()?
        };
        for g in &grads {
            for (s, &v) in sum.iter_mut().zip(g.data()) {
                *s += v;
            }
        }
    }
    let inv_m = T::of(m as f64).recip();
    let attributions: Vec<T> = sum
        .iter()
        .zip(diff.data())
        .map(|(&s, &d)| d * (s * inv_m))
        .collect();
    let attributions = Tensor::new(image.shape().to_vec(), attributions)?;

    let score_input = score_input.ok_or(Error::ClassOutOfRange {
        class,
        classes: model.num_classes(),
    })?;
    let score_baseline = model.logits(&baseline)?.data()[class];
    let score_delta = score_input.as_f64() - score_baseline.as_f64();
    let total: f64 = attributions.data().iter().map(|v| v.as_f64()).sum();
    Ok(IgResult {
        attributions,
        completeness_gap: (total - score_delta).abs(),
        score_delta,
        target_class: class,
        steps: m,
        rule: params.rule,
        baseline,
    })
}

/// `|sum_i IG_i - (F(x) - F(x'))|` for the given settings.
pub fn completeness_gap<T: Scalar>(
    model: &ModelGraph<T>,
    image: &Tensor<T>,
    params: &IgParams<T>,
) -> Result<f64> {
    Ok(integrated_gradients(model, image, params)?.completeness_gap)
}
