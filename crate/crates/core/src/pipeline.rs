//! One image, one method, rendered to the usual visual artifacts.

use crate::bench::Method;
use crate::error::{Error, Result};
use crate::gradcam::{grad_cam, GradCamParams};
use crate::ig::{integrated_gradients, IgParams};
use crate::lime::{explain, LimeParams};
use crate::nn::ModelGraph;
use crate::tensor::{Scalar, Tensor};
use crate::viz::{
    attribution_magnitude, colormap, overlay, render_lime, signed_attribution_mask, LimeRender,
    RgbImage, DEFAULT_ALPHA,
};

/// Segments kept by the LIME isolation render.
pub const DEFAULT_ISOLATE_FEATURES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainConfig<T: Scalar = f64> {
    pub method: Method,
    pub gradcam: GradCamParams,
    pub ig: IgParams<T>,
    pub lime: LimeParams,
    pub alpha: f64,
    pub isolate_features: usize,
}

impl<T: Scalar> ExplainConfig<T> {
    pub fn new(method: Method) -> Self {
        ExplainConfig {
            method,
            gradcam: GradCamParams::default(),
            ig: IgParams::default(),
            lime: LimeParams::default(),
            alpha: DEFAULT_ALPHA,
            isolate_features: DEFAULT_ISOLATE_FEATURES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    /// File stem, e.g. `gradcam_overlay`.
    pub name: String,
    pub image: RgbImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainOutput {
    pub predicted: usize,
    pub artifacts: Vec<Artifact>,
    /// Human-readable `key: value` lines.
    pub summary: Vec<String>,
}

fn artifact(name: impl Into<String>, image: RgbImage) -> Artifact {
    Artifact {
        name: name.into(),
        image,
    }
}

pub fn explain_image<T: Scalar>(
    model: &ModelGraph<T>,
    image: &Tensor<T>,
    config: &ExplainConfig<T>,
) -> Result<ExplainOutput> {
    if !(0.0..=1.0).contains(&config.alpha) {
        return Err(Error::invalid(format!(
            "alpha {} outside [0, 1]",
            config.alpha
        )));
    }
    let trace = model.forward(image)?;
    let predicted = trace.predicted();
    let base = RgbImage::from_tensor(image)?;
    let class_name = |c: usize| {
        model
            .class_names()
            .get(c)
            .cloned()
            .unwrap_or_else(|| c.to_string())
    };
    let mut summary = vec![
        format!("model: {}", model.name()),
        format!("predicted: {} ({})", predicted, class_name(predicted)),
    ];
    let mut artifacts = vec![artifact("input", base.clone())];
    match config.method {
        Method::GradCam => {
            let cam = grad_cam(model, image, &config.gradcam)?;
            let heat = colormap(&cam.upsampled)?;
            summary.push(format!("target: {}", cam.target_class));
            summary.push(format!("layer: {}", cam.layer));
            artifacts.push(artifact(
                "gradcam_overlay",
                overlay(&base, &heat, config.alpha)?,
            ));
            artifacts.push(artifact("gradcam_heatmap", heat));
        }
        Method::Ig => {
            let r = integrated_gradients(model, image, &config.ig)?;
            let mask = colormap(&attribution_magnitude(&r.attributions)?)?;
            summary.push(format!("target: {}", r.target_class));
            summary.push(format!("steps: {}", r.steps));
            summary.push(format!("score delta: {:.6}", r.score_delta));
            summary.push(format!("completeness gap: {:.6e}", r.completeness_gap));
            artifacts.push(artifact("ig_overlay", overlay(&base, &mask, config.alpha)?));
            artifacts.push(artifact("ig_mask", mask));
            artifacts.push(artifact(
                "ig_signed",
                signed_attribution_mask(&r.attributions)?,
            ));
        }
        Method::Lime => {
            for ex in explain(model, image, &config.lime)? {
                let c = ex.target_class;
                summary.push(format!(
                    "label {c} ({}): r2 {:.4}, top segment {:?}",
                    class_name(c),
                    ex.r_squared,
                    ex.top_positive_segment()
                ));
                let isolate = LimeRender::Isolate {
                    num_features: config.isolate_features,
                };
                artifacts.push(artifact(
                    format!("lime_isolate_{c}"),
                    render_lime(&base, &ex, isolate)?,
                ));
                artifacts.push(artifact(
                    format!("lime_signed_{c}"),
                    render_lime(&base, &ex, LimeRender::Signed)?,
                ));
            }
        }
    }
    Ok(ExplainOutput {
        predicted,
        artifacts,
        summary,
    })
}
