//! Gradient-weighted class activation maps.
//!
//! For a conv feature map `A` (channels `k`) and class score `Y^c`, each
//! channel gets the weight `a_k = mean_ij dY^c/dA_kij`. The map is
//! `relu(sum_k a_k A_k)`, upsampled to the input resolution and min-max
//! normalized.

use crate::error::{Error, Result};
use crate::nn::{ForwardTrace, LayerSpec, ModelGraph};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GradCamParams {
    /// Explained class; `None` selects the top prediction.
    pub target_class: Option<usize>,
    /// Conv layer whose output is weighted; `None` selects the last conv.
    pub layer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassActivationMap<T: Scalar = f64> {
    /// `H' x W'` map at feature-map resolution, non-negative.
    pub raw: Tensor<T>,
    /// `H x W` map at input resolution, in `[0, 1]`.
    pub upsampled: Tensor<T>,
    pub target_class: usize,
    pub layer: usize,
    pub channel_weights: Vec<T>,
}

fn check_conv_layer<T: Scalar>(model: &ModelGraph<T>, layer: usize) -> Result<()> {
    match model.layers().get(layer) {
        Some(LayerSpec::Conv2d { .. }) => Ok(()),
        Some(other) => Err(Error::Layer {
            layer,
            reason: format!("{} is not a conv layer", other.name()),
        }),
        None => Err(Error::Layer {
            layer,
            reason: "no such layer".into(),
        }),
    }
}

/// Spatially averaged gradients of the class score with respect to the
/// output of conv layer `layer`, one weight per channel.
pub fn channel_weights<T: Scalar>(
    trace: &ForwardTrace<'_, T>,
    layer: usize,
    class: usize,
) -> Result<Vec<T>> {
    check_conv_layer(trace.model(), layer)?;
    let grad = trace.gradient_wrt_layer(layer, class)?;
    Ok(grad.reduce_mean_spatial()?.into_data())
}

/// `relu(sum_k weights[k] * maps[k])` for a `C x H x W` feature tensor.
pub fn weighted_combination<T: Scalar>(maps: &Tensor<T>, weights: &[T]) -> Result<Tensor<T>> {
    let &[c, h, w] = maps.shape() else {
        return Err(Error::InvalidShape {
            shape: maps.shape().to_vec(),
            reason: "expected C x H x W".into(),
        });
    };
    if weights.len() != c {
        return Err(Error::ShapeMismatch {
            left: vec![c],
            right: vec![weights.len()],
        });
    }
    let mut acc = vec![T::zero(); h * w];
    for (plane, &a) in maps.data().chunks_exact(h * w).zip(weights) {
        for (o, &v) in acc.iter_mut().zip(plane) {
            *o += a * v;
        }
    }
    Tensor::new(vec![h, w], acc)?.relu()
}

/// Full Grad-CAM pipeline on one `C x H x W` image.
pub fn grad_cam<T: Scalar>(
    model: &ModelGraph<T>,
    image: &Tensor<T>,
    params: &GradCamParams,
) -> Result<ClassActivationMap<T>> {
    let layer = match params.layer {
        Some(l) => {
            check_conv_layer(model, l)?;
            l
        }
        None => model.last_conv_layer().ok_or(Error::NoConvLayer)?,
    };
    let trace = model.forward(image)?;
    let class = params.target_class.unwrap_or_else(|| trace.predicted());
    let weights = channel_weights(&trace, layer, class)?;
    let maps = trace.activation(layer).expect("layer exists");
    let raw = weighted_combination(maps, &weights)?;
    let [_, h, w] = model.input_shape();
    let upsampled = raw.bilinear_resize(h, w)?.minmax_normalize();
    Ok(ClassActivationMap {
        raw,
        upsampled,
        target_class: class,
        layer,
        channel_weights: weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mini_vgg, Params};

    fn single_conv_model(weight: f64) -> ModelGraph<f64> {
        // conv1x1 -> gap -> dense(1 -> 1): dY/dA is uniform = dense_w / (H*W).
        ModelGraph::new(
            "tiny",
            [1, 2, 2],
            vec!["only".into()],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    in_features: 1,
                    out_features: 1,
                },
            ],
            vec![
                Some(Params {
                    weight: Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap(),
                    bias: Tensor::zeros(&[1]).unwrap(),
                }),
                None,
                Some(Params {
                    weight: Tensor::from_f64(&[1, 1], &[weight]).unwrap(),
                    bias: Tensor::zeros(&[1]).unwrap(),
                }),
            ],
        )
        .unwrap()
    }

    #[test]
    fn uniform_gradient_gives_scaled_feature_map() {
        let m = single_conv_model(8.0);
        let x = Tensor::from_f64(&[1, 2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap();
        let cam = grad_cam(&m, &x, &GradCamParams::default()).unwrap();
        // g = 8 / 4 = 2 at every position.
        assert_eq!(cam.channel_weights, vec![2.0]);
        assert_eq!(cam.raw.data(), &[2.0, 0.0, 6.0, 1.0]);
    }

    #[test]
    fn negative_weights_kill_the_map() {
        let m = single_conv_model(-3.0);
        let x = Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 0.5]).unwrap();
        let cam = grad_cam(&m, &x, &GradCamParams::default()).unwrap();
        assert!(cam.channel_weights[0] < 0.0);
        assert!(cam.raw.data().iter().all(|&v| v == 0.0));
        assert!(cam.upsampled.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_combination_hand_values() {
        let maps = Tensor::from_f64(&[2, 1, 2], &[1.0, 2.0, 3.0, -4.0]).unwrap();
        let r = weighted_combination(&maps, &[0.5, 1.0]).unwrap();
        assert_eq!(r.data(), &[3.5, 0.0]);
    }

    #[test]
    fn spatial_mean_of_gradient_map() {
        let g = Tensor::<f64>::from_f64(&[1, 2, 2], &[1.0, -1.0, 3.0, 5.0]).unwrap();
        assert_eq!(g.reduce_mean_spatial().unwrap().data(), &[2.0]);
    }

    #[test]
    fn heatmap_matches_input_resolution_and_is_deterministic() {
        let m = mini_vgg::<f64>(20, 3, 3).unwrap();
        let x = Tensor::from_fn(&[3, 20, 20], |i| ((i * 97) % 23) as f64 / 23.0).unwrap();
        let a = grad_cam(&m, &x, &GradCamParams::default()).unwrap();
        let b = grad_cam(&m, &x, &GradCamParams::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.upsampled.shape(), &[20, 20]);
        assert_eq!(a.raw.shape(), &[10, 10]);
        assert!(a.raw.data().iter().all(|&v| v >= 0.0));
        assert!(a.upsampled.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_non_conv_layers() {
        let m = mini_vgg::<f64>(8, 3, 3).unwrap();
        let x = Tensor::full(&[3, 8, 8], 0.5).unwrap();
        let params = GradCamParams {
            layer: Some(1),
            ..Default::default()
        };
        assert!(grad_cam(&m, &x, &params)
            .unwrap_err()
            .to_string()
            .contains("not a conv layer"));

        let dense = ModelGraph::<f64>::init(
            "dense",
            [1, 2, 2],
            vec!["a".into(), "b".into()],
            vec![LayerSpec::Dense {
                in_features: 4,
                out_features: 2,
            }],
            0,
        )
        .unwrap();
        let err = grad_cam(
            &dense,
            &Tensor::zeros(&[1, 2, 2]).unwrap(),
            &GradCamParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NoConvLayer));
    }
}
