//! Reference architectures: a plain conv stack and a residual network with
//! roughly four times its parameter count.

use std::fmt;
use std::str::FromStr;

use super::{LayerSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const MINI_VGG_WIDTH: usize = 8;
pub const MINI_RESNET_WIDTH: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    MiniVgg,
    MiniResNet,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::MiniVgg, Architecture::MiniResNet];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::MiniVgg => "minivgg",
            Architecture::MiniResNet => "miniresnet",
        }
    }

    pub fn build<T: Scalar>(
        self,
        input_size: usize,
        classes: usize,
        seed: u64,
    ) -> Result<ModelGraph<T>> {
        match self {
            Architecture::MiniVgg => mini_vgg(input_size, classes, seed),
            Architecture::MiniResNet => mini_resnet(input_size, classes, seed),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "minivgg" => Ok(Architecture::MiniVgg),
            "miniresnet" => Ok(Architecture::MiniResNet),
            other => Err(Error::invalid(format!(
                "unknown model {other:?} (valid: minivgg, miniresnet)"
            ))),
        }
    }
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i}")).collect()
}

/// `[conv3x3 - relu - conv3x3 - relu - maxpool] x 2 -> gap -> dense -> softmax`.
pub fn mini_vgg<T: Scalar>(input_size: usize, classes: usize, seed: u64) -> Result<ModelGraph<T>> {
    let w = MINI_VGG_WIDTH;
    let mut layers = Vec::new();
    let mut c_in = 3;
    for _ in 0..2 {
        layers.extend([
            LayerSpec::conv3x3(c_in, w),
            LayerSpec::Relu,
            LayerSpec::conv3x3(w, w),
            LayerSpec::Relu,
            LayerSpec::Maxpool2x2,
        ]);
        c_in = w;
    }
    layers.extend([
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense {
            in_features: w,
            out_features: classes,
        },
        LayerSpec::Softmax,
    ]);
    ModelGraph::init(
        "minivgg",
        [3, input_size, input_size],
        class_names(classes),
        layers,
        seed,
    )
}

/// Stem conv, then two residual blocks
/// `conv - relu - conv - add(block input) - relu - maxpool`, then
/// `gap -> dense -> softmax`.
pub fn mini_resnet<T: Scalar>(
    input_size: usize,
    classes: usize,
    seed: u64,
) -> Result<ModelGraph<T>> {
    let w = MINI_RESNET_WIDTH;
    let mut layers = vec![LayerSpec::conv3x3(3, w), LayerSpec::Relu];
    for _ in 0..2 {
        let block_input = layers.len() - 1;
        layers.extend([
            LayerSpec::conv3x3(w, w),
            LayerSpec::Relu,
            LayerSpec::conv3x3(w, w),
            LayerSpec::ResidualAdd { from: block_input },
            LayerSpec::Relu,
            LayerSpec::Maxpool2x2,
        ]);
    }
    layers.extend([
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense {
            in_features: w,
            out_features: classes,
        },
        LayerSpec::Softmax,
    ]);
    ModelGraph::init(
        "miniresnet",
        [3, input_size, input_size],
        class_names(classes),
        layers,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Params;
    use crate::tensor::Tensor;

    #[test]
    fn resnet_is_roughly_four_times_denser() {
        let vgg = mini_vgg::<f32>(64, 3, 0).unwrap();
        let res = mini_resnet::<f32>(64, 3, 0).unwrap();
        let ratio = res.parameter_count() as f64 / vgg.parameter_count() as f64;
        assert!((3.0..6.0).contains(&ratio), "ratio {ratio}");
        assert_eq!(vgg.last_conv_layer(), Some(7));
    }

    #[test]
    fn compat_input_size() {
        let m = mini_vgg::<f32>(224, 3, 0).unwrap();
        assert_eq!(m.layer_shapes()[9], vec![8, 56, 56]);
    }

    #[test]
    fn zeroed_residual_branches_reduce_to_plain_stack() {
        let res = mini_resnet::<f64>(16, 3, 9).unwrap();
        let zero = |p: &Params<f64>| {
            Ok(Params {
                weight: Tensor::zeros(p.weight.shape()).unwrap(),
                bias: Tensor::zeros(p.bias.shape()).unwrap(),
            })
        };
        let mut zeroed = res.clone();
        for (i, l) in res.layers().iter().enumerate().skip(2) {
            if l.is_conv() {
                zeroed = zeroed.map_params(i, zero).unwrap();
            }
        }
        let dense = res.layers().len() - 2;
        let plain = ModelGraph::new(
            "plain",
            [3, 16, 16],
            res.class_names().to_vec(),
            vec![
                LayerSpec::conv3x3(3, MINI_RESNET_WIDTH),
                LayerSpec::Relu,
                LayerSpec::Maxpool2x2,
                LayerSpec::Maxpool2x2,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    in_features: MINI_RESNET_WIDTH,
                    out_features: 3,
                },
                LayerSpec::Softmax,
            ],
            vec![
                res.params()[0].clone(),
                None,
                None,
                None,
                None,
                res.params()[dense].clone(),
                None,
            ],
        )
        .unwrap();
        let x = Tensor::from_fn(&[3, 16, 16], |i| ((i * 7919) % 101) as f64 / 101.0 - 0.3).unwrap();
        let a = zeroed.forward(&x).unwrap();
        let b = plain.forward(&x).unwrap();
        assert_eq!(a.logits().data(), b.logits().data());
    }

    #[test]
    fn architecture_names() {
        assert_eq!(
            "MiniResNet".parse::<Architecture>().unwrap(),
            Architecture::MiniResNet
        );
        assert!("vgg16"
            .parse::<Architecture>()
            .unwrap_err()
            .to_string()
            .contains("minivgg"));
    }
}
