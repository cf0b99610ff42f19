//! Small convolutional classifiers: a layer list evaluated in order, with
//! reverse-mode gradients to the input, to any intermediate activation, and
//! to the parameters.

mod arch;
mod io;
pub(crate) mod layers;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use layers::ConvGeom;

pub use arch::{mini_resnet, mini_vgg, Architecture, MINI_RESNET_WIDTH, MINI_VGG_WIDTH};
pub use io::{
    load_model, model_precision, read_model, save_model, write_model, FORMAT_VERSION, MAGIC,
};
pub use train::{evaluate, train, Dataset, EpochMetrics, TrainConfig};

/// One layer of a [`ModelGraph`]. Each layer consumes the output of the
/// layer before it (the model input for layer 0).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Square kernel, zero "same" padding of `kernel / 2`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    Maxpool2x2,
    GlobalAvgPool,
    /// Flattens its input.
    Dense {
        in_features: usize,
        out_features: usize,
    },
    /// Only valid as the final layer; the logits are its input.
    Softmax,
    /// Adds the output of layer `from` to the previous layer's output.
    ResidualAdd {
        from: usize,
    },
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. })
    }

    /// Shapes of `(weight, bias)` for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Maxpool2x2 => "maxpool2x2",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
            LayerSpec::ResidualAdd { .. } => "residual_add",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Params<T> {
    fn zeros_like(&self) -> Self {
        Params {
            weight: Tensor::zeros(self.weight.shape()).expect("valid shape"),
            bias: Tensor::zeros(self.bias.shape()).expect("valid shape"),
        }
    }

    fn add_assign(&mut self, other: &Params<T>) {
        for (a, &b) in self.weight.data_mut().iter_mut().zip(other.weight.data()) {
            *a += b;
        }
        for (a, &b) in self.bias.data_mut().iter_mut().zip(other.bias.data()) {
            *a += b;
        }
    }
}

/// Immutable classifier: layers, their parameters, and input/class metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T = f64> {
    name: String,
    input_shape: [usize; 3],
    class_names: Vec<String>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<Params<T>>>,
    shapes: Vec<Vec<usize>>,
    logits_layer: usize,
}

fn layer_err(layer: usize, reason: impl Into<String>) -> Error {
    Error::Layer {
        layer,
        reason: reason.into(),
    }
}

fn infer_shapes(input_shape: [usize; 3], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let prev = shapes
            .last()
            .cloned()
            .unwrap_or_else(|| input_shape.to_vec());
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match prev.as_slice() {
                &[c, h, w] => Ok((c, h, w)),
                _ => Err(layer_err(
                    i,
                    format!("{what} needs a C x H x W input, got {prev:?}"),
                )),
            }
        };
        let out = match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let (c, h, w) = spatial("conv2d")?;
                if c != in_channels {
                    return Err(layer_err(
                        i,
                        format!("expects {in_channels} input channels, got {c}"),
                    ));
                }
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(layer_err(
                        i,
                        "kernel, stride and channel counts must be positive",
                    ));
                }
                let pad = kernel / 2;
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(layer_err(
                        i,
                        format!("kernel {kernel} larger than padded input {h}x{w}"),
                    ));
                }
                let g = ConvGeom {
                    in_c: c,
                    out_c: out_channels,
                    h,
                    w,
                    k: kernel,
                    stride,
                    pad,
                };
                vec![out_channels, g.out_h(), g.out_w()]
            }
            LayerSpec::Relu => prev,
            LayerSpec::Maxpool2x2 => {
                let (c, h, w) = spatial("maxpool2x2")?;
                if h < 2 || w < 2 {
                    return Err(layer_err(
                        i,
                        format!("maxpool2x2 needs at least 2x2, got {h}x{w}"),
                    ));
                }
                vec![c, h / 2, w / 2]
            }
            LayerSpec::GlobalAvgPool => {
                let (c, h, w) = spatial("global_avg_pool")?;
                if h * w == 0 {
                    return Err(layer_err(i, "empty spatial extent"));
                }
                vec![c]
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let n: usize = prev.iter().product();
                if n != in_features {
                    return Err(layer_err(
                        i,
                        format!("expects {in_features} features, got {n} ({prev:?})"),
                    ));
                }
                if out_features == 0 {
                    return Err(layer_err(i, "dense layer with zero outputs"));
                }
                vec![out_features]
            }
            LayerSpec::Softmax => {
                if i + 1 != layers.len() {
                    return Err(layer_err(i, "softmax must be the final layer"));
                }
                if prev.len() != 1 {
                    return Err(layer_err(
                        i,
                        format!("softmax needs a vector input, got {prev:?}"),
                    ));
                }
                prev
            }
            LayerSpec::ResidualAdd { from } => {
                if from >= i {
                    return Err(layer_err(
                        i,
                        format!("residual source {from} must be an earlier layer"),
                    ));
                }
                if shapes[from] != prev {
                    return Err(layer_err(
                        i,
                        format!(
                            "residual source {from} has shape {:?}, previous output {prev:?}",
                            shapes[from]
                        ),
                    ));
                }
                prev
            }
        };
        shapes.push(out);
    }
    Ok(shapes)
}

impl<T: Scalar> ModelGraph<T> {
    /// Assembles a model from explicit parameters, validating the graph.
    pub fn new(
        name: impl Into<String>,
        input_shape: [usize; 3],
        class_names: Vec<String>,
        layers: Vec<LayerSpec>,
        params: Vec<Option<Params<T>>>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model has no layers"));
        }
        if params.len() != layers.len() {
            return Err(Error::invalid(format!(
                "{} parameter slots for {} layers",
                params.len(),
                layers.len()
            )));
        }
        let shapes = infer_shapes(input_shape, &layers)?;
        for (i, (layer, p)) in layers.iter().zip(&params).enumerate() {
            match (layer.param_shapes(), p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) => {
                    if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                        return Err(layer_err(
                            i,
                            format!(
                                "parameter shapes {:?}/{:?}, expected {ws:?}/{bs:?}",
                                p.weight.shape(),
                                p.bias.shape()
                            ),
                        ));
                    }
                }
                (Some(_), None) => return Err(layer_err(i, "missing parameters")),
                (None, Some(_)) => {
                    return Err(layer_err(
                        i,
                        format!("{} takes no parameters", layer.name()),
                    ))
                }
            }
        }
        let logits_layer = match layers.last() {
            Some(LayerSpec::Softmax) => layers.len() - 2,
            _ => layers.len() - 1,
        };
        if layers.len() == 1 && matches!(layers[0], LayerSpec::Softmax) {
            return Err(Error::invalid("a model cannot consist of softmax alone"));
        }
        let logits_shape = &shapes[logits_layer];
        if logits_shape.len() != 1 || logits_shape[0] != class_names.len() {
            return Err(Error::invalid(format!(
                "logit output {logits_shape:?} does not match {} classes",
                class_names.len()
            )));
        }
        Ok(ModelGraph {
            name: name.into(),
            input_shape,
            class_names,
            layers,
            params,
            shapes,
            logits_layer,
        })
    }

    /// Fan-in scaled Gaussian (He) weights and zero biases, seeded.
    pub fn init(
        name: impl Into<String>,
        input_shape: [usize; 3],
        class_names: Vec<String>,
        layers: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .map(|l| {
                l.param_shapes().map(|(ws, bs)| {
                    let fan_in: usize = ws[1..].iter().product();
                    let normal =
                        Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    Params {
                        weight: Tensor::from_fn(&ws, |_| T::of(normal.sample(&mut rng)))
                            .expect("valid shape"),
                        bias: Tensor::zeros(&bs).expect("valid shape"),
                    }
                })
            })
            .collect();
        Self::new(name, input_shape, class_names, layers, params)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<Params<T>>] {
        &self.params
    }

    /// Output shape of each layer.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    /// Index of the layer whose output is the logit vector.
    pub fn logits_layer(&self) -> usize {
        self.logits_layer
    }

    pub fn last_conv_layer(&self) -> Option<usize> {
        self.layers.iter().rposition(LayerSpec::is_conv)
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            name: self.name.clone(),
            input_shape: self.input_shape,
            class_names: self.class_names.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| Params {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
            shapes: self.shapes.clone(),
            logits_layer: self.logits_layer,
        }
    }

    /// Applies `f` to the parameters of one layer, revalidating the result.
    pub fn map_params(
        &self,
        layer: usize,
        f: impl FnOnce(&Params<T>) -> Result<Params<T>>,
    ) -> Result<Self> {
        let current = self
            .params
            .get(layer)
            .and_then(Option::as_ref)
            .ok_or_else(|| layer_err(layer, "layer has no parameters"))?;
        let mut params = self.params.clone();
        params[layer] = Some(f(current)?);
        Self::new(
            self.name.clone(),
            self.input_shape,
            self.class_names.clone(),
            self.layers.clone(),
            params,
        )
    }

    pub(crate) fn into_params(self) -> Vec<Option<Params<T>>> {
        self.params
    }

    pub(crate) fn zero_grads(&self) -> Vec<Option<Params<T>>> {
        self.params
            .iter()
            .map(|p| p.as_ref().map(Params::zeros_like))
            .collect()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let s = input.shape();
        let expected = self.input_shape.to_vec();
        if s == expected.as_slice() {
            Ok(input.clone())
        } else if s.len() == 4 && s[0] == 1 && s[1..] == expected[..] {
            input.reshape(&expected)
        } else {
            Err(Error::InputShape {
                expected,
                got: s.to_vec(),
            })
        }
    }

    /// Runs the model, keeping every layer's activation.
    pub fn forward(&self, input: &Tensor<T>) -> Result<ForwardTrace<'_, T>> {
        let input = self.check_input(input)?;
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { &input } else { &acts[i - 1] };
            let out_shape = self.shapes[i].clone();
            let data = match *layer {
                LayerSpec::Conv2d { .. } => {
                    let p = self.params[i].as_ref().expect("validated");
                    layers::conv2d_forward(
                        x.data(),
                        p.weight.data(),
                        p.bias.data(),
                        &self.conv_geom(i, x),
                    )
                }
                LayerSpec::Relu => x.data().iter().map(|&v| v.max(T::zero())).collect(),
                LayerSpec::Maxpool2x2 => {
                    let s = x.shape();
                    layers::maxpool_forward(x.data(), s[0], s[1], s[2])
                }
                LayerSpec::GlobalAvgPool => {
                    let s = x.shape();
                    layers::gap_forward(x.data(), s[0], s[1] * s[2])
                }
                LayerSpec::Dense { .. } => {
                    let p = self.params[i].as_ref().expect("validated");
                    layers::dense_forward(x.data(), p.weight.data(), p.bias.data())
                }
                LayerSpec::Softmax => layers::softmax(x.data()),
                LayerSpec::ResidualAdd { from } => x
                    .data()
                    .iter()
                    .zip(acts[from].data())
                    .map(|(&a, &b)| a + b)
                    .collect(),
            };
            if data.iter().any(|v| !v.is_finite()) {
                return Err(layer_err(i, "non-finite activation"));
            }
            acts.push(Tensor::from_raw(out_shape, data));
        }
        let logits = acts[self.logits_layer].clone();
        let probabilities =
            Tensor::from_raw(logits.shape().to_vec(), layers::softmax(logits.data()));
        let predicted = logits.argmax().expect("non-empty logits");
        Ok(ForwardTrace {
            model: self,
            input,
            activations: acts,
            logits,
            probabilities,
            predicted,
        })
    }

    /// Logits only.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(input)?.logits)
    }

    /// Class probabilities only.
    pub fn predict_proba(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(input)?.probabilities)
    }

    fn conv_geom(&self, i: usize, x: &Tensor<T>) -> ConvGeom {
        let LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } = self.layers[i]
        else {
            unreachable!("conv_geom on non-conv layer")
        };
        let s = x.shape();
        ConvGeom {
            in_c: in_channels,
            out_c: out_channels,
            h: s[1],
            w: s[2],
            k: kernel,
            stride,
            pad: kernel / 2,
        }
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::ClassOutOfRange {
                class,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }
}

/// Where [`ForwardTrace::backprop`] stops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum GradTarget {
    Input,
    Layer(usize),
}

/// Every activation of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<'m, T: Scalar = f64> {
    model: &'m ModelGraph<T>,
    input: Tensor<T>,
    activations: Vec<Tensor<T>>,
    logits: Tensor<T>,
    probabilities: Tensor<T>,
    predicted: usize,
}

impl<'m, T: Scalar> ForwardTrace<'m, T> {
    pub fn model(&self) -> &'m ModelGraph<T> {
        self.model
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    pub fn activations(&self) -> &[Tensor<T>] {
        &self.activations
    }

    pub fn activation(&self, layer: usize) -> Option<&Tensor<T>> {
        self.activations.get(layer)
    }

    /// Pre-softmax class scores.
    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    pub fn probabilities(&self) -> &Tensor<T> {
        &self.probabilities
    }

    /// Argmax of the logits.
    pub fn predicted(&self) -> usize {
        self.predicted
    }

    fn one_hot(&self, class: usize) -> Result<Tensor<T>> {
        self.model.check_class(class)?;
        let mut seed = vec![T::zero(); self.model.num_classes()];
        seed[class] = T::one();
        Ok(Tensor::from_raw(vec![seed.len()], seed))
    }

    /// d logit[class] / d input.
    pub fn gradient_wrt_input(&self, class: usize) -> Result<Tensor<T>> {
        let seed = self.one_hot(class)?;
        self.backprop(seed, GradTarget::Input, None)
    }

    /// d logit[class] / d (output of `layer`).
    pub fn gradient_wrt_layer(&self, layer: usize, class: usize) -> Result<Tensor<T>> {
        if layer > self.model.logits_layer {
            return Err(layer_err(
                layer,
                "layer lies after the logits; no gradient flows there",
            ));
        }
        let seed = self.one_hot(class)?;
        self.backprop(seed, GradTarget::Layer(layer), None)
    }

    /// Propagates `seed` (a gradient with respect to the logits) back to
    /// `target`, optionally accumulating parameter gradients.
    pub(crate) fn backprop(
        &self,
        seed: Tensor<T>,
        target: GradTarget,
        mut param_grads: Option<&mut [Option<Params<T>>]>,
    ) -> Result<Tensor<T>> {
        let model = self.model;
        let top = model.logits_layer;
        let stop = match target {
            GradTarget::Input => 0,
            GradTarget::Layer(l) if l == top => return Ok(seed),
            GradTarget::Layer(l) => l + 1,
        };
        let mut grads: Vec<Option<Vec<T>>> = vec![None; model.layers.len()];
        grads[top] = Some(seed.into_data());
        let mut input_grad: Option<Vec<T>> = None;

        fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
            match slot {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }

        for i in (stop..=top).rev() {
            let Some(g) = grads[i].take() else { continue };
            let x = if i == 0 {
                &self.input
            } else {
                &self.activations[i - 1]
            };
            let want = param_grads.is_some();
            let gx = match model.layers[i] {
                LayerSpec::Conv2d { .. } => {
                    let p = model.params[i].as_ref().expect("validated");
                    let r = layers::conv2d_backward(
                        x.data(),
                        p.weight.data(),
                        &g,
                        &model.conv_geom(i, x),
                        want,
                    );
                    if let (Some(pg), Some(w), Some(b)) =
                        (param_grads.as_deref_mut(), r.weight, r.bias)
                    {
                        add_param_grad(&mut pg[i], &w, &b);
                    }
                    r.input
                }
                LayerSpec::Relu => layers::relu_backward(x.data(), &g),
                LayerSpec::Maxpool2x2 => {
                    let s = x.shape();
                    layers::maxpool_backward(x.data(), &g, s[0], s[1], s[2])
                }
                LayerSpec::GlobalAvgPool => {
                    let s = x.shape();
                    layers::gap_backward(&g, s[1] * s[2])
                }
                LayerSpec::Dense { .. } => {
                    let p = model.params[i].as_ref().expect("validated");
                    let r = layers::dense_backward(x.data(), p.weight.data(), &g, want);
                    if let (Some(pg), Some(w), Some(b)) =
                        (param_grads.as_deref_mut(), r.weight, r.bias)
                    {
                        add_param_grad(&mut pg[i], &w, &b);
                    }
                    r.input
                }
                LayerSpec::Softmax => unreachable!("softmax lies above the logits"),
                LayerSpec::ResidualAdd { from } => {
                    if from >= stop {
                        accumulate(&mut grads[from], g.clone());
                    }
                    g
                }
            };
            if i == 0 {
                input_grad = Some(gx);
            } else {
                accumulate(&mut grads[i - 1], gx);
            }
        }

        let (shape, data) = match target {
            GradTarget::Input => (self.input.shape().to_vec(), input_grad),
            GradTarget::Layer(l) => (model.shapes[l].clone(), grads[l].take()),
        };
        let n = shape.iter().product();
        let data = data.unwrap_or_else(|| vec![T::zero(); n]);
        Tensor::new(shape, data)
    }
}

fn add_param_grad<T: Scalar>(slot: &mut Option<Params<T>>, w: &[T], b: &[T]) {
    let p = slot
        .as_mut()
        .expect("gradient slot for parameterized layer");
    for (a, &v) in p.weight.data_mut().iter_mut().zip(w) {
        *a += v;
    }
    for (a, &v) in p.bias.data_mut().iter_mut().zip(b) {
        *a += v;
    }
}

pub(crate) fn sum_grads<T: Scalar>(into: &mut [Option<Params<T>>], from: &[Option<Params<T>>]) {
    for (a, b) in into.iter_mut().zip(from) {
        if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
            a.add_assign(b);
        }
    }
}
