//! Mini-batch SGD with softmax cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{sum_grads, GradTarget, ModelGraph, Params};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Labelled images, each `C x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T = f64> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.iter().map(Tensor::cast).collect(),
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            learning_rate: 0.1,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch, measured before each step.
    pub loss: f64,
    pub accuracy: f64,
}

struct SampleGrad<T> {
    grads: Vec<Option<Params<T>>>,
    loss: f64,
    correct: bool,
}

fn sample_grad<T: Scalar>(
    model: &ModelGraph<T>,
    image: &Tensor<T>,
    label: usize,
) -> Result<SampleGrad<T>> {
    let trace = model.forward(image)?;
    let probs = trace.probabilities().data();
    let mut seed: Vec<T> = probs.to_vec();
    seed[label] -= T::one();
    let mut grads = model.zero_grads();
    trace.backprop(
        Tensor::from_raw(vec![seed.len()], seed),
        GradTarget::Input,
        Some(&mut grads),
    )?;
    Ok(SampleGrad {
        grads,
        loss: -probs[label].as_f64().max(1e-300).ln(),
        correct: trace.predicted() == label,
    })
}

/// Trains a copy of `model`; deterministic for a fixed seed.
pub fn train<T: Scalar>(
    model: &ModelGraph<T>,
    data: &Dataset<T>,
    config: &TrainConfig,
) -> Result<(ModelGraph<T>, Vec<EpochMetrics>)> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    if data.labels.len() != data.images.len() {
        return Err(Error::Dataset("image and label counts differ".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::ClassOutOfRange {
            class: bad,
            classes: model.num_classes(),
        });
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let lr = T::of(config.learning_rate);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let per_sample: Vec<SampleGrad<T>> = batch
                .par_iter()
                .map(|&i| sample_grad(&model, &data.images[i], data.labels[i]))
                .collect::<Result<_>>()?;
            let mut total = model.zero_grads();
            for s in &per_sample {
                sum_grads(&mut total, &s.grads);
                loss += s.loss;
                correct += usize::from(s.correct);
            }
            let scale = lr / T::of(batch.len() as f64);
            let mut params = model.clone().into_params();
            for (p, g) in params.iter_mut().zip(&total) {
                if let (Some(p), Some(g)) = (p.as_mut(), g.as_ref()) {
                    for (w, &d) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
                        *w -= scale * d;
                    }
                    for (b, &d) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                        *b -= scale * d;
                    }
                }
            }
            model = ModelGraph::new(
                model.name().to_string(),
                model.input_shape(),
                model.class_names().to_vec(),
                model.layers().to_vec(),
                params,
            )?;
            if model
                .params()
                .iter()
                .flatten()
                .any(|p| p.weight.data().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::NonFinite("training step (learning rate too large?)"));
            }
        }
        history.push(EpochMetrics {
            epoch: epoch + 1,
            loss: loss / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((model, history))
}

/// Fraction of `data` classified correctly.
pub fn evaluate<T: Scalar>(model: &ModelGraph<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let hits: Vec<bool> = data
        .images
        .par_iter()
        .zip(&data.labels)
        .map(|(x, &y)| Ok(model.forward(x)?.predicted() == y))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}
