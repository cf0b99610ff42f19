//! Self-checks run by `attrib verify`: gradient check, IG completeness and
//! LIME surrogate fidelity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::ig::{integrated_gradients, IgParams};
use crate::lime::{explain, grid_segments, Classifier, LimeParams, SegmentMap, SegmentMethod};
use crate::nn::layers::maxpool_argmax;
use crate::nn::{mini_resnet, mini_vgg, ForwardTrace, LayerSpec, ModelGraph};
use crate::tensor::Tensor;

/// Finite-difference step for the gradient check.
pub const FD_STEP: f64 = 1e-4;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Entries where both gradients are below this are not compared.
pub const GRADIENT_FLOOR: f64 = 1e-8;
pub const COMPLETENESS_TOLERANCE: f64 = 0.01;
/// Images with a smaller `|F(x) - F(x')|` are skipped by the completeness check.
pub const MIN_SCORE_DELTA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

/// Outcome of one central-difference comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradientCheck {
    /// Max elementwise relative error over the compared entries.
    pub max_error: f64,
    pub compared: usize,
    /// Entries whose two probes switch a ReLU sign or a max-pool winner.
    /// The function is not smooth on that interval, so central differences
    /// say nothing about the derivative there.
    pub kinked: usize,
}

/// ReLU input signs and max-pool winners of one forward pass.
pub fn switch_pattern(trace: &ForwardTrace<'_, f64>) -> Vec<usize> {
    let mut pattern = Vec::new();
    for (l, layer) in trace.model().layers().iter().enumerate() {
        let input = if l == 0 {
            trace.input()
        } else {
            &trace.activations()[l - 1]
        };
        match layer {
            LayerSpec::Relu => pattern.extend(input.data().iter().map(|&v| usize::from(v > 0.0))),
            LayerSpec::Maxpool2x2 => {
                let s = input.shape();
                pattern.extend(maxpool_argmax(input.data(), s[0], s[1], s[2]));
            }
            _ => {}
        }
    }
    pattern
}

/// Compares the analytic input gradient of `class` with central differences.
pub fn gradient_check(
    model: &ModelGraph<f64>,
    x: &Tensor<f64>,
    class: usize,
    h: f64,
) -> Result<GradientCheck> {
    let analytic = model.forward(x)?.gradient_wrt_input(class)?;
    compare_gradient(model, x, class, h, &analytic)
}

/// Compares a claimed input gradient of `class` with central differences.
pub fn compare_gradient(
    model: &ModelGraph<f64>,
    x: &Tensor<f64>,
    class: usize,
    h: f64,
    analytic: &Tensor<f64>,
) -> Result<GradientCheck> {
    let mut out = GradientCheck::default();
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up_x = Tensor::new(x.shape().to_vec(), probe.clone())?;
        let up = model.forward(&up_x)?;
        probe[i] = orig - h;
        let down_x = Tensor::new(x.shape().to_vec(), probe.clone())?;
        let down = model.forward(&down_x)?;
        probe[i] = orig;
        if switch_pattern(&up) != switch_pattern(&down) {
            out.kinked += 1;
            continue;
        }
        let numeric = (up.logits().data()[class] - down.logits().data()[class]) / (2.0 * h);
        let a = analytic.data()[i];
        if a.abs() < GRADIENT_FLOOR && numeric.abs() < GRADIENT_FLOOR {
            continue;
        }
        out.compared += 1;
        out.max_error = out
            .max_error
            .max((a - numeric).abs() / a.abs().max(numeric.abs()));
    }
    Ok(out)
}

/// Max elementwise relative error between the analytic input gradient of
/// `class` and central differences, over entries where both probes see the
/// same ReLU and max-pool switches.
pub fn gradient_error(
    model: &ModelGraph<f64>,
    x: &Tensor<f64>,
    class: usize,
    h: f64,
) -> Result<f64> {
    Ok(gradient_check(model, x, class, h)?.max_error)
}

/// Small models that each exercise one layer kind, plus both mini
/// architectures, with random weights and biases.
pub fn gradient_check_models(seed: u64) -> Result<Vec<ModelGraph<f64>>> {
    let classes: Vec<String> = (0..3).map(|i| format!("class{i}")).collect();
    let conv = |i, o, k, s| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride: s,
    };
    let dense = |i, o| LayerSpec::Dense {
        in_features: i,
        out_features: o,
    };
    let specs: Vec<(&str, [usize; 3], Vec<LayerSpec>)> = vec![
        ("dense", [2, 3, 3], vec![dense(18, 3)]),
        (
            "conv",
            [2, 5, 5],
            vec![conv(2, 3, 3, 1), LayerSpec::GlobalAvgPool, dense(3, 3)],
        ),
        (
            "conv_stride2",
            [2, 6, 6],
            vec![conv(2, 2, 3, 2), LayerSpec::GlobalAvgPool, dense(2, 3)],
        ),
        (
            "relu",
            [1, 4, 4],
            vec![
                conv(1, 2, 1, 1),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                dense(2, 3),
            ],
        ),
        (
            "maxpool",
            [1, 4, 4],
            vec![
                conv(1, 2, 3, 1),
                LayerSpec::Maxpool2x2,
                LayerSpec::GlobalAvgPool,
                dense(2, 3),
            ],
        ),
        (
            "global_avg_pool",
            [3, 3, 3],
            vec![LayerSpec::GlobalAvgPool, dense(3, 3)],
        ),
        ("softmax", [1, 2, 2], vec![dense(4, 3), LayerSpec::Softmax]),
        (
            "residual_add",
            [2, 4, 4],
            vec![
                conv(2, 2, 3, 1),
                LayerSpec::Relu,
                conv(2, 2, 3, 1),
                LayerSpec::ResidualAdd { from: 0 },
                LayerSpec::GlobalAvgPool,
                dense(2, 3),
            ],
        ),
    ];
    let mut models = Vec::new();
    for (name, shape, layers) in specs {
        models.push(ModelGraph::init(
            name,
            shape,
            classes.clone(),
            layers,
            seed,
        )?);
    }
    models.push(mini_vgg(8, 3, seed)?);
    models.push(mini_resnet(8, 3, seed)?);
    models
        .into_iter()
        .map(|m| randomize_biases(m, seed))
        .collect()
}

fn randomize_biases(mut model: ModelGraph<f64>, seed: u64) -> Result<ModelGraph<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let normal = Normal::new(0.0, 0.1).expect("valid sigma");
    for layer in 0..model.layers().len() {
        if model.params()[layer].is_some() {
            model = model.map_params(layer, |p| {
                let mut p = p.clone();
                for b in p.bias.data_mut() {
                    *b = normal.sample(&mut rng);
                }
                Ok(p)
            })?;
        }
    }
    Ok(model)
}

/// Share of entries that may be skipped as kinked before the suite fails.
pub const MAX_KINKED_FRACTION: f64 = 0.05;

pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Result<SuiteResult> {
    let mut worst = (0.0f64, String::new());
    let (mut compared, mut kinked) = (0usize, 0usize);
    for seed in seeds.clone() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for model in gradient_check_models(seed)? {
            let [c, h, w] = model.input_shape();
            let x = Tensor::from_fn(&[c, h, w], |_| rng.random_range(0.0..1.0))?;
            let class = rng.random_range(0..model.num_classes());
            let r = gradient_check(&model, &x, class, FD_STEP)?;
            compared += r.compared;
            kinked += r.kinked;
            if r.max_error > worst.0 {
                worst = (r.max_error, format!("{} seed {seed}", model.name()));
            }
        }
    }
    let kinked_fraction = kinked as f64 / (compared + kinked).max(1) as f64;
    Ok(SuiteResult {
        name: "gradient check",
        passed: worst.0 <= GRADIENT_TOLERANCE && compared > 0 && kinked_fraction <= MAX_KINKED_FRACTION,
        detail: format!(
            "max relative error {:.3e} ({}) over seeds {}..{}, tolerance {GRADIENT_TOLERANCE:e}; {compared} entries compared, {kinked} skipped at kinks",
            worst.0, worst.1, seeds.start, seeds.end
        ),
    })
}

/// Relative completeness gap at `steps` on each image whose score moves by
/// more than [`MIN_SCORE_DELTA`].
pub fn completeness_suite(
    model: &ModelGraph<f64>,
    images: &[Tensor<f64>],
    steps: usize,
) -> Result<SuiteResult> {
    let params = IgParams {
        steps,
        ..Default::default()
    };
    let (mut checked, mut within, mut worst) = (0, 0, 0.0f64);
    for img in images {
        let r = integrated_gradients(model, img, &params)?;
        if r.score_delta.abs() <= MIN_SCORE_DELTA {
            continue;
        }
        checked += 1;
        worst = worst.max(r.relative_gap());
        within += usize::from(r.relative_gap() <= COMPLETENESS_TOLERANCE);
    }
    Ok(SuiteResult {
        name: "IG completeness",
        passed: checked > 0 && within == checked,
        detail: format!("{within}/{checked} images within {COMPLETENESS_TOLERANCE} relative gap at m={steps}, worst {worst:.4}"),
    })
}

/// Black box whose output is an affine function of which segments are
/// untouched.
pub struct MaskLinear {
    pub original: Tensor<f64>,
    pub segments: SegmentMap,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl MaskLinear {
    fn presence(&self, img: &Tensor<f64>) -> Vec<f64> {
        let plane = self.segments.height() * self.segments.width();
        let mut present = vec![1.0; self.segments.count()];
        for (i, (a, b)) in img.data().iter().zip(self.original.data()).enumerate() {
            if a != b {
                present[self.segments.labels()[i % plane] as usize] = 0.0;
            }
        }
        present
    }
}

impl Classifier<f64> for MaskLinear {
    fn predict_proba(&self, image: &Tensor<f64>) -> Result<Vec<f64>> {
        let z = self.presence(image);
        let y = self.intercept
            + z.iter()
                .zip(&self.coefficients)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        Ok(vec![y, 0.0])
    }
}

/// Fits LIME to a black box that is exactly linear in the mask vector and
/// compares the coefficients with the truth.
pub fn surrogate_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let original = Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(0.0..1.0))?;
    let truth: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let black_box = MaskLinear {
        original: original.clone(),
        segments: grid_segments(16, 16, 2)?,
        coefficients: truth.clone(),
        intercept: 0.5,
    };
    let params = LimeParams {
        num_samples: 200,
        top_labels: 2,
        lambda: 1e-6,
        grid_k: 2,
        segmentation: SegmentMethod::Grid,
        seed,
        ..Default::default()
    };
    let ex = explain(&black_box, &original, &params)?
        .into_iter()
        .find(|e| e.target_class == 0)
        .expect("both labels explained");
    let err = ex
        .coefficients
        .iter()
        .zip(&truth)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(SuiteResult {
        name: "LIME surrogate fidelity",
        passed: err <= 1e-3 && ex.r_squared >= 0.999,
        detail: format!(
            "max coefficient error {err:.2e}, weighted R^2 {:.6}",
            ex.r_squared
        ),
    })
}
