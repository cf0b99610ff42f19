//! Per-image explanation timing across models and methods.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::gradcam::{grad_cam, GradCamParams};
use crate::ig::{integrated_gradients, IgParams};
use crate::lime::{explain, LimeParams};
use crate::nn::ModelGraph;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    GradCam,
    Ig,
    Lime,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::GradCam, Method::Ig, Method::Lime];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GradCam => "gradcam",
            Method::Ig => "ig",
            Method::Lime => "lime",
        }
    }

    fn column(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s || (s == "grad-cam" && *m == Method::GradCam))
            .ok_or_else(|| {
                Error::invalid(format!("unknown method {s:?} (valid: gradcam, ig, lime)"))
            })
    }
}

/// Parses a comma-separated method list; an empty list is an error.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let methods = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Method>>>()?;
    if methods.is_empty() {
        return Err(Error::invalid(
            "no methods requested (valid: gradcam, ig, lime)",
        ));
    }
    Ok(methods)
}

/// Settings shared by every timed explanation. IG and LIME always run
/// single-threaded here, whatever their `parallel` flag says.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig<T: Scalar = f64> {
    pub gradcam: GradCamParams,
    pub ig: IgParams<T>,
    pub lime: LimeParams,
    /// Untimed runs per (model, method) before measuring.
    pub warmup: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for BenchConfig<T> {
    fn default() -> Self {
        BenchConfig {
            gradcam: GradCamParams::default(),
            ig: IgParams::default(),
            lime: LimeParams::default(),
            warmup: 1,
            seed: 0,
        }
    }
}

impl<T: Scalar> BenchConfig<T> {
    fn describe(&self, method: Method) -> String {
        match method {
            Method::GradCam => match self.gradcam.layer {
                Some(l) => format!("layer={l}"),
                None => "layer=last_conv".into(),
            },
            Method::Ig => format!("steps={}", self.ig.steps),
            Method::Lime => format!(
                "num_samples={} top_labels={} grid_k={}",
                self.lime.num_samples, self.lime.top_labels, self.lime.grid_k
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub model: String,
    pub method: Method,
    pub image_id: usize,
    pub seconds: f64,
    pub params: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub model: String,
    /// `(mean seconds, sample count)` indexed by method; `None` when the
    /// method was not requested.
    pub cells: [Option<(f64, usize)>; 3],
}

impl SummaryRow {
    pub fn mean(&self, method: Method) -> Option<f64> {
        self.cells[method.column()].map(|(m, _)| m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub summary: Vec<SummaryRow>,
    pub note: String,
}

impl BenchReport {
    pub fn mean(&self, model: &str, method: Method) -> Option<f64> {
        self.summary.iter().find(|r| r.model == model)?.mean(method)
    }

    pub fn records_csv(&self) -> String {
        let mut out = String::from("model,method,image_id,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.model, r.method, r.image_id, r.seconds
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("model,gradcam_mean_s,ig_mean_s,lime_mean_s\n");
        for row in &self.summary {
            let cells: Vec<String> = row
                .cells
                .iter()
                .map(|c| c.map(|(m, _)| m.to_string()).unwrap_or_default())
                .collect();
            out.push_str(&format!("{},{}\n", row.model, cells.join(",")));
        }
        out
    }
}

fn run_once<T: Scalar>(
    model: &ModelGraph<T>,
    method: Method,
    image: &Tensor<T>,
    config: &BenchConfig<T>,
) -> Result<()> {
    match method {
        Method::GradCam => grad_cam(model, image, &config.gradcam).map(drop),
        Method::Ig => integrated_gradients(model, image, &config.ig).map(drop),
        Method::Lime => explain(model, image, &config.lime).map(drop),
    }
}

/// Times every (model, method, image) triple. Only the explanation call is
/// inside the timer.
pub fn bench<T: Scalar>(
    models: &[ModelGraph<T>],
    methods: &[Method],
    images: &[Tensor<T>],
    config: &BenchConfig<T>,
) -> Result<BenchReport> {
    if models.is_empty() {
        return Err(Error::invalid(
            "no models requested (valid: minivgg, miniresnet)",
        ));
    }
    if methods.is_empty() {
        return Err(Error::invalid(
            "no methods requested (valid: gradcam, ig, lime)",
        ));
    }
    if images.is_empty() {
        return Err(Error::invalid("bench needs at least one image"));
    }
    let mut config = config.clone();
    config.ig.parallel = false;
    config.lime.parallel = false;
    config.lime.seed = config.seed;

    let mut records = Vec::new();
    let mut summary = Vec::new();
    for model in models {
        let mut cells = [None; 3];
        for &method in methods {
            for _ in 0..config.warmup {
                run_once(model, method, &images[0], &config)?;
            }
            let mut total = 0.0;
            for (image_id, image) in images.iter().enumerate() {
                let start = Instant::now();
                run_once(model, method, image, &config)?;
                // Clamp to one clock tick so a record is never zero.
                let seconds = start.elapsed().as_secs_f64().max(1e-9);
                total += seconds;
                records.push(BenchRecord {
                    model: model.name().to_owned(),
                    method,
                    image_id,
                    seconds,
                    params: config.describe(method),
                });
            }
            cells[method.column()] = Some((total / images.len() as f64, images.len()));
        }
        summary.push(SummaryRow {
            model: model.name().to_owned(),
            cells,
        });
    }
    Ok(BenchReport {
        records,
        summary,
        note: "single-threaded measurement; I/O and model load excluded".into(),
    })
}
