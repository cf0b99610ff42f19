use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use attrib_core::bench::{bench, parse_methods, BenchConfig, Method};
use attrib_core::data::{
    load_dataset, load_image, split_indices, synth_dataset, DEFAULT_INPUT_SIZE, DEFAULT_SPLIT,
};
use attrib_core::gradcam::GradCamParams;
use attrib_core::ig::{Baseline, IgParams, RiemannRule, DEFAULT_STEPS};
use attrib_core::lime::{
    KernelDistance, LimeParams, SegmentMethod, DEFAULT_GRID_K, DEFAULT_LAMBDA, DEFAULT_NUM_SAMPLES,
    DEFAULT_SIGMA, DEFAULT_TOP_LABELS,
};
use attrib_core::nn::{evaluate, load_model, save_model, train, Dataset, TrainConfig};
use attrib_core::pipeline::{explain_image, ExplainConfig, DEFAULT_ISOLATE_FEATURES};
use attrib_core::verify::{completeness_suite, gradient_suite, surrogate_suite};
use attrib_core::viz::{write_image, ImageFormat, DEFAULT_ALPHA};
use attrib_core::{Architecture, ModelGraph, Precision, Scalar, Tensor};

mod config;

// Output goes through these so a closed pipe (`attrib ... | head`) is not a panic.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}
macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

use config::Config;

#[derive(Parser)]
#[command(
    name = "attrib",
    version,
    about = "Grad-CAM, Integrated Gradients and LIME for small CNNs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the planted-patch dataset as root/<class>/*.ppm
    Synth(SynthArgs),
    /// Train a mini model and save its weights
    Train(TrainArgs),
    /// Explain one image with one method and write the rendered artifacts
    Explain(ExplainArgs),
    /// Time every (model, method, image) explanation single-threaded
    Bench(BenchArgs),
    /// Run the gradient, completeness and surrogate self-checks
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, env = "ATTRIB_SEED")]
    seed: Option<u64>,
    /// key = value file; flags and environment variables take precedence
    #[arg(long, env = "ATTRIB_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "ATTRIB_OUT")]
    out: Option<PathBuf>,
    /// Square input edge in pixels (64 by default, 224 for compatibility runs)
    #[arg(long, env = "ATTRIB_INPUT_SIZE")]
    input_size: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, env = "ATTRIB_N_PER_CLASS")]
    n_per_class: Option<usize>,
    #[arg(long, env = "ATTRIB_CLASSES")]
    classes: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// minivgg or miniresnet
    #[arg(long, env = "ATTRIB_MODEL")]
    model: Option<String>,
    /// Output model file (default: <out>/<model>.attrib)
    #[arg(long, env = "ATTRIB_WEIGHTS")]
    weights: Option<PathBuf>,
    /// Dataset root laid out as <class>/*.{ppm,png}; synthetic data if absent
    #[arg(long, env = "ATTRIB_DATA")]
    data: Option<PathBuf>,
    #[arg(long, env = "ATTRIB_N_PER_CLASS")]
    n_per_class: Option<usize>,
    #[arg(long, env = "ATTRIB_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "ATTRIB_LEARNING_RATE")]
    learning_rate: Option<f64>,
    #[arg(long, env = "ATTRIB_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "ATTRIB_SPLIT")]
    split: Option<f64>,
}

#[derive(Args)]
struct MethodOpts {
    /// IG interpolation steps
    #[arg(long, env = "ATTRIB_STEPS")]
    steps: Option<usize>,
    /// IG baseline: zeros, gray or mean
    #[arg(long, env = "ATTRIB_BASELINE")]
    baseline: Option<String>,
    /// IG Riemann rule: midpoint or right
    #[arg(long, env = "ATTRIB_RULE")]
    rule: Option<String>,
    #[arg(long, env = "ATTRIB_NUM_SAMPLES")]
    num_samples: Option<usize>,
    #[arg(long, env = "ATTRIB_TOP_LABELS")]
    top_labels: Option<usize>,
    /// LIME segments per side
    #[arg(long, env = "ATTRIB_GRID_K")]
    grid_k: Option<usize>,
    /// LIME segmentation: grid or slic
    #[arg(long, env = "ATTRIB_SEGMENTATION")]
    segmentation: Option<String>,
    /// LIME kernel distance: cosine (on masks) or pixel (RMS over pixels)
    #[arg(long, env = "ATTRIB_DISTANCE")]
    distance: Option<String>,
    /// LIME kernel width
    #[arg(long, env = "ATTRIB_SIGMA")]
    sigma: Option<f64>,
    /// LIME ridge penalty
    #[arg(long, env = "ATTRIB_LAMBDA")]
    lambda: Option<f64>,
    /// Grad-CAM conv layer index (default: last conv)
    #[arg(long, env = "ATTRIB_LAYER")]
    layer: Option<usize>,
    /// Class to explain (default: top prediction)
    #[arg(long, env = "ATTRIB_TARGET")]
    target: Option<usize>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    opts: MethodOpts,
    /// gradcam, ig or lime
    #[arg(long, env = "ATTRIB_METHOD")]
    method: Option<String>,
    /// Model file written by `train`
    #[arg(long, env = "ATTRIB_WEIGHTS")]
    weights: Option<PathBuf>,
    /// Untrained architecture to use when no weights are given
    #[arg(long, env = "ATTRIB_MODEL")]
    model: Option<String>,
    /// Image to explain (.ppm or .png); a synthetic image if absent
    #[arg(long, env = "ATTRIB_IMAGE")]
    image: Option<PathBuf>,
    /// Overlay strength
    #[arg(long, env = "ATTRIB_ALPHA")]
    alpha: Option<f64>,
    /// Segments kept in the LIME isolation image
    #[arg(long, env = "ATTRIB_NUM_FEATURES")]
    num_features: Option<usize>,
    /// png or ppm
    #[arg(long, env = "ATTRIB_FORMAT")]
    format: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    opts: MethodOpts,
    /// Comma-separated architectures
    #[arg(long, env = "ATTRIB_MODELS")]
    models: Option<String>,
    /// Comma-separated methods
    #[arg(long, env = "ATTRIB_METHODS")]
    methods: Option<String>,
    /// Number of synthetic test images
    #[arg(long, env = "ATTRIB_IMAGES")]
    images: Option<usize>,
    #[arg(long, env = "ATTRIB_WARMUP")]
    warmup: Option<usize>,
    /// Dataset root to draw images from instead of synthetic data
    #[arg(long, env = "ATTRIB_DATA")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Model for the completeness check; a MiniVGG is trained if absent
    #[arg(long, env = "ATTRIB_WEIGHTS")]
    weights: Option<PathBuf>,
    #[arg(long, env = "ATTRIB_N_PER_CLASS")]
    n_per_class: Option<usize>,
    /// Held-out images for the completeness check
    #[arg(long, env = "ATTRIB_IMAGES")]
    images: Option<usize>,
    #[arg(long, env = "ATTRIB_STEPS")]
    steps: Option<usize>,
}

struct Resolved {
    seed: u64,
    out: PathBuf,
    input_size: usize,
    cfg: Config,
}

fn resolve_common(common: &Common, default_out: &str) -> Result<Resolved> {
    let cfg = Config::load(common.config.as_deref())?;
    Ok(Resolved {
        seed: cfg.resolve(common.seed, "seed", 0)?,
        out: cfg.resolve(common.out.clone(), "out", PathBuf::from(default_out))?,
        input_size: cfg.resolve(common.input_size, "input-size", DEFAULT_INPUT_SIZE)?,
        cfg,
    })
}

fn method_params<T: Scalar>(
    opts: &MethodOpts,
    r: &Resolved,
) -> Result<(GradCamParams, IgParams<T>, LimeParams)> {
    let cfg = &r.cfg;
    let target = cfg.resolve_opt(opts.target, "target")?;
    let gradcam = GradCamParams {
        target_class: target,
        layer: cfg.resolve_opt(opts.layer, "layer")?,
    };
    let baseline: String = cfg.resolve(opts.baseline.clone(), "baseline", "zeros".into())?;
    let rule: String = cfg.resolve(opts.rule.clone(), "rule", "midpoint".into())?;
    let ig = IgParams {
        steps: cfg.resolve(opts.steps, "steps", DEFAULT_STEPS)?,
        rule: RiemannRule::parse(&rule)?,
        baseline: Baseline::parse(&baseline)?,
        target_class: target,
        parallel: true,
    };
    let segmentation = match cfg
        .resolve(opts.segmentation.clone(), "segmentation", "grid".into())?
        .as_str()
    {
        "grid" => SegmentMethod::Grid,
        "slic" => SegmentMethod::slic(),
        other => bail!("unknown segmentation {other:?} (valid: grid, slic)"),
    };
    let distance = match cfg
        .resolve(opts.distance.clone(), "distance", "cosine".into())?
        .as_str()
    {
        "cosine" => KernelDistance::Cosine,
        "pixel" => KernelDistance::Pixel,
        other => bail!("unknown distance {other:?} (valid: cosine, pixel)"),
    };
    let lime = LimeParams {
        num_samples: cfg.resolve(opts.num_samples, "num-samples", DEFAULT_NUM_SAMPLES)?,
        top_labels: cfg.resolve(opts.top_labels, "top-labels", DEFAULT_TOP_LABELS)?,
        seed: r.seed,
        sigma: cfg.resolve(opts.sigma, "sigma", DEFAULT_SIGMA)?,
        lambda: cfg.resolve(opts.lambda, "lambda", DEFAULT_LAMBDA)?,
        grid_k: cfg.resolve(opts.grid_k, "grid-k", DEFAULT_GRID_K)?,
        segmentation,
        distance,
        ..Default::default()
    };
    Ok((gradcam, ig, lime))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth_cmd(args: &SynthArgs) -> Result<()> {
    let r = resolve_common(&args.common, "synth-data")?;
    let n = r.cfg.resolve(args.n_per_class, "n-per-class", 50)?;
    let classes = r.cfg.resolve(args.classes, "classes", 3)?;
    let d = synth_dataset::<f64>(n, classes, r.input_size, r.seed)?;
    d.save(&r.out)?;
    outln!(
        "wrote {} images in {} classes to {}",
        d.data.len(),
        classes,
        r.out.display()
    );
    Ok(())
}

/// Synthetic train/test split used when no dataset directory is given.
fn synthetic_split<T: Scalar>(
    n_per_class: usize,
    size: usize,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let d = synth_dataset::<T>(n_per_class, 3, size, seed)?;
    let (train_idx, test_idx) = split_indices(&d.data.labels, 3, DEFAULT_SPLIT, seed)?;
    Ok((d.data.subset(&train_idx), d.data.subset(&test_idx)))
}

/// Synthetic images at `size`, drawn at 24 px or more and resized down when
/// the model is smaller than the generator allows.
fn synth_images<T: Scalar>(count: usize, size: usize, seed: u64) -> Result<Vec<Tensor<T>>> {
    let d = synth_dataset::<T>(count.div_ceil(3).max(1), 3, size.max(24), seed)?;
    let images = d.data.images.into_iter().take(count.max(1));
    if size >= 24 {
        return Ok(images.collect());
    }
    Ok(images
        .map(|x| x.bilinear_resize(size, size))
        .collect::<attrib_core::Result<Vec<_>>>()?)
}

fn train_cmd<T: Scalar>(args: &TrainArgs) -> Result<()> {
    let r = resolve_common(&args.common, ".")?;
    let cfg = &r.cfg;
    let arch: Architecture = cfg
        .resolve(args.model.clone(), "model", "minivgg".into())?
        .parse::<Architecture>()?;
    let split = cfg.resolve(args.split, "split", DEFAULT_SPLIT)?;
    let (train_set, test_set) = match cfg.resolve_opt(args.data.clone(), "data")? {
        Some(root) => {
            let d = load_dataset::<T>(&root, r.input_size, split, r.seed)?;
            (d.train, d.test)
        }
        None => synthetic_split(
            cfg.resolve(args.n_per_class, "n-per-class", 300)?,
            r.input_size,
            r.seed,
        )?,
    };
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        epochs: cfg.resolve(args.epochs, "epochs", defaults.epochs)?,
        learning_rate: cfg.resolve(args.learning_rate, "learning-rate", defaults.learning_rate)?,
        batch_size: cfg.resolve(args.batch_size, "batch-size", defaults.batch_size)?,
        seed: r.seed,
    };
    let model = arch.build::<T>(r.input_size, train_set.class_names.len(), r.seed)?;
    let model = ModelGraph::new(
        model.name().to_string(),
        model.input_shape(),
        train_set.class_names.clone(),
        model.layers().to_vec(),
        model.params().to_vec(),
    )?;
    let (model, history) = train(&model, &train_set, &config)?;
    for m in &history {
        outln!(
            "epoch {}: loss {:.4}, train accuracy {:.4}",
            m.epoch,
            m.loss,
            m.accuracy
        );
    }
    if !test_set.is_empty() {
        outln!(
            "held-out accuracy {:.4} on {} images",
            evaluate(&model, &test_set)?,
            test_set.len()
        );
    }
    let path = match cfg.resolve_opt(args.weights.clone(), "weights")? {
        Some(p) => p,
        None => {
            create_dir(&r.out)?;
            r.out.join(format!("{arch}.attrib"))
        }
    };
    save_model(&model, &path)?;
    outln!(
        "saved {} ({}) to {}",
        arch,
        T::PRECISION.as_str(),
        path.display()
    );
    Ok(())
}

fn explain_cmd<T: Scalar>(args: &ExplainArgs) -> Result<()> {
    let r = resolve_common(&args.common, "explain-out")?;
    let cfg = &r.cfg;
    let method: Method = cfg
        .resolve(args.method.clone(), "method", "gradcam".into())?
        .parse::<Method>()?;
    let model: ModelGraph<T> = match cfg.resolve_opt(args.weights.clone(), "weights")? {
        Some(path) => load_model(&path)?,
        None => match cfg.resolve_opt(args.model.clone(), "model")? {
            Some(name) => name
                .parse::<Architecture>()?
                .build(r.input_size, 3, r.seed)?,
            None => bail!("explain needs --weights PATH or --model NAME"),
        },
    };
    let [_, h, w] = model.input_shape();
    if h != w {
        bail!("model input {h}x{w} is not square");
    }
    let image: Tensor<T> = match cfg.resolve_opt(args.image.clone(), "image")? {
        Some(path) => load_image(&path, h)?,
        None => synth_images::<T>(1, h, r.seed)?.remove(0),
    };
    let (gradcam, ig, lime) = method_params::<T>(&args.opts, &r)?;
    let config = ExplainConfig {
        method,
        gradcam,
        ig,
        lime,
        alpha: cfg.resolve(args.alpha, "alpha", DEFAULT_ALPHA)?,
        isolate_features: cfg.resolve(
            args.num_features,
            "num-features",
            DEFAULT_ISOLATE_FEATURES,
        )?,
    };
    let format = cfg.resolve(args.format.clone(), "format", "png".into())?;
    let ext = match format.as_str() {
        "png" => "png",
        "ppm" => "ppm",
        other => bail!("unknown format {other:?} (valid: png, ppm)"),
    };
    let output = explain_image(&model, &image, &config)?;
    create_dir(&r.out)?;
    for a in &output.artifacts {
        let path = r.out.join(format!("{}.{ext}", a.name));
        ImageFormat::from_path(&path)?;
        write_image(&a.image, &path)?;
    }
    let mut summary = output.summary.join("\n");
    summary.push('\n');
    std::fs::write(r.out.join("summary.txt"), &summary).context("writing summary.txt")?;
    out!("{summary}");
    outln!(
        "wrote {} images to {}",
        output.artifacts.len(),
        r.out.display()
    );
    Ok(())
}

fn bench_cmd<T: Scalar>(args: &BenchArgs) -> Result<()> {
    let r = resolve_common(&args.common, "bench-out")?;
    let cfg = &r.cfg;
    let models = cfg
        .resolve(args.models.clone(), "models", "minivgg,miniresnet".into())?
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            Ok(s.parse::<Architecture>()?
                .build::<T>(r.input_size, 3, r.seed)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let methods =
        parse_methods(&cfg.resolve(args.methods.clone(), "methods", "gradcam,ig,lime".into())?)?;
    let count = cfg.resolve(args.images, "images", 20)?;
    let images: Vec<Tensor<T>> = match cfg.resolve_opt(args.data.clone(), "data")? {
        Some(root) => {
            load_dataset::<T>(&root, r.input_size, DEFAULT_SPLIT, r.seed)?
                .test
                .images
        }
        None => synth_images(count, r.input_size, r.seed)?,
    };
    let images = &images[..count.min(images.len())];
    let (gradcam, ig, lime) = method_params::<T>(&args.opts, &r)?;
    let config = BenchConfig {
        gradcam,
        ig,
        lime,
        warmup: cfg.resolve(args.warmup, "warmup", 1)?,
        seed: r.seed,
    };
    let report = bench(&models, &methods, images, &config)?;
    create_dir(&r.out)?;
    std::fs::write(r.out.join("bench.csv"), report.records_csv()).context("writing bench.csv")?;
    std::fs::write(r.out.join("bench_summary.csv"), report.summary_csv())
        .context("writing bench_summary.csv")?;
    out!("{}", report.summary_csv());
    outln!(
        "{} over {} images; written to {}",
        report.note,
        images.len(),
        r.out.display()
    );
    Ok(())
}

fn verify_cmd(args: &VerifyArgs) -> Result<bool> {
    let r = resolve_common(&args.common, ".")?;
    let cfg = &r.cfg;
    let steps = cfg.resolve(args.steps, "steps", DEFAULT_STEPS)?;
    let count = cfg.resolve(args.images, "images", 20)?;
    let mut suites = vec![
        gradient_suite(r.seed..r.seed + 10)?,
        surrogate_suite(r.seed)?,
    ];

    let model: ModelGraph<f64> = match cfg.resolve_opt(args.weights.clone(), "weights")? {
        Some(path) => load_model(&path)?,
        None => {
            let n = cfg.resolve(args.n_per_class, "n-per-class", 300)?;
            let (train_set, _) = synthetic_split::<f64>(n, r.input_size, r.seed)?;
            let m = Architecture::MiniVgg.build(r.input_size, 3, r.seed)?;
            train(
                &m,
                &train_set,
                &TrainConfig {
                    seed: r.seed,
                    ..Default::default()
                },
            )?
            .0
        }
    };
    let [_, h, _] = model.input_shape();
    // Held-out images drawn with a different seed from the training data.
    let images = synth_images::<f64>(count, h, r.seed.wrapping_add(1))?;
    suites.push(completeness_suite(&model, &images, steps)?);

    for s in &suites {
        outln!("{s}");
    }
    Ok(suites.iter().all(|s| s.passed))
}

fn run(cli: Cli) -> Result<bool> {
    let precision = Precision::from_env()?;
    macro_rules! dispatch {
        ($f:ident, $a:expr) => {
            match precision {
                Precision::F32 => $f::<f32>($a),
                Precision::F64 => $f::<f64>($a),
            }
        };
    }
    match &cli.command {
        Command::Synth(a) => synth_cmd(a).map(|_| true),
        Command::Train(a) => dispatch!(train_cmd, a).map(|_| true),
        Command::Explain(a) => dispatch!(explain_cmd, a).map(|_| true),
        Command::Bench(a) => dispatch!(bench_cmd, a).map(|_| true),
        Command::Verify(a) => verify_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: verification failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
