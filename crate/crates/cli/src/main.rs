use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qcnn::io::{
    load_mnist_dir, load_model, save_model, train_reference_mlp, Dataset, MnistSplit, TrainConfig,
};
use qcnn::{
    build_report, evaluate, quantize_network, ComplexityReport, DenseTensor, Network, NetworkSpec,
    QuantizationConfig, QuantizationPlan,
};

#[derive(Parser)]
#[command(name = "qcnn", version, about = "Product-quantized CNN toolkit")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense reference MLP on MNIST and save it.
    TrainRef(TrainArgs),
    /// Quantize selected layers of a dense model.
    Quantize(QuantizeArgs),
    /// Report top-1 / top-5 error of one or more models.
    Eval(EvalArgs),
    /// Print FLOPs and storage of a model or architecture.
    Report(ReportArgs),
    /// Classify one image file.
    Infer(InferArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Architecture file (fc layers only).
    #[arg(long, default_value = "archs/mnist-3layer.toml")]
    arch: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f32,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory with the MNIST training split; the first `--calib-n` images calibrate.
    #[arg(long)]
    data_dir: PathBuf,
    /// Overrides such as `fc1=4/32,ec` or `conv*=8/128,ec,fc6=4/32`.
    #[arg(long)]
    layers: String,
    #[arg(long, default_value_t = 1000)]
    calib_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Block-coordinate sweeps per error-corrected layer.
    #[arg(long, default_value_t = 3)]
    ec_sweeps: usize,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    report_format: ReportFormat,
    /// Also write the report to this file.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model file; repeat to compare several.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Model file; its quantized layers form the plan unless `--layers` is given.
    #[arg(long, conflicts_with = "arch", required_unless_present = "arch")]
    model: Option<PathBuf>,
    /// Architecture file; no weights needed.
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    report_format: ReportFormat,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Kv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::TrainRef(a) => cmd_train_ref(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Infer(a) => cmd_infer(a),
    }
}

fn load_split(dir: &Path, split: MnistSplit, input_shape: &[usize]) -> Result<Dataset> {
    let data = load_mnist_dir(dir, split)
        .with_context(|| format!("loading MNIST from {}", dir.display()))?;
    if data.sample_shape() == input_shape {
        return Ok(data);
    }
    Ok(data.reshaped(input_shape.to_vec())?)
}

fn read_model(path: &Path) -> Result<Network> {
    load_model(path).with_context(|| format!("reading model {}", path.display()))
}

fn cmd_train_ref(a: TrainArgs) -> Result<()> {
    let spec =
        NetworkSpec::load(&a.arch).with_context(|| format!("reading {}", a.arch.display()))?;
    let train = load_split(&a.data_dir, MnistSplit::Train, &spec.input_shape)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch,
        seed: a.seed,
    };
    let report = train_reference_mlp(&spec, &train, &cfg)?;
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.5}", i + 1);
    }
    if let Ok(test) = load_split(&a.data_dir, MnistSplit::Test, &spec.input_shape) {
        let m = evaluate(&report.network, &test, &[1, 5])?;
        print_metrics("test", &m);
    }
    save_model(&a.out, &report.network).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn emit_report(report: &ComplexityReport, format: ReportFormat, out: Option<&Path>) -> Result<()> {
    let text = match format {
        ReportFormat::Table => report.to_table(),
        ReportFormat::Kv => report.to_kv(),
    };
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_quantize(a: QuantizeArgs) -> Result<()> {
    let net = read_model(&a.model)?;
    let spec = net.spec();
    let base = QuantizationConfig::new(1, 1)
        .with_seed(a.seed)
        .with_sweeps(a.ec_sweeps);
    let plan = QuantizationPlan::parse(&a.layers, &spec, &base)?;
    if plan.is_empty() {
        bail!("--layers selects no layer");
    }
    // storage accounting rejects bad K before any clustering work
    let report = build_report(&spec, &plan)?;
    if a.calib_n == 0 {
        bail!("--calib-n must be positive");
    }
    let train = load_split(&a.data_dir, MnistSplit::Train, net.input_shape())?;
    let calib: Vec<DenseTensor> = (0..a.calib_n.min(train.len()))
        .map(|i| train.tensor(i))
        .collect();
    let q = quantize_network(&net, &calib, &plan)?;
    for l in &q.layers {
        let method = if l.config.error_correction {
            "ec"
        } else {
            "naive"
        };
        println!(
            "{} {}/{} {method}: objective {}",
            l.name,
            l.config.subspace_dim,
            l.config.codewords,
            sweep_summary(&l.objective_history, l.config.ec_sweeps)
        );
        log::debug!(
            "{} full objective history: {:?}",
            l.name,
            l.objective_history
        );
    }
    emit_report(&report, a.report_format, a.report_out.as_deref())?;
    save_model(&a.out, &q.network).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Initial objective followed by the value after each sweep; the history
/// holds one entry per subspace visit.
fn sweep_summary(history: &[f64], sweeps: usize) -> String {
    let visits = history.len().saturating_sub(1);
    let stride = if sweeps > 0 && visits % sweeps == 0 {
        visits / sweeps
    } else {
        0
    };
    let points: Vec<f64> = if stride == 0 {
        history.to_vec()
    } else {
        history.iter().copied().step_by(stride).collect()
    };
    points
        .iter()
        .map(|v| format!("{v:.6e}"))
        .collect::<Vec<_>>()
        .join(" -> ")
}

fn print_metrics(label: &str, m: &qcnn::EvalMetrics) {
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |e| format!("{:.2}%", 100.0 * e));
    println!(
        "{label}: top-1 error {}  top-5 error {}  ({} samples)",
        pct(m.top1_error()),
        pct(m.top5_error()),
        m.samples
    );
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let split = match a.split {
        Split::Train => MnistSplit::Train,
        Split::Test => MnistSplit::Test,
    };
    for path in &a.model {
        let net = read_model(path)?;
        let mut data = load_split(&a.data_dir, split, net.input_shape())?;
        if let Some(n) = a.limit {
            data = data.take(n);
        }
        let m = evaluate(&net, &data, &[1, 5])?;
        print_metrics(&path.display().to_string(), &m);
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let (spec, default_plan) = match (&a.model, &a.arch) {
        (Some(path), _) => {
            let net = read_model(path)?;
            (net.spec(), QuantizationPlan::from_network(&net))
        }
        (None, Some(path)) => (
            NetworkSpec::load(path).with_context(|| format!("reading {}", path.display()))?,
            QuantizationPlan::new(),
        ),
        (None, None) => bail!("either --model or --arch is required"),
    };
    let plan = match &a.layers {
        Some(text) => QuantizationPlan::parse(text, &spec, &QuantizationConfig::new(1, 1))?,
        None => default_plan,
    };
    let report = build_report(&spec, &plan)?;
    emit_report(&report, a.report_format, a.report_out.as_deref())
}

/// Decodes an image to the network's input: grayscale for one channel or a
/// flat input, RGB for three, resized to the input extent, scaled to [0, 1].
fn image_tensor(path: &Path, input_shape: &[usize]) -> Result<DenseTensor> {
    let img = image::open(path).with_context(|| format!("reading image {}", path.display()))?;
    let (h, w, c) = match *input_shape {
        [n] => {
            let side = (n as f64).sqrt().round() as usize;
            if side * side != n {
                bail!("flat input of {n} values is not a square image");
            }
            (side, side, 1)
        }
        [h, w, c @ (1 | 3)] => (h, w, c),
        _ => bail!("cannot feed an image to input shape {input_shape:?}"),
    };
    let img = img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle);
    let data: Vec<f32> = if c == 1 {
        img.to_luma8().into_raw()
    } else {
        img.to_rgb8().into_raw()
    }
    .into_iter()
    .map(|v| v as f32 / 255.0)
    .collect();
    Ok(DenseTensor::new(input_shape.to_vec(), data)?)
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let net = read_model(&a.model)?;
    let x = image_tensor(&a.image, net.input_shape())?;
    let scores = net.logits(&x)?;
    let label = scores
        .data()
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &s)| {
            if s > best.1 {
                (i, s)
            } else {
                best
            }
        })
        .0;
    println!("{label}");
    Ok(())
}
