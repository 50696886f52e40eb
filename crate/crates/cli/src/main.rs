use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;
use umfa::checkpoint::Checkpoint;
use umfa::image_io::{load_image, resize_center, save_image};
use umfa::net::{stylize_image, validate_image_size};
use umfa::{gradcheck, metrics, trainer};
use umfa::{AggregationStrategy, LossNetwork, LossWeights, ModelParams, Tensor, TrainConfig};

#[derive(Parser)]
#[command(name = "umfa", version, about = "Photorealistic style transfer: train, stylize, evaluate, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of images split 50/50 into content and style.
    Train(TrainArgs),
    /// Stylize one content image with one style image.
    Stylize(StylizeArgs),
    /// SSIM(output, content) and Gram loss(output, style).
    Eval(EvalArgs),
    /// Median stylization time per image size.
    Bench(BenchArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
}

fn image_size(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    validate_image_size(v).map_err(|e| e.to_string())?;
    Ok(v)
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("expected a finite value >= 0, got {s}"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("expected a finite value > 0, got {s}"))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint manifest to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    /// Stop after this many steps regardless of epochs.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_steps: Option<u64>,
    #[arg(long, default_value_t = 256, value_parser = image_size)]
    size: usize,
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    lr: f64,
    #[arg(long, default_value_t = 0.8, value_parser = non_negative)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0, value_parser = non_negative)]
    beta: f64,
    #[arg(long, default_value_t = 1.0, value_parser = non_negative)]
    gamma: f64,
    #[arg(long, default_value_t = AggregationStrategy::Mfa)]
    agg: AggregationStrategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    /// Write a checkpoint every N steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Training log; defaults to <out>.log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Loss-network weight manifest; seeded random weights when omitted.
    #[arg(long)]
    loss_weights: Option<PathBuf>,
    /// Base channel width of the network.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    width: u64,
    /// Reorder pairs every epoch.
    #[arg(long)]
    reshuffle: bool,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct StylizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resize both images to SIZE x SIZE first.
    #[arg(long, value_parser = image_size)]
    size: Option<usize>,
    /// Defaults to the strategy the model was trained with.
    #[arg(long)]
    agg: Option<AggregationStrategy>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "dir")]
    content: Option<PathBuf>,
    #[arg(long, required_unless_present = "dir")]
    style: Option<PathBuf>,
    #[arg(long, required_unless_present = "dir")]
    output: Option<PathBuf>,
    /// Evaluate every <name>_content/_style/_output triple in DIR.
    #[arg(long, conflicts_with_all = ["content", "style", "output"])]
    dir: Option<PathBuf>,
    #[arg(long)]
    loss_weights: Option<PathBuf>,
    /// Seed of the random loss network when no weights are given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint to time; a freshly initialised network when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024", value_parser = image_size)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    runs: u64,
    #[arg(long, default_value_t = umfa::net::DEFAULT_WIDTH)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = AggregationStrategy::Mfa)]
    agg: AggregationStrategy,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn loss_network(weights: &Option<PathBuf>, seed: u64) -> umfa::Result<LossNetwork> {
    match weights {
        Some(m) => LossNetwork::load_weights(m),
        None => Ok(LossNetwork::seeded(seed)),
    }
}

fn train(a: TrainArgs) -> umfa::Result<()> {
    let config = TrainConfig {
        data_dir: a.data,
        out: a.out,
        epochs: a.epochs as usize,
        max_steps: a.max_steps.map(|s| s as usize),
        image_size: a.size,
        lr: a.lr,
        weights: LossWeights::new(a.alpha, a.beta, a.gamma)?,
        strategy: a.agg,
        seed: a.seed,
        batch_size: a.batch_size as usize,
        checkpoint_every: a.checkpoint_every,
        log_path: a.log,
        width: a.width as usize,
        loss_weights: a.loss_weights,
        reshuffle: a.reshuffle,
    };
    info!("train {}", serde_json::to_string(&config)?);
    let outcome = match &a.resume {
        Some(path) => trainer::resume(&config, Checkpoint::load(path)?)?,
        None => trainer::train(&config)?,
    };
    let last = outcome.reports.last();
    println!(
        "{}",
        json!({
            "checkpoint": config.out,
            "log": config.log_file(),
            "steps": outcome.checkpoint.step,
            "final_total": last.map(|r| r.total),
            "skipped": outcome.skipped,
        })
    );
    Ok(())
}

fn prepare(path: &Path, size: Option<usize>) -> umfa::Result<Tensor> {
    let t = load_image(path)?;
    match size {
        Some(s) => resize_center(&t, s),
        None => {
            let s = t.shape();
            validate_image_size(s.h)?;
            validate_image_size(s.w)?;
            Ok(t)
        }
    }
}

fn stylize(a: StylizeArgs) -> umfa::Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let strategy = a.agg.unwrap_or(ck.config.strategy);
    info!(
        "stylize {}",
        json!({"model": a.model, "content": a.content, "style": a.style, "out": a.out, "size": a.size, "agg": strategy})
    );
    let content = prepare(&a.content, a.size)?;
    let style = prepare(&a.style, a.size)?;
    let out = stylize_image(&ck.params, &content, &style, strategy)?;
    save_image(&out, &a.out)
}

fn eval(a: EvalArgs) -> umfa::Result<()> {
    info!(
        "eval {}",
        json!({"content": a.content, "style": a.style, "output": a.output, "dir": a.dir, "loss_weights": a.loss_weights, "seed": a.seed})
    );
    let phi = loss_network(&a.loss_weights, a.seed)?;
    if let Some(dir) = &a.dir {
        let report = metrics::evaluate_dir(dir, &phi)?;
        for (name, r) in &report.triples {
            println!("{}", json!({"name": name, "ssim": r.ssim, "gram_loss": r.gram_loss}));
        }
        println!("{}", serde_json::to_string(&report.mean)?);
        return Ok(());
    }
    let (Some(c), Some(s), Some(o)) = (&a.content, &a.style, &a.output) else {
        unreachable!("clap requires all three without --dir")
    };
    let report = metrics::evaluate(&load_image(c)?, &load_image(s)?, &load_image(o)?, &phi)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn bench(a: BenchArgs) -> umfa::Result<()> {
    info!(
        "bench {}",
        json!({"model": a.model, "sizes": a.sizes, "runs": a.runs, "width": a.width, "seed": a.seed, "agg": a.agg})
    );
    let params = match &a.model {
        Some(m) => Checkpoint::load(m)?.params,
        None => ModelParams::init(a.width, a.seed),
    };
    let rows = metrics::bench(&params, &a.sizes, a.runs as usize, a.agg)?;
    print!("{}", metrics::bench_table(&rows));
    for r in &rows {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> umfa::Result<bool> {
    info!("gradcheck {}", json!({"seed": a.seed}));
    let results = gradcheck::full_suite(a.seed)?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "{} {:<34} checked {:>4}  kinks {:>3}  max error {:.3e}  {:.1}s",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.checked,
            r.kinks,
            r.max_error,
            r.seconds
        );
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Stylize(a) => stylize(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Bench(a) => bench(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
