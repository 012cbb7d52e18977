//! Command-line runner: `run` executes an experiment from a JSON config
//! (with flag overrides), `synth` emits a synthetic embedding CSV.

use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fewshot_hitl::data::{synth_generate, SynthParams};
use fewshot_hitl::experiment::run_experiment;
use fewshot_hitl::{ExperimentConfig, Mechanism};

#[derive(Parser)]
#[command(name = "fewshot-hitl", version, about = "Human-in-the-loop few-shot classification simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config file
    Run(RunArgs),
    /// Generate a synthetic embedding CSV
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Number of classes per episode (N-way)
    #[arg(long)]
    ways: Option<usize>,
    /// Support instances per class (k-shot)
    #[arg(long)]
    shots: Option<usize>,
    /// Query instances per class
    #[arg(long)]
    query: Option<usize>,
    /// Hold-out instances per class
    #[arg(long)]
    holdout: Option<usize>,
    /// Comma-separated mechanism ids (e.g. min_confidence,random,bald)
    #[arg(long, value_delimiter = ',', value_parser = parse_mechanism)]
    mechanisms: Option<Vec<Mechanism>>,
    /// Number of episodes to average over
    #[arg(long)]
    episodes: Option<usize>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Ensemble member count for ensemble base models
    #[arg(long)]
    ensemble_size: Option<usize>,
    /// Ensemble perturbation scale
    #[arg(long)]
    sigma: Option<f64>,
    /// Softmax temperature
    #[arg(long)]
    temperature: Option<f64>,
    /// Accuracy threshold for the budget column
    #[arg(long)]
    threshold: Option<f64>,
    /// Shot count for the accuracy-at-shot column
    #[arg(long)]
    shot_eval: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = auto)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of classes
    #[arg(long)]
    classes: usize,
    /// Instances per class
    #[arg(long)]
    per_class: usize,
    /// Embedding dimension
    #[arg(long)]
    dim: usize,
    /// Scale of the class centers
    #[arg(long, default_value_t = 1.0)]
    center_scale: f64,
    /// Within-class noise
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

fn parse_mechanism(s: &str) -> Result<Mechanism, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read config {}", args.config.display()))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)
        .with_context(|| format!("invalid config {}", args.config.display()))?;

    if let Some(v) = args.ways {
        cfg.ways = v;
    }
    if let Some(v) = args.shots {
        cfg.shots = v;
    }
    if let Some(v) = args.query {
        cfg.query = v;
    }
    if let Some(v) = args.holdout {
        cfg.holdout = v;
    }
    if let Some(v) = args.mechanisms {
        cfg.mechanisms = v;
    }
    if let Some(v) = args.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.ensemble_size {
        cfg.ensemble_size = v;
    }
    if let Some(v) = args.sigma {
        cfg.sigma = Some(v);
    }
    if let Some(v) = args.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = args.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = args.shot_eval {
        cfg.shot_eval = v;
    }
    if let Some(v) = args.out {
        cfg.out_dir = v;
    }
    if let Some(v) = args.workers {
        cfg.workers = v;
    }

    let report = run_experiment(&cfg)?;
    print!("{}", report.summary_text);
    println!();
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let params = SynthParams {
        classes: args.classes,
        per_class: args.per_class,
        dim: args.dim,
        center_scale: args.center_scale,
        class_noise: args.noise,
        seed: args.seed,
    };
    let ds = synth_generate(&params)?;
    let file = fs::File::create(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    ds.write_csv(BufWriter::new(file))?;
    println!(
        "wrote {} instances ({} classes, dim {}) to {}",
        ds.len(),
        args.classes,
        args.dim,
        args.out.display()
    );
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Synth(args) => synth(args),
    }
}
