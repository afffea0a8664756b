use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use esfr_bench::calibrate::{calibrate, read_preset, write_preset};
use esfr_bench::error::{HarnessError, Result};
use esfr_bench::eval::{evaluate, AdaptMode, EvalConfig};
use esfr_bench::synth::{calibrated_preset, generate_synthetic, SynthSpec};
use esfr_bench::{load_embeddings, run_trace, sample_episode, write_embeddings, ClassPool, EpisodeSpec};
use esfr_core::adapt::{tune_lambda, EmbeddingTap, Mode, StopWeights, LAMBDA_GRID};
use esfr_core::classify::{LinearConfig, RectifyConfig};
use esfr_core::lid::module_lid;
use esfr_core::{seed, EsfrConfig, LidConfig, Method};

#[derive(Parser)]
#[command(name = "esfr", version, about = "Few-shot embedding adaptation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a classifier over sampled episodes and write a JSON report.
    Eval(EvalArgs),
    /// Write reconstruction/LID/probe curves for one episode.
    Trace(TraceArgs),
    /// Print the mean and summed LID of a dataset.
    Lid {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        m: usize,
    },
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Sweep the generator noise scale until baseline NN 1-shot accuracy is mid-range.
    Calibrate(CalibrateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Nn,
    Linear,
    Cspn,
    Bdcspn,
}

impl MethodArg {
    fn method(self) -> Method {
        match self {
            MethodArg::Nn => Method::Nn,
            MethodArg::Linear => Method::Linear(LinearConfig::default()),
            MethodArg::Cspn => Method::Cspn,
            MethodArg::Bdcspn => Method::BdCspn(RectifyConfig::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AdaptArg {
    None,
    Esfr,
    EsfrSemi,
}

#[derive(Clone, Copy, ValueEnum)]
enum StopArg {
    Post,
    Pre,
}

#[derive(Clone, Copy, ValueEnum)]
enum TapArg {
    Output,
    Hidden,
}

#[derive(Args)]
struct EpisodeArgs {
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 15, conflicts_with = "query_profile")]
    query: usize,
    /// Per-class query counts, e.g. 11,13,15,17,19.
    #[arg(long, value_delimiter = ',')]
    query_profile: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EpisodeArgs {
    fn spec(&self, tasks: usize) -> EpisodeSpec {
        let spec = EpisodeSpec::balanced(self.n_way, self.k_shot, self.query, tasks, self.seed);
        match &self.query_profile {
            Some(p) => spec.with_profile(p),
            None => spec,
        }
    }
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long, default_value_t = 5)]
    ensemble: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 20)]
    m: usize,
    /// Adam learning rate of the reconstruction modules.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = StopArg::Post)]
    stop_weights: StopArg,
    #[arg(long, value_enum, default_value_t = TapArg::Output)]
    tap: TapArg,
}

impl AdaptArgs {
    fn config(&self, master_seed: u64, use_shift: bool) -> EsfrConfig {
        EsfrConfig {
            ensemble_size: self.ensemble,
            dropout_rate: self.dropout,
            max_iterations: self.max_iter,
            lr: self.lr,
            lid: LidConfig {
                m: self.m,
                ..LidConfig::default()
            },
            stop_weights: match self.stop_weights {
                StopArg::Post => StopWeights::PostIncrease,
                StopArg::Pre => StopWeights::PreIncrease,
            },
            embedding_tap: match self.tap {
                TapArg::Output => EmbeddingTap::Output,
                TapArg::Hidden => EmbeddingTap::MiddleHidden,
            },
            use_shift,
            master_seed,
            ..EsfrConfig::default()
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Nn)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = AdaptArg::None)]
    adapt: AdaptArg,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[arg(long, default_value_t = 2000)]
    tasks: usize,
    /// Trade-off of the support cross-entropy (esfr-semi).
    #[arg(long)]
    lambda: Option<f64>,
    /// Validation embeddings for choosing lambda from the standard grid.
    #[arg(long, conflicts_with = "lambda")]
    val_data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    val_tasks: usize,
    #[command(flatten)]
    adapt_args: AdaptArgs,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    task_index: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    probe_every: usize,
    /// Classifier used for the probe accuracy column.
    #[arg(long, value_enum, default_value_t = MethodArg::Nn)]
    method: MethodArg,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[command(flatten)]
    adapt_args: AdaptArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML preset written by `calibrate`; explicit flags override it.
    #[arg(long)]
    preset: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    signal_dims: Option<usize>,
    #[arg(long)]
    noise_dims: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Candidate noise scales, tried in order.
    #[arg(long, value_delimiter = ',', default_value = "1.0,1.2,1.4,1.5,1.6,1.8,2.0")]
    noise_scales: Vec<f64>,
}

fn eval(args: EvalArgs) -> Result<()> {
    let data = load_embeddings(&args.data)?;
    let method = args.method.method();
    let adapt = match args.adapt {
        AdaptArg::None => AdaptMode::None,
        AdaptArg::Esfr => AdaptMode::Esfr,
        AdaptArg::EsfrSemi => AdaptMode::EsfrSemi,
    };
    let mut esfr = args.adapt_args.config(args.episode.seed, method.uses_shift());
    if let AdaptMode::EsfrSemi = adapt {
        let lambda = match (args.lambda, &args.val_data) {
            (Some(l), _) => l,
            (None, Some(path)) => choose_lambda(path, &args, &esfr, &method)?,
            (None, None) => return Err(HarnessError::Config("esfr-semi needs --lambda or --val-data".into())),
        };
        esfr.mode = Mode::EsfrSemi { lambda };
    }
    let cfg = EvalConfig {
        episodes: args.episode.spec(args.tasks),
        method,
        adapt,
        esfr,
    };
    let report = evaluate(&data, &cfg)?;
    eprintln!(
        "{} tasks: {:.2} +- {:.2}% ({} failed)",
        report.task_count, report.mean_acc, report.ci95, report.failures
    );
    let json = report.to_json();
    match &args.out {
        Some(path) => std::fs::write(path, json).map_err(|e| HarnessError::io(path, e)),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn choose_lambda(path: &Path, args: &EvalArgs, esfr: &EsfrConfig, method: &Method) -> Result<f64> {
    let data = load_embeddings(path)?;
    let pool = ClassPool::new(&data)?;
    let mut spec = args.episode.spec(args.val_tasks);
    spec.master_seed = seed::derive(args.episode.seed, u64::MAX);
    let episodes = (0..args.val_tasks)
        .map(|i| sample_episode(&pool, &spec, i).map(|s| s.episode))
        .collect::<Result<Vec<_>>>()?;
    let choice = tune_lambda(&episodes, esfr, method, &LAMBDA_GRID)?;
    for (lambda, acc) in &choice.accuracies {
        log::info!("lambda {lambda}: validation accuracy {:.2}%", 100.0 * acc);
    }
    eprintln!("selected lambda {}", choice.lambda);
    Ok(choice.lambda)
}

fn trace(args: TraceArgs) -> Result<()> {
    let data = load_embeddings(&args.data)?;
    let spec = args.episode.spec(args.task_index + 1);
    let cfg = args.adapt_args.config(args.episode.seed, false);
    let (on, off) = run_trace(
        &data,
        &spec,
        &cfg,
        args.task_index,
        &args.method.method(),
        args.probe_every,
        &args.out,
    )?;
    eprintln!("wrote {} and {}", on.display(), off.display());
    Ok(())
}

fn lid(data: &Path, m: usize) -> Result<()> {
    let set = load_embeddings(data)?;
    let summary = module_lid(&set, &LidConfig::new(m)?)?;
    println!("mean {}", summary.mean);
    println!("sum {}", summary.sum);
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let base = match &args.preset {
        Some(path) => read_preset(path)?,
        None => calibrated_preset(0),
    };
    let spec = SynthSpec {
        class_count: args.classes.unwrap_or(base.class_count),
        samples_per_class: args.per_class.unwrap_or(base.samples_per_class),
        signal_dim: args.signal_dims.unwrap_or(base.signal_dim),
        noise_dim: args.noise_dims.unwrap_or(base.noise_dim),
        cluster_spread: args.spread.unwrap_or(base.cluster_spread),
        noise_scale: args.noise_scale.unwrap_or(base.noise_scale),
        seed: args.seed.unwrap_or(base.seed),
    };
    write_embeddings(&args.out, &generate_synthetic(&spec)?)
}

fn run_calibrate(args: CalibrateArgs) -> Result<()> {
    let result = calibrate(&calibrated_preset(args.seed), &args.noise_scales, args.tasks, args.seed)?;
    for p in &result.sweep {
        eprintln!("noise_scale {:<6} NN 1-shot {:.2}%", p.noise_scale, p.nn_acc);
    }
    eprintln!("selected noise_scale {} ({:.2}%)", result.preset.noise_scale, result.nn_acc);
    write_preset(&args.out, &result.preset)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(a) => eval(a),
        Command::Trace(a) => trace(a),
        Command::Lid { data, m } => lid(&data, m),
        Command::Synth(a) => synth(a),
        Command::Calibrate(a) => run_calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
