use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use multispike::backward::Ablation;
use multispike::checkpoint;
use multispike::checks::{gradcheck_suite, oracle_suite, residual_suite};
use multispike::config::RunConfig;
use multispike::mnist::Split;
use multispike::optim::InitSpread;
use multispike::train::{EncodedSet, EpochMetrics, EvalMetrics, Trainer};
use multispike::Error;

/// Exit codes, stable for scripting.
mod code {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const DATA: u8 = 4;
    pub const CHECKPOINT: u8 = 5;
    pub const CHECK_FAILED: u8 = 6;
}

#[derive(Parser)]
#[command(name = "multispike", version, about = "Train and validate multi-spike LIF networks on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes metrics.csv, config.toml and checkpoint.bin to the output directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint instead of initialising fresh weights.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints accuracy and writes a spike-count histogram.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Histogram CSV path (default: next to the checkpoint).
        #[arg(long)]
        hist: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Train and evaluate once per (tau, seed); writes sweep.csv.
    SweepTau {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.4, 0.8, 1.6, 3.2])]
        taus: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Backward gradients against central finite differences on random tiny networks.
    Gradcheck(CheckArgs),
    /// Closed-form spike times against the ODE oracle, plus root residuals.
    OracleCheck(CheckArgs),
    /// Write the per-neuron spike-count histogram of a checkpoint.
    SpikeHist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    cases: usize,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Configuration file plus per-field overrides.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Layer sizes, e.g. 784,400,10.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    tau_i: Option<f64>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    t_out: Option<f64>,
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    dead_fraction: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long)]
    single_spike: bool,
    #[arg(long, value_enum)]
    init_spread: Option<SpreadArg>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpreadArg {
    StdDev,
    Variance,
}

macro_rules! apply {
    ($cfg:ident, $args:ident, $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(|e| CliError::new(code::CONFIG, anyhow!(e)))?,
            None => RunConfig::default(),
        };
        apply!(
            cfg, self, sizes, tau_i, p, t_out, t_min, lambda, sigma, dead_fraction, lr, epochs, batch_size, seed, n1, n2,
            train_samples, test_samples, eval_every, workers, data_dir, out_dir
        );
        if self.single_spike {
            cfg.single_spike = true;
        }
        if let Some(s) = self.init_spread {
            cfg.init_spread = match s {
                SpreadArg::StdDev => InitSpread::StdDev,
                SpreadArg::Variance => InitSpread::Variance,
            };
        }
        cfg.validate().map_err(|e| CliError::new(code::CONFIG, anyhow!(e)))?;
        Ok(cfg)
    }
}

#[derive(Debug)]
struct CliError {
    code: u8,
    source: anyhow::Error,
}

impl CliError {
    fn new(code: u8, source: anyhow::Error) -> Self {
        Self { code, source }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidParams(_) => code::CONFIG,
            Error::Io(_) | Error::BadMagic { .. } | Error::Truncated { .. } | Error::BadDimensions(_) => code::DATA,
            Error::Checkpoint(_) | Error::CheckpointVersion { .. } => code::CHECKPOINT,
            _ => code::OTHER,
        };
        Self::new(code, anyhow!(e))
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::new(code::OTHER, e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Train { run, resume } => {
            let cfg = run.resolve()?;
            with_pool(cfg.workers, || cmd_train(cfg, resume.as_deref()))
        }
        Command::Eval { checkpoint, split, hist, data_dir } => {
            let hist = hist.unwrap_or_else(|| checkpoint.with_file_name("spike_hist.csv"));
            cmd_eval(&checkpoint, split.into(), data_dir, Some(&hist))
        }
        Command::SpikeHist { checkpoint, split, out, data_dir } => cmd_eval(&checkpoint, split.into(), data_dir, Some(&out)),
        Command::SweepTau { run, taus, seeds } => {
            let cfg = run.resolve()?;
            with_pool(cfg.workers, || cmd_sweep(cfg, &taus, &seeds))
        }
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::OracleCheck(args) => cmd_oracle_check(&args),
    }
}

fn with_pool(workers: usize, f: impl FnOnce() -> CliResult + Send) -> CliResult {
    if workers == 0 {
        return f();
    }
    let pool = rayon_pool(workers)?;
    pool.install(f)
}

fn rayon_pool(workers: usize) -> CliResult<multispike::train::ThreadPool> {
    multispike::train::thread_pool(workers).map_err(|e| CliError::new(code::CONFIG, anyhow!(e)))
}

const METRICS_HEADER: &str =
    "epoch,train_loss,train_accuracy,train_mean_spikes,train_dead_fraction,test_accuracy,test_mean_spikes,test_dead_fraction,truncations,clipped";

fn metrics_row(m: &EpochMetrics, eval: Option<&EvalMetrics>) -> String {
    let (acc, spk, dead) = match eval {
        Some(e) => (e.accuracy.to_string(), e.mean_spikes.to_string(), e.dead_fraction.to_string()),
        None => (String::new(), String::new(), String::new()),
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        m.epoch, m.loss, m.accuracy, m.mean_spikes, m.dead_fraction, acc, spk, dead, m.truncations, m.clipped
    )
}

fn load_data(cfg: &RunConfig, split: Split) -> CliResult<EncodedSet> {
    EncodedSet::load(cfg, split).map_err(|e| {
        let code = if matches!(e, Error::Config(_)) { code::CONFIG } else { code::DATA };
        CliError::new(code, anyhow!(e).context(format!("loading MNIST from {}", cfg.data_dir.display())))
    })
}

fn cmd_train(cfg: RunConfig, resume: Option<&Path>) -> CliResult {
    let out_dir = cfg.out_dir.clone();
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut trainer = match resume {
        Some(path) => {
            let t = checkpoint::load(path)?;
            let mut restored = t.config.clone();
            restored.epochs = cfg.epochs;
            restored.out_dir = cfg.out_dir.clone();
            restored.data_dir = cfg.data_dir.clone();
            restored.workers = cfg.workers;
            Trainer::from_parts(restored, t.net, Some(t.adam), t.epoch, t.rng)?
        }
        None => Trainer::new(cfg)?,
    };
    let cfg = trainer.config.clone();
    info!("weight init: mean 0.03, std {} ({:?})", cfg.init_spread.std_dev(), cfg.init_spread);
    let train = load_data(&cfg, Split::Train)?;
    let test = load_data(&cfg, Split::Test)?;
    info!("{} training / {} test samples", train.len(), test.len());
    cfg.save(&out_dir.join("config.toml"))?;

    let metrics_path = out_dir.join("metrics.csv");
    let mut csv = if resume.is_some() && metrics_path.exists() {
        fs::read_to_string(&metrics_path).context("reading existing metrics")?
    } else {
        format!("{METRICS_HEADER}\n")
    };
    fs::write(&metrics_path, &csv).context("writing metrics")?;
    let target = cfg.epochs as u64;
    while trainer.epoch < target {
        let m = trainer.train_epoch(&train)?;
        let last = trainer.epoch == target;
        let eval = if last || (cfg.eval_every > 0 && trainer.epoch % cfg.eval_every as u64 == 0) {
            Some(trainer.evaluate(&test)?)
        } else {
            None
        };
        info!(
            "epoch {}: loss {:.4}, train acc {:.4}, spikes/neuron {:.3}{}",
            m.epoch,
            m.loss,
            m.accuracy,
            m.mean_spikes,
            eval.as_ref().map_or(String::new(), |e| format!(", test acc {:.4}", e.accuracy))
        );
        writeln!(csv, "{}", metrics_row(&m, eval.as_ref())).expect("writing to a String");
        fs::write(&metrics_path, &csv).context("writing metrics")?;
        checkpoint::save(&out_dir.join("checkpoint.bin"), &trainer)?;
    }
    let e = trainer.evaluate(&test)?;
    println!("test accuracy {:.4} after {} epochs", e.accuracy, trainer.epoch);
    checkpoint::save(&out_dir.join("checkpoint.bin"), &trainer)?;
    println!("wrote {}", out_dir.display());
    Ok(())
}

const HIST_HEADER: &str = "spikes,count";

fn hist_csv(e: &EvalMetrics) -> String {
    let mut s = format!("{HIST_HEADER}\n");
    for (k, c) in e.histogram.iter().enumerate() {
        writeln!(s, "{k},{c}").expect("writing to a String");
    }
    s
}

fn cmd_eval(path: &Path, split: Split, data_dir: Option<PathBuf>, hist: Option<&Path>) -> CliResult {
    let trainer = checkpoint::load(path)?;
    let mut cfg = trainer.config.clone();
    if let Some(d) = data_dir {
        cfg.data_dir = d;
    }
    let data = load_data(&cfg, split)?;
    let e = trainer.evaluate(&data)?;
    println!("accuracy {:.4}", e.accuracy);
    println!("mean spikes per hidden neuron {:.4}", e.mean_spikes);
    println!("dead fraction {:.4}", e.dead_fraction);
    println!("max spikes {}", e.max_spikes);
    if let Some(h) = hist {
        fs::write(h, hist_csv(&e)).with_context(|| format!("writing {}", h.display()))?;
        println!("wrote {}", h.display());
    }
    Ok(())
}

const SWEEP_HEADER: &str = "row,tau_i,seed,accuracy_mean,accuracy_stderr,mean_spikes,dead_fraction";

fn cmd_sweep(base: RunConfig, taus: &[f64], seeds: &[u64]) -> CliResult {
    if taus.is_empty() || seeds.is_empty() {
        return Err(CliError::new(code::CONFIG, anyhow!("need at least one tau and one seed")));
    }
    fs::create_dir_all(&base.out_dir).with_context(|| format!("creating {}", base.out_dir.display()))?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for &tau in taus {
        let cfg = RunConfig { tau_i: tau, ..base.clone() };
        cfg.validate()?;
        let train = load_data(&cfg, Split::Train)?;
        let test = load_data(&cfg, Split::Test)?;
        let mut accs = Vec::new();
        let mut spikes = Vec::new();
        let mut dead = Vec::new();
        for &seed in seeds {
            let mut trainer = Trainer::new(RunConfig { seed, ..cfg.clone() })?;
            for _ in 0..cfg.epochs {
                trainer.train_epoch(&train)?;
            }
            let e = trainer.evaluate(&test)?;
            info!("tau {tau} seed {seed}: accuracy {:.4}, spikes/neuron {:.3}", e.accuracy, e.mean_spikes);
            writeln!(csv, "run,{tau},{seed},{},,{},{}", e.accuracy, e.mean_spikes, e.dead_fraction).expect("String");
            accs.push(e.accuracy);
            spikes.push(e.mean_spikes);
            dead.push(e.dead_fraction);
        }
        let (mean, stderr) = mean_stderr(&accs);
        writeln!(csv, "aggregate,{tau},,{mean},{stderr},{},{}", mean_stderr(&spikes).0, mean_stderr(&dead).0).expect("String");
        fs::write(base.out_dir.join("sweep.csv"), &csv).context("writing sweep.csv")?;
    }
    println!("wrote {}", base.out_dir.join("sweep.csv").display());
    Ok(())
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn write_report<T: serde::Serialize>(report: &T, path: Option<&Path>) -> CliResult {
    let json = serde_json::to_string_pretty(report).context("serializing report")?;
    match path {
        Some(p) => fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_gradcheck(args: &CheckArgs) -> CliResult {
    let r = gradcheck_suite(args.seed, args.cases, Ablation::default())?;
    write_report(&r, args.report.as_deref())?;
    eprintln!(
        "gradcheck: {}/{} coordinates match, {} at spike-count discontinuities, {} unexplained",
        r.matched, r.coordinates, r.excluded, r.unexplained
    );
    if r.passed {
        Ok(())
    } else {
        Err(CliError::new(code::CHECK_FAILED, anyhow!("gradcheck failed")))
    }
}

#[derive(serde::Serialize)]
struct OracleCheckReport {
    oracle: multispike::checks::OracleReport,
    residual: multispike::checks::ResidualReport,
    passed: bool,
}

fn cmd_oracle_check(args: &CheckArgs) -> CliResult {
    let oracle = oracle_suite(args.seed, args.cases)?;
    let residual = residual_suite(args.seed, args.cases)?;
    let passed = oracle.passed && residual.passed;
    eprintln!(
        "oracle-check: max spike-time error {:.3e}, max v_out error {:.3e}, max residual {:.3e}",
        oracle.max_time_error, oracle.max_v_out_error, residual.max_residual
    );
    write_report(&OracleCheckReport { oracle, residual, passed }, args.report.as_deref())?;
    if passed {
        Ok(())
    } else {
        Err(CliError::new(code::CHECK_FAILED, anyhow!("oracle check failed")))
    }
}
