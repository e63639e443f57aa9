//! Command implementations behind the `dplc` binary.
//!
//! Every command works inside a run directory `<output_dir>/<run_id>/`
//! that holds the resolved `config.toml`, the checkpoints, and one
//! numbered report directory per sweep.

pub mod plots;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use sha2::{Digest, Sha256};

use dplc::checkpoint::{load_checkpoint, save_checkpoint};
use dplc::config::ExperimentConfig;
use dplc::data::{image_grid, PriorFamily, PriorSpec};
use dplc::evaluation::{
    cell_name, cell_seed, generator_name, run_rate_sweep, verify_theorem1, MethodTag, SweepReport,
};
use dplc::models::{Model, Role};
use dplc::rng;
use dplc::training::{lambda_schedule, train_codec, train_generator, GeneratorAlgo, LossRecord, RunOptions};

/// Environment variable selecting the compute device.
pub const DEVICE_VAR: &str = "DPLC_DEVICE";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files: exit code 2.
    Usage(String),
    /// Training or I/O failure at run time: exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<dplc::Error> for CliError {
    fn from(e: dplc::Error) -> Self {
        match e {
            dplc::Error::Config { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "dplc", version, about = "Distribution-preserving lossy compression lab")]
pub struct Cli {
    /// Log progress at debug level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a generator (with its encoder and critic where the algorithm has them).
    TrainGenerator {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        algo: AlgoArg,
    },
    /// Train compressive-autoencoder baselines and record their test MSE table.
    TrainCae {
        #[command(flatten)]
        config: ConfigArgs,
        /// Code sizes in bits; defaults to the configured grid.
        #[arg(long = "rate", value_delimiter = ',')]
        rates: Vec<usize>,
    },
    /// Train a rate-constrained encoder and stochastic mapper on a frozen generator.
    TrainCodec {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        generator: PathBuf,
        /// Code size in bits.
        #[arg(long)]
        rate: usize,
        /// Fixed MMD weight; skips the CAE table lookup.
        #[arg(long)]
        lambda_override: Option<f64>,
    },
    /// Train or reuse every configured method at every rate and report metrics and plots.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Measure quantize-and-resample distortion against the exponential bound.
    VerifyTheorem1 {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..=3))]
        m: u64,
        #[arg(long, default_value_t = 6)]
        kmax: usize,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the resolved config as TOML (a starting point for custom runs).
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Draw samples from a trained generator.
    Sample {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// `.png` for image generators, `.csv` for vector generators.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = PriorArg::StandardNormal)]
        prior: PriorArg,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in config: toy2d, celeba-paper or lsun-paper.
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides `run_id`.
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgoArg {
    #[value(alias = "wae-mmd")]
    Wae,
    WganGp,
    Wpp,
}

impl From<AlgoArg> for GeneratorAlgo {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Wae => GeneratorAlgo::WaeMmd,
            AlgoArg::WganGp => GeneratorAlgo::WganGp,
            AlgoArg::Wpp => GeneratorAlgo::Wpp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorArg {
    StandardNormal,
    UniformHypercube,
}

/// Refuses any device other than the CPU.
pub fn check_device() -> CliResult<()> {
    match std::env::var(DEVICE_VAR) {
        Ok(v) if !v.eq_ignore_ascii_case("cpu") => {
            Err(usage(format!("{DEVICE_VAR}={v} is not available; this build runs on cpu only")))
        }
        _ => Ok(()),
    }
}

pub fn resolve_config(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => {
            if !path.is_file() {
                return Err(usage(format!("config file not found: {}", path.display())));
            }
            ExperimentConfig::load(path).map_err(|e| match e {
                dplc::Error::Config { .. } => usage(format!("{}: {e}", path.display())),
                other => usage(format!("cannot read {}: {other}", path.display())),
            })?
        }
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => return Err(usage("pass --config or --preset")),
    };
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(id) = &args.run_id {
        cfg.run_id = id.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The run directory of one resolved config.
pub struct RunDir {
    pub root: PathBuf,
    pub config: ExperimentConfig,
}

impl RunDir {
    pub const CONFIG_FILE: &'static str = "config.toml";
    pub const CAE_TABLE: &'static str = "cae_table.csv";

    /// Creates the directory or reopens it. A directory holding a
    /// different config is refused.
    pub fn open(config: ExperimentConfig) -> CliResult<Self> {
        let root = config.run_dir();
        let path = root.join(Self::CONFIG_FILE);
        if path.exists() {
            let existing = ExperimentConfig::load(&path)
                .map_err(|e| usage(format!("run directory {} has an unreadable config: {e}", root.display())))?;
            if existing.fingerprint() != config.fingerprint() {
                return Err(usage(format!(
                    "run directory {} belongs to a different config (fingerprint {}); pick another run_id or output_dir",
                    root.display(),
                    &existing.fingerprint()[..12]
                )));
            }
        } else {
            config.save(&path)?;
        }
        fs::create_dir_all(root.join("checkpoints")).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root, config })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, stem: &str) -> PathBuf {
        self.checkpoints().join(format!("{stem}.ckpt"))
    }

    /// Creates the next unused `reports/NNN` directory.
    pub fn new_report_dir(&self) -> CliResult<PathBuf> {
        let base = self.root.join("reports");
        fs::create_dir_all(&base).with_context(|| format!("creating {}", base.display()))?;
        for i in 1.. {
            let dir = base.join(format!("{i:03}"));
            match fs::create_dir(&dir) {
                Ok(()) => return Ok(dir),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(anyhow::Error::new(e).context(format!("creating {}", dir.display())).into()),
            }
        }
        unreachable!()
    }

    pub fn read_cae_table(&self) -> CliResult<Option<BTreeMap<usize, f64>>> {
        let path = self.root.join(Self::CAE_TABLE);
        if !path.exists() {
            return Ok(None);
        }
        let mut rd = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut table = BTreeMap::new();
        for row in rd.deserialize::<CaeRow>() {
            let row = row.with_context(|| format!("parsing {}", path.display()))?;
            table.insert(row.rate_bits, row.mse);
        }
        Ok(Some(table))
    }

    fn write_cae_table(&self, table: &BTreeMap<usize, f64>) -> CliResult<()> {
        let path = self.root.join(Self::CAE_TABLE);
        let pixels: usize = self.config.pixel_dims().iter().product();
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        for (&rate_bits, &mse) in table {
            w.serialize(CaeRow {
                rate_bits,
                rate_bpp: rate_bits as f64 / pixels as f64,
                mse,
            })
            .context("writing CAE table")?;
        }
        w.flush().context("writing CAE table")?;
        Ok(())
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CaeRow {
    rate_bits: usize,
    rate_bpp: f64,
    mse: f64,
}

fn write_losses(path: &Path, history: &[LossRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in history {
        w.serialize(r).context("writing losses")?;
    }
    w.flush().context("writing losses")?;
    Ok(())
}

/// Hex SHA-256 of a file's bytes.
pub fn file_fingerprint(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_input_model(path: &Path, role: Role) -> CliResult<(Model, serde_json::Value)> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint not found: {}", path.display())));
    }
    let ckpt = load_checkpoint(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let model = ckpt.model(role).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok((model, ckpt.metadata))
}

pub fn run(cli: Cli) -> CliResult<()> {
    check_device()?;
    match cli.command {
        Command::TrainGenerator { config, algo } => cmd_train_generator(&config, algo.into()).map(|_| ()),
        Command::TrainCae { config, rates } => cmd_train_cae(&config, &rates).map(|_| ()),
        Command::TrainCodec {
            config,
            generator,
            rate,
            lambda_override,
        } => cmd_train_codec(&config, &generator, rate, lambda_override).map(|_| ()),
        Command::Sweep { config } => cmd_sweep(&config).map(|_| ()),
        Command::Config { config } => {
            let cfg = resolve_config(&config)?;
            print!("# fingerprint {}\n{}", cfg.fingerprint(), cfg.to_toml());
            Ok(())
        }
        Command::VerifyTheorem1 { m, kmax, n, seed } => cmd_verify_theorem1(m as usize, kmax, n, seed),
        Command::Sample {
            generator,
            n,
            out,
            seed,
            prior,
        } => cmd_sample(&generator, n, &out, seed, prior),
    }
}

/// Returns the checkpoint path.
pub fn cmd_train_generator(args: &ConfigArgs, algo: GeneratorAlgo) -> CliResult<PathBuf> {
    let run = RunDir::open(resolve_config(args)?)?;
    let cfg = &run.config;
    let train_cfg = cfg.generator_config(algo)?;
    let (mut train, _) = cfg.load_datasets()?;
    let stem = generator_name(algo);
    let path = run.checkpoint(&stem);
    let opts = RunOptions {
        abort_checkpoint: Some(path.with_extension("diverged.ckpt")),
        config_fingerprint: cfg.fingerprint(),
        log_every: cfg.trainer.log_every,
    };
    let t0 = Instant::now();
    info!("training {} for {} iterations", algo.name(), train_cfg.iterations);
    let result = train_generator(algo, &mut train, &cfg.arch(), cfg.prior()?, &train_cfg, &opts)
        .map_err(|e| CliError::Runtime(anyhow::Error::new(e).context(format!("training {}", algo.name()))))?;
    save_checkpoint(&result.state.checkpoint(&cfg.fingerprint(), train_cfg.seed), &path)?;
    write_losses(&run.root.join(format!("losses-{stem}.csv")), &result.history)?;
    println!(
        "{} done in {:.1}s: {} (sha256 {})",
        algo.name(),
        t0.elapsed().as_secs_f64(),
        path.display(),
        file_fingerprint(&path)?
    );
    Ok(path)
}

/// Returns the CAE table after merging the new rates.
pub fn cmd_train_cae(args: &ConfigArgs, rates: &[usize]) -> CliResult<BTreeMap<usize, f64>> {
    let run = RunDir::open(resolve_config(args)?)?;
    let cfg = &run.config;
    let mut plan = cfg.sweep_plan(Some(run.checkpoints()))?;
    plan.methods = vec![MethodTag::Cae];
    if !rates.is_empty() {
        let mut r = rates.to_vec();
        r.sort_unstable();
        r.dedup();
        plan.rates_bits = r;
    }
    let (mut train, test) = cfg.load_datasets()?;
    let outcome = run_rate_sweep(&plan, &mut train, test.samples())?;
    let mut table = run.read_cae_table()?.unwrap_or_default();
    for (rec, bits) in outcome.report.records.iter().zip(&plan.rates_bits) {
        table.insert(*bits, rec.mse);
        println!("cae R={bits} bits: test mse {:.6}", rec.mse);
    }
    run.write_cae_table(&table)?;
    Ok(table)
}

/// Returns the codec checkpoint path and the weight used.
pub fn cmd_train_codec(
    args: &ConfigArgs,
    generator: &Path,
    rate: usize,
    lambda_override: Option<f64>,
) -> CliResult<(PathBuf, f64)> {
    let run = RunDir::open(resolve_config(args)?)?;
    let cfg = &run.config;
    let (mut gen, meta) = load_input_model(generator, Role::Generator)?;
    gen.set_training(false);
    let lambda = match lambda_override.or(cfg.trainer.lambda.mmd_override) {
        Some(l) if l >= 0.0 && l.is_finite() => l,
        Some(l) => return Err(usage(format!("--lambda-override must be a nonnegative number, got {l}"))),
        None => {
            let table = run.read_cae_table()?.ok_or_else(|| {
                usage(format!(
                    "no CAE table in {}; run `dplc train-cae` first or pass --lambda-override",
                    run.root.display()
                ))
            })?;
            let reference = cfg.trainer.lambda.reference_bits;
            for need in [reference, rate] {
                if !table.contains_key(&need) {
                    return Err(usage(format!(
                        "CAE table lacks rate {need}; run `dplc train-cae --rate {need}` first or pass --lambda-override"
                    )));
                }
            }
            let rows: Vec<(f64, f64)> = table.iter().map(|(&b, &m)| (b as f64, m)).collect();
            lambda_schedule(rate as f64, &rows, cfg.trainer.lambda.mmd_base, reference as f64)?
        }
    };
    let algo = meta.get("algo").and_then(|a| a.as_str()).map(str::to_owned);
    let method = MethodTag::ALL
        .into_iter()
        .find(|m| m.generator_algo().is_some_and(|g| Some(g.name()) == algo.as_deref()));
    let stem = match method {
        Some(m) => cell_name(m, rate),
        None => format!("codec-r{rate}"),
    };
    let mut train_cfg = cfg.trainer.codec.clone();
    train_cfg.lambda_mmd = lambda;
    train_cfg.seed = cell_seed(cfg.seed, method.unwrap_or(MethodTag::DplcWpp), rate);
    let (mut train, _) = cfg.load_datasets()?;
    let path = run.checkpoint(&stem);
    let opts = RunOptions {
        abort_checkpoint: Some(path.with_extension("diverged.ckpt")),
        config_fingerprint: cfg.fingerprint(),
        log_every: cfg.trainer.log_every,
    };
    info!("training codec at {rate} bits with lambda_mmd = {lambda}");
    let result = train_codec(&gen, rate, &mut train, &cfg.arch(), &cfg.prior()?, &train_cfg, &opts)
        .map_err(|e| CliError::Runtime(anyhow::Error::new(e).context("training codec")))?;
    save_checkpoint(
        &result.codec.to_checkpoint(&cfg.fingerprint(), train_cfg.iterations, train_cfg.seed),
        &path,
    )?;
    write_losses(&run.root.join(format!("losses-{stem}.csv")), &result.history)?;
    println!("codec R={rate} bits, lambda_mmd {lambda}: {}", path.display());
    Ok((path, lambda))
}

/// Returns the report directory.
pub fn cmd_sweep(args: &ConfigArgs) -> CliResult<PathBuf> {
    let run = RunDir::open(resolve_config(args)?)?;
    let cfg = &run.config;
    let plan = cfg.sweep_plan(Some(run.checkpoints()))?;
    let (mut train, test) = cfg.load_datasets()?;
    let t0 = Instant::now();
    let outcome = run_rate_sweep(&plan, &mut train, test.samples())?;
    let dir = run.new_report_dir()?;
    cfg.save(&dir.join(RunDir::CONFIG_FILE))?;
    outcome.report.write_csv(&dir.join("metrics.csv"))?;
    let mut w = csv::Writer::from_path(dir.join("lambdas.csv")).context("writing lambdas")?;
    w.write_record(["method", "rate_bits", "lambda"]).context("writing lambdas")?;
    for (m, bits, l) in &outcome.lambdas {
        w.write_record([m.as_str().to_string(), bits.to_string(), l.to_string()])
            .context("writing lambdas")?;
    }
    w.flush().context("writing lambdas")?;
    for (file, err) in plots::write_rate_plots(&outcome.report, &dir) {
        warn!("plot {file} not written: {err}");
    }
    print_report(&outcome.report);
    println!("sweep done in {:.1}s: {}", t0.elapsed().as_secs_f64(), dir.display());
    Ok(dir)
}

fn print_report(report: &SweepReport) {
    println!("{:<14}{:>10}{:>12}{:>12}{:>12}{:>12}", "method", "bpp", "mse", "rfid", "sfid", "pv");
    for r in &report.records {
        println!(
            "{:<14}{:>10.4}{:>12.5}{:>12.5}{:>12.5}{:>12.3e}",
            r.method, r.rate_bpp, r.mse, r.rfid_surrogate, r.sfid_surrogate, r.pv
        );
    }
}

pub fn cmd_verify_theorem1(m: usize, kmax: usize, n: usize, seed: u64) -> CliResult<()> {
    if kmax < 2 {
        return Err(usage("--kmax must be at least 2 to fit a slope"));
    }
    if n < 10_000 {
        return Err(usage("--n must be at least 10000"));
    }
    let ks: Vec<usize> = (1..=kmax).collect();
    let r = verify_theorem1(m, &ks, n, seed)?;
    println!("{:>6}{:>14}{:>14}{:>8}{:>14}", "R", "distortion", "bound", "ok", "lloyd");
    for i in 0..r.rates.len() {
        let lloyd = r.lloyd_distortions[i].map_or("-".to_string(), |d| format!("{d:.6}"));
        println!(
            "{:>6}{:>14.6}{:>14.6}{:>8}{:>14}",
            r.rates[i], r.distortions[i], r.bounds[i], r.within_bound[i], lloyd
        );
    }
    println!("slope {:.4} (expected {:.4})", r.slope, r.expected_slope());
    if r.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow::anyhow!(
            "check failed: within bound {}, decreasing {}, slope ok {}",
            r.all_within_bound(),
            r.strictly_decreasing(),
            r.slope_within_tolerance()
        )))
    }
}

pub fn cmd_sample(generator: &Path, n: usize, out: &Path, seed: u64, prior: PriorArg) -> CliResult<()> {
    if n == 0 {
        return Err(usage("--n must be positive"));
    }
    let (mut gen, _) = load_input_model(generator, Role::Generator)?;
    gen.set_training(false);
    let m = gen.arch().input_shape.iter().product();
    let family = match prior {
        PriorArg::StandardNormal => PriorFamily::StandardNormal,
        PriorArg::UniformHypercube => PriorFamily::UniformHypercube,
    };
    let z = PriorSpec::new(family, m)?
        .sample_with(n, &mut rng::substream(seed, rng::stream::PRIOR, 0))?
        .into_tensor();
    let x = gen.infer(&z)?;
    let ext = out.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    if x.shape().len() == 4 {
        if ext != "png" {
            return Err(usage("image generators write .png grids"));
        }
        let columns = (n as f64).sqrt().ceil() as usize;
        image_grid(&x, columns)?
            .save(out)
            .with_context(|| format!("writing {}", out.display()))?;
    } else {
        if ext != "csv" {
            return Err(usage("vector generators write .csv point clouds"));
        }
        let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
        w.write_record((0..x.row_len()).map(|j| format!("x{j}"))).context("writing samples")?;
        for i in 0..x.rows() {
            w.write_record(x.row(i).iter().map(|v| format!("{v:e}"))).context("writing samples")?;
        }
        w.flush().context("writing samples")?;
    }
    println!("{n} samples written to {}", out.display());
    Ok(())
}
