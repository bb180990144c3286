//! Flag definitions and command implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use noisnn::arch::{parse_arch, Readout};
use noisnn::dataio::{self, Checkpoint, Dataset, Split};
use noisnn::runtime::{self, EvalOptions, NoiseKeys, RunMode, Stage};
use noisnn::spiking::{NoiseFamily, NoiseSpec, RenormParams};
use noisnn::trainer::TrainConfig;

use crate::experiments::{self, BenchSettings, DatasetName, TrainProtocol, DEFAULT_ARCH, VALIDATION_HOLDOUT};
use crate::report::{Config, MetricsWriter, ReportRow, ReportWriter};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<noisnn::Error> for CliError {
    fn from(e: noisnn::Error) -> Self {
        use noisnn::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Validation(_) | E::Parse { .. } => CliError::Usage(msg),
            E::Io { .. }
            | E::Format { .. }
            | E::Length { .. }
            | E::Corruption(_)
            | E::Version(_)
            | E::Dimension { .. } => CliError::Data(msg),
            E::NonFinite { .. } => CliError::Numeric(msg),
            E::Contract(_) => CliError::Internal(msg),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "noisnn", version, about = "Train noisy single-step spiking networks and run them as multistep LIF networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a single-step network with noise injection.
    Train(TrainArgs),
    /// Rewrite a checkpoint for another run mode.
    Convert(ConvertArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Accuracy over a list of simulation lengths, stages 2 and 3.
    SweepT(SweepTArgs),
    /// Stage-3 accuracy over a list of alpha values.
    SweepAlpha(SweepAlphaArgs),
    /// Train with different noise families and compare their gains.
    CompareNoise(CompareNoiseArgs),
    /// Training time to a target accuracy, ours against direct multistep training.
    BenchSpeed(BenchSpeedArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Mnist,
    FashionMnist,
}

impl From<DatasetArg> for DatasetName {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Mnist => DatasetName::Mnist,
            DatasetArg::FashionMnist => DatasetName::FashionMnist,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Test,
    Val,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    pub dataset: DatasetArg,
    /// Directory holding the IDX files; defaults to $NOISNN_DATA/<dataset> or data/<dataset>.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Images held out from the end of the training split for validation.
    #[arg(long, default_value_t = VALIDATION_HOLDOUT)]
    pub holdout: usize,
}

impl DataArgs {
    fn dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| experiments::default_data_dir(self.dataset.into()))
    }

    fn train(&self, subset: Option<usize>) -> CliResult<Dataset> {
        let full = experiments::load_dataset(&self.dir(), Split::Train)?;
        Ok(experiments::training_subset(&full, self.holdout, subset)?)
    }

    fn eval(&self, split: SplitArg, subset: Option<usize>) -> CliResult<Dataset> {
        let ds = match split {
            SplitArg::Test => experiments::load_dataset(&self.dir(), Split::Test)?,
            SplitArg::Val => {
                let full = experiments::load_dataset(&self.dir(), Split::Train)?;
                if self.holdout == 0 {
                    return Err(CliError::Usage("--split val needs --holdout >= 1".into()));
                }
                full.split_validation(self.holdout)?.1
            }
        };
        Ok(match subset {
            Some(n) => ds.head(n),
            None => ds,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct NoiseArgs {
    #[arg(long, default_value = "gaussian")]
    pub noise: NoiseFamily,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub noise_lo: f32,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub noise_hi: f32,
}

impl NoiseArgs {
    fn spec(&self) -> CliResult<NoiseSpec> {
        let s = NoiseSpec::from_range(self.noise, self.noise_lo, self.noise_hi)?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModeArgs {
    /// 1: single step; 2: replicated steps; 3: stateful LIF with renormalized potential.
    #[arg(long)]
    pub stage: Option<u8>,
    /// Simulation steps.
    #[arg(long = "T")]
    pub steps: Option<usize>,
    /// Potential-term scale (>= 2, or inf).
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f32>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f32>,
}

impl ModeArgs {
    /// Resolves the mode, falling back to `base` for unset flags.
    fn resolve(&self, base: &RunMode) -> CliResult<RunMode> {
        let stage = match self.stage {
            Some(s) => Stage::try_from(s).map_err(CliError::Usage)?,
            None => base.stage,
        };
        let renorm = RenormParams {
            alpha: self.alpha.unwrap_or(base.renorm.alpha),
            beta: self.beta.unwrap_or(base.renorm.beta),
            ..base.renorm
        };
        let default_steps = if stage == base.stage { base.steps } else if stage == Stage::Single { 1 } else { 10 };
        let steps = self.steps.unwrap_or(default_steps);
        if steps == 0 {
            return Err(CliError::Usage("--T must be >= 1".into()));
        }
        if stage == Stage::Stateful {
            renorm.validate()?;
        }
        Ok(match stage {
            Stage::Single => {
                if steps != 1 {
                    return Err(CliError::Usage("stage 1 runs exactly one step; use --T 1".into()));
                }
                RunMode::stage1()
            }
            Stage::Replicated => RunMode::stage2(steps),
            Stage::Stateful => RunMode::stage3(steps, renorm),
        })
    }

    fn precheck(&self) -> CliResult<()> {
        if self.steps == Some(0) {
            return Err(CliError::Usage("--T must be >= 1".into()));
        }
        if let Some(s) = self.stage {
            let stage = Stage::try_from(s).map_err(CliError::Usage)?;
            if stage == Stage::Single && self.steps.is_some_and(|t| t != 1) {
                return Err(CliError::Usage("stage 1 runs exactly one step; drop --T or pass --T 1".into()));
            }
        }
        if let Some(a) = self.alpha {
            RenormParams::new(a, self.beta.unwrap_or(0.5))?;
        }
        Ok(())
    }
}

fn parse_alpha(s: &str) -> Result<f32, String> {
    s.parse::<f32>().map_err(|e| format!("'{s}': {e}"))
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = DEFAULT_ARCH)]
    pub arch: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cap on training images (taken from the front of the training split).
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long, value_enum, default_value = "spikes")]
    pub readout: ReadoutArg,
    #[arg(long, default_value = "model.nsnn")]
    pub out: PathBuf,
    #[arg(long, default_value = "metrics.csv")]
    pub metrics: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReadoutArg {
    Spikes,
    Potentials,
}

impl From<ReadoutArg> for Readout {
    fn from(r: ReadoutArg) -> Self {
        match r {
            ReadoutArg::Spikes => Readout::Spikes,
            ReadoutArg::Potentials => Readout::Potentials,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub mode: ModeArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub mode: ModeArgs,
    /// Evaluation noise seed; defaults to the checkpoint's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Noise is always keyed by (layer, step, sample index), so runs at
    /// different stages share their noise draws; the flag is kept for clarity.
    #[arg(long)]
    pub seed_aligned: bool,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Append a report row to this CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write every sample's averaged output to this CSV.
    #[arg(long)]
    pub outputs: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepCommon {
    /// Checkpoints to evaluate (repeatable).
    #[arg(long, required = true, num_args = 1..)]
    pub ckpt: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub t_list: Vec<usize>,
    /// Number of evaluation seeds, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub beta: f32,
}

impl SweepCommon {
    fn precheck(&self) -> CliResult<()> {
        if self.t_list.is_empty() || self.t_list.contains(&0) {
            return Err(CliError::Usage("--t-list entries must be >= 1".into()));
        }
        if self.seeds == 0 {
            return Err(CliError::Usage("--seeds must be >= 1".into()));
        }
        Ok(())
    }

    fn eval_seeds(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    fn load_models(&self) -> CliResult<Vec<(String, Checkpoint)>> {
        self.ckpt
            .iter()
            .map(|p| {
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((name, dataio::load_checkpoint(p)?))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Args)]
pub struct SweepTArgs {
    #[command(flatten)]
    pub common: SweepCommon,
    #[arg(long, default_value = "4", value_parser = parse_alpha)]
    pub alpha: f32,
    #[arg(long, default_value = "sweep_t.csv")]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepAlphaArgs {
    #[command(flatten)]
    pub common: SweepCommon,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,8,inf", value_parser = parse_alpha)]
    pub alphas: Vec<f32>,
    #[arg(long, default_value = "sweep_alpha.csv")]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainBudget {
    #[arg(long, default_value = DEFAULT_ARCH)]
    pub arch: String,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "spikes")]
    pub readout: ReadoutArg,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub noise_lo: f32,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub noise_hi: f32,
}

impl TrainBudget {
    fn protocol(&self, family: NoiseFamily) -> CliResult<TrainProtocol> {
        let p = TrainProtocol {
            arch: self.arch.clone(),
            noise: NoiseSpec::from_range(family, self.noise_lo, self.noise_hi)?,
            readout: self.readout.into(),
            train: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch_size,
                lr0: self.lr,
                seed: self.seed,
                ..TrainConfig::default()
            },
        };
        p.train.validate()?;
        parse_arch(&p.arch, &[1, 28, 28])?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Args)]
pub struct CompareNoiseArgs {
    #[command(flatten)]
    pub budget: TrainBudget,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "gaussian,uniform,none")]
    pub families: Vec<NoiseFamily>,
    /// Number of training seeds, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,10")]
    pub t_list: Vec<usize>,
    #[arg(long, default_value = "4", value_parser = parse_alpha)]
    pub alpha: f32,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub beta: f32,
    #[arg(long)]
    pub eval_subset: Option<usize>,
    #[arg(long, default_value = "compare_noise.csv")]
    pub report: PathBuf,
    /// Keep the trained checkpoints in this directory.
    #[arg(long)]
    pub save_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchSpeedArgs {
    #[command(flatten)]
    pub budget: TrainBudget,
    #[arg(long, value_enum, default_value = "fashion-mnist")]
    pub dataset: DatasetArg,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = VALIDATION_HOLDOUT)]
    pub holdout: usize,
    #[arg(long, default_value_t = 0.88)]
    pub target_acc: f64,
    /// Training-time budget per arm.
    #[arg(long, default_value_t = 900.0)]
    pub budget_seconds: f64,
    #[arg(long, default_value_t = 50)]
    pub max_epochs: usize,
    #[arg(long = "T", default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value = "4", value_parser = parse_alpha)]
    pub alpha: f32,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub beta: f32,
    #[arg(long, default_value_t = 2000)]
    pub eval_subset: usize,
    #[arg(long, default_value = "bench_speed.csv")]
    pub report: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    noisnn::exec::configure_from_env();
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Convert(a) => cmd_convert(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::SweepT(a) => cmd_sweep_t(&a),
        Command::SweepAlpha(a) => cmd_sweep_alpha(&a),
        Command::CompareNoise(a) => cmd_compare_noise(&a),
        Command::BenchSpeed(a) => cmd_bench_speed(&a),
    }
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr0: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    if a.lr <= 0.0 {
        return Err(CliError::Usage("--lr must be > 0".into()));
    }
    if a.subset == Some(0) {
        return Err(CliError::Usage("--subset must be >= 1".into()));
    }
    let protocol = TrainProtocol {
        arch: a.arch.clone(),
        noise: a.noise.spec()?,
        readout: a.readout.into(),
        train: cfg,
    };
    parse_arch(&protocol.arch, &[1, 28, 28])?;

    let data = a.data.train(a.subset)?;
    let mut metrics = MetricsWriter::create(&a.metrics).map_err(|e| io_err(&a.metrics, e))?;
    let mut write_err = None;
    let (mut ckpt, _) = experiments::train_model(&protocol, &data, |m| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  acc {:.4}  lr {:.2e}  {:.1}s",
            m.epoch, m.loss, m.acc, m.lr, m.seconds
        );
        if let Err(e) = metrics.write(m) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&a.metrics, e));
    }
    ckpt.metadata.insert("dataset".into(), a.data.dataset.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default());
    dataio::save_checkpoint(&ckpt, &a.out)?;
    println!("wrote {} ({} parameters)", a.out.display(), ckpt.spec.parameter_count());
    Ok(())
}

pub fn cmd_convert(a: &ConvertArgs) -> CliResult<()> {
    a.mode.precheck()?;
    let ckpt = dataio::load_checkpoint(&a.ckpt)?;
    let mode = a.mode.resolve(&ckpt.mode)?;
    let out = runtime::convert(&ckpt, mode)?;
    dataio::save_checkpoint(&out, &a.out)?;
    println!(
        "wrote {} (stage {}, T = {}, alpha = {}, beta = {})",
        a.out.display(),
        mode.stage,
        mode.steps,
        mode.renorm.alpha,
        mode.renorm.beta
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    a.mode.precheck()?;
    if a.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be >= 1".into()));
    }
    let ckpt = dataio::load_checkpoint(&a.ckpt)?;
    let mode = a.mode.resolve(&ckpt.mode)?;
    mode.validate(&ckpt.spec.noise)?;
    let ds = a.data.eval(a.split, a.subset)?;
    if ds.image_shape() != ckpt.spec.input_shape.as_slice() {
        return Err(CliError::Data(format!(
            "dataset images {:?} do not fit the network input {:?}",
            ds.image_shape(),
            ckpt.spec.input_shape
        )));
    }
    let seed = a.seed.unwrap_or(ckpt.seed);

    let t0 = Instant::now();
    let mut correct = 0usize;
    let mut outputs = Vec::new();
    let mut start = 0;
    while start < ds.len() {
        let end = (start + a.batch_size).min(ds.len());
        let keys = NoiseKeys::eval(seed, start as u64);
        let r = runtime::evaluate(&ckpt.params, &ckpt.spec, &ds.images.rows(start, end), &mode, &keys, EvalOptions::default())?;
        correct += r
            .predictions
            .iter()
            .zip(&ds.labels[start..end])
            .filter(|(p, &l)| **p == l as usize)
            .count();
        if a.outputs.is_some() {
            outputs.push(r.averaged_output);
        }
        start = end;
    }
    let secs = t0.elapsed().as_secs_f64();
    let acc = correct as f64 / ds.len() as f64;
    let latency_ms = 1e3 * secs / ds.len() as f64;
    println!(
        "accuracy {acc:.4}  images {}  stage {}  T {}  latency {latency_ms:.3} ms/image",
        ds.len(),
        mode.stage,
        mode.steps
    );

    if let Some(path) = &a.outputs {
        let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        for t in &outputs {
            for i in 0..t.batch() {
                w.write_record(t.row(i).iter().map(|v| format!("{v:?}")))
                    .map_err(|e| CliError::Data(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| io_err(path, e))?;
    }
    if let Some(path) = &a.report {
        let mut cfg = Config::new()
            .with("ckpt", a.ckpt.display())
            .with("stage", mode.stage)
            .with("T", mode.steps)
            .with("seed", seed)
            .with("split", format!("{:?}", a.split).to_lowercase());
        if mode.stage == Stage::Stateful {
            cfg = cfg.with("alpha", mode.renorm.alpha).with("beta", mode.renorm.beta);
        }
        let mut w = ReportWriter::append(path).map_err(|e| io_err(path, e))?;
        w.write(&ReportRow::new("eval", &cfg, "acc", acc, secs)).map_err(|e| io_err(path, e))?;
        w.write(&ReportRow::new("eval", &cfg, "latency_ms", latency_ms, secs))
            .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn open_report(path: &Path) -> CliResult<ReportWriter> {
    ReportWriter::append(path).map_err(|e| io_err(path, e))
}

/// Echoes each row and appends it to the report.
fn emit_to(w: &mut ReportWriter) -> impl FnMut(&ReportRow) + '_ {
    move |row: &ReportRow| {
        println!("{},{},{},{}", row.experiment, row.config, row.metric, row.value);
        if let Err(e) = w.write(row) {
            eprintln!("warning: could not append to {}: {e}", w.path().display());
        }
    }
}

pub fn cmd_sweep_t(a: &SweepTArgs) -> CliResult<()> {
    a.common.precheck()?;
    let renorm = RenormParams::new(a.alpha, a.common.beta)?;
    let models = a.common.load_models()?;
    let ds = a.common.data.eval(a.common.split, a.common.subset)?;
    let mut w = open_report(&a.report)?;
    experiments::sweep_t(
        &models,
        &ds,
        &a.common.t_list,
        &a.common.eval_seeds(),
        &renorm,
        a.common.batch_size,
        emit_to(&mut w),
    )?;
    Ok(())
}

pub fn cmd_sweep_alpha(a: &SweepAlphaArgs) -> CliResult<()> {
    a.common.precheck()?;
    for &alpha in &a.alphas {
        RenormParams::new(alpha, a.common.beta)?;
    }
    let models = a.common.load_models()?;
    let ds = a.common.data.eval(a.common.split, a.common.subset)?;
    let mut w = open_report(&a.report)?;
    experiments::sweep_alpha(
        &models,
        &ds,
        &a.alphas,
        &a.common.t_list,
        &a.common.eval_seeds(),
        a.common.beta,
        a.common.batch_size,
        emit_to(&mut w),
    )?;
    Ok(())
}

pub fn cmd_compare_noise(a: &CompareNoiseArgs) -> CliResult<()> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    if a.t_list.is_empty() || a.t_list.contains(&0) {
        return Err(CliError::Usage("--t-list entries must be >= 1".into()));
    }
    if a.families.is_empty() {
        return Err(CliError::Usage("--families must name at least one family".into()));
    }
    let renorm = RenormParams::new(a.alpha, a.beta)?;
    let base = a.budget.protocol(NoiseFamily::Gaussian)?;
    let train = a.data.train(a.budget.subset)?;
    let test = a.data.eval(SplitArg::Test, a.eval_subset)?;
    if let Some(dir) = &a.save_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| a.budget.seed + i).collect();
    let mut w = open_report(&a.report)?;
    let mut save_err = None;
    experiments::compare_noise(
        &base,
        &a.families,
        &seeds,
        &train,
        &test,
        &a.t_list,
        &renorm,
        256,
        emit_to(&mut w),
        |family, seed, ckpt| {
            if let Some(dir) = &a.save_dir {
                let p = dir.join(format!("{family}-seed{seed}.nsnn"));
                if let Err(e) = dataio::save_checkpoint(ckpt, &p) {
                    save_err.get_or_insert(e);
                }
            }
        },
    )?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    Ok(())
}

pub fn cmd_bench_speed(a: &BenchSpeedArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&a.target_acc) {
        return Err(CliError::Usage("--target-acc must lie in [0, 1]".into()));
    }
    if a.steps == 0 || a.max_epochs == 0 || a.eval_subset == 0 {
        return Err(CliError::Usage("--T, --max-epochs and --eval-subset must be >= 1".into()));
    }
    let settings = BenchSettings {
        target_acc: a.target_acc,
        budget_seconds: a.budget_seconds,
        steps: a.steps,
        renorm: RenormParams::new(a.alpha, a.beta)?,
        max_epochs: a.max_epochs,
        eval_batch: 256,
    };
    let protocol = a.budget.protocol(NoiseFamily::Gaussian)?;
    let data = DataArgs {
        dataset: a.dataset,
        data_dir: a.data_dir.clone(),
        holdout: a.holdout,
    };
    let train = data.train(a.budget.subset)?;
    let eval = data.eval(SplitArg::Test, Some(a.eval_subset))?;
    let mut w = open_report(&a.report)?;

    let ours = experiments::bench_ours(&protocol, &train, &eval, &settings, |e, s, acc| {
        eprintln!("ours    epoch {e:>3}  train {s:.1}s  acc(T={}) {acc:.4}", settings.steps)
    })?;
    let direct = experiments::bench_direct(&protocol, &train, &eval, &settings, |e, s, acc| {
        eprintln!("direct  epoch {e:>3}  train {s:.1}s  acc(T={}) {acc:.4}", settings.steps)
    })?;
    let mut emit = emit_to(&mut w);
    for row in experiments::bench_rows(&settings, &ours, &direct, a.budget.batch_size) {
        emit(&row);
    }
    Ok(())
}
