//! Command-line driver: training, evaluation, and plot-ready diagnostics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate_core::diagnostics::gradcheck::{default_registry, run_checks, CheckOutcome};
use crate_core::diagnostics::{
    attention_map, layer_coherence, layer_metrics, LayerMetricsRow, DEFAULT_METRIC_SAMPLES,
};
use crate_core::gmm::{compression_denoising_experiment, CompressionOperator, EpsilonRule, ExperimentConfig};
use crate_core::training::checkpoint;
use crate_core::training::train::{evaluate, train_any, EvalMetrics, TrainConfig, TrainLog};
use crate_core::training::Dataset;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_GATE: i32 = 4;

/// Residual-decrease fraction below which `gmm-verify` fails.
pub const GMM_GATE: f64 = 0.9;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] crate_core::Error),
    #[error("{0}")]
    Gate(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_USAGE,
            CliError::Gate(_) => EXIT_GATE,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "crate", version, about = "Train and inspect white-box CRATE transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON config; writes a checkpoint and a loss log.
    Train(TrainArgs),
    /// Loss and accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Per-layer compression and sparsity, as CSV.
    LayerMetrics(LayerMetricsArgs),
    /// Class-token attention map of one head, as JSON.
    Attn(AttnArgs),
    /// Coherence matrix of one layer's subspace bases, as JSON.
    Coherence(CoherenceArgs),
    /// Compression-versus-denoising Monte Carlo on the mixture model.
    GmmVerify(GmmVerifyArgs),
    /// Run every registered gradient check.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint manifest to write; the blob goes next to it as `.bin` and
    /// the loss log as `.log.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// CRTD dataset; synthetic data from the config when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the training data as CRTD (useful for synthetic runs).
    #[arg(long)]
    pub save_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Supplies mask ratio, label smoothing, and synthetic data.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for evaluation masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LayerMetricsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Samples to average over; clamped to the dataset size.
    #[arg(long, default_value_t = DEFAULT_METRIC_SAMPLES)]
    pub samples: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Index of the input sample within the dataset.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CoherenceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OperatorArg {
    ExactGradient,
    Attention,
}

#[derive(Debug, Args)]
pub struct GmmVerifyArgs {
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub p: usize,
    #[arg(long = "K", default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 0.01)]
    pub sigma: f64,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = OperatorArg::ExactGradient)]
    pub operator: OperatorArg,
    /// Fixed quantization scale; defaults to ε = σ.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report; a plain-text summary always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code; diagnostics go to `stderr`.
pub fn run<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let sink: &mut dyn Write = if code == EXIT_OK { stdout } else { stderr };
            let _ = sink.write_all(rendered.as_bytes());
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command, stdout: &mut dyn Write) -> CliResult<i32> {
    match command {
        Command::Train(a) => cmd_train(&a, stdout),
        Command::Eval(a) => cmd_eval(&a, stdout),
        Command::LayerMetrics(a) => cmd_layer_metrics(&a, stdout),
        Command::Attn(a) => cmd_attn(&a, stdout),
        Command::Coherence(a) => cmd_coherence(&a, stdout),
        Command::GmmVerify(a) => cmd_gmm_verify(&a, stdout),
        Command::Gradcheck(a) => cmd_gradcheck(&a, stdout),
    }
}

fn read_config(path: &Path) -> CliResult<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn read_dataset(path: &Path) -> CliResult<Dataset> {
    Ok(Dataset::read_crtd(path)?)
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(crate_core::Error::from)?;
    s.push('\n');
    Ok(s)
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(crate_core::Error::from)?,
        None => stdout.write_all(text.as_bytes()).map_err(crate_core::Error::from)?,
    }
    Ok(())
}

/// Path of the loss log written next to a checkpoint manifest.
pub fn log_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("log.json")
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: String,
    pub parameters: usize,
    pub steps: usize,
    pub log: TrainLog,
}

fn cmd_train(a: &TrainArgs, stdout: &mut dyn Write) -> CliResult<i32> {
    let mut cfg = read_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let data = match &a.data {
        Some(p) => read_dataset(p)?,
        None => cfg.synthetic_dataset()?,
    };
    if let Some(p) = &a.save_data {
        data.write_crtd(p)?;
    }
    let outcome = train_any(&cfg, &data)?;
    checkpoint::save(&outcome.model, cfg.seed, &a.out)?;
    let summary = TrainSummary {
        checkpoint: a.out.display().to_string(),
        parameters: outcome.model.parameter_count(),
        steps: outcome.log.step_losses.len(),
        log: outcome.log,
    };
    let json = to_json(&summary)?;
    fs::write(log_path(&a.out), &json).map_err(crate_core::Error::from)?;
    writeln!(
        stdout,
        "trained {} steps, {} parameters -> {}",
        summary.steps,
        summary.parameters,
        a.out.display()
    )
    .map_err(crate_core::Error::from)?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: &EvalArgs, stdout: &mut dyn Write) -> CliResult<i32> {
    let (model, _) = checkpoint::load::<f64>(&a.checkpoint)?;
    let cfg = a.config.as_deref().map(read_config).transpose()?;
    let data = match (&a.data, &cfg) {
        (Some(p), _) => read_dataset(p)?,
        (None, Some(c)) => c.synthetic_dataset()?,
        (None, None) => return Err(CliError::Usage("eval needs --data or --config".into())),
    };
    let (mask_ratio, smoothing, masked_only) = cfg
        .as_ref()
        .map_or((0.75, 0.0, false), |c| (c.mask_ratio, c.label_smoothing, c.masked_only_loss));
    let metrics: EvalMetrics = evaluate(&model, &data, mask_ratio, smoothing, masked_only, a.seed)?;
    emit(a.out.as_deref(), &to_json(&metrics)?, stdout)?;
    Ok(EXIT_OK)
}

/// CSV with header `layer_index,rc_after_attention,sparsity_l0_fraction,l1_norm`.
pub fn layer_metrics_csv(rows: &[LayerMetricsRow]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Usage(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| CliError::Usage(format!("csv: {e}")))
}

pub fn parse_layer_metrics_csv(text: &str) -> CliResult<Vec<LayerMetricsRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("csv: {e}")))
}

fn cmd_layer_metrics(a: &LayerMetricsArgs, stdout: &mut dyn Write) -> CliResult<i32> {
    let (model, _) = checkpoint::load::<f64>(&a.checkpoint)?;
    let data = read_dataset(&a.data)?;
    let rows = layer_metrics(&model, &data, a.samples)?;
    emit(a.out.as_deref(), &layer_metrics_csv(&rows)?, stdout)?;
    Ok(EXIT_OK)
}

fn cmd_attn(a: &AttnArgs, stdout: &mut dyn Write) -> CliResult<i32> {
    let (model, _) = checkpoint::load::<f64>(&a.checkpoint)?;
    let data = read_dataset(&a.data)?;
    if a.sample >= data.len() {
        return Err(CliError::Usage(format!(
            "sample {} out of range ({} samples)",
            a.sample,
            data.len()
        )));
    }
    let record = attention_map(&model, data.sample(a.sample), a.layer, a.head)?;
    emit(a.out.as_deref(), &to_json(&record)?, stdout)?;
    Ok(EXIT_OK)
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceRecord {
    pub layer: usize,
    /// `pK` rows of `pK` entries.
    pub matrix: Vec<Vec<f64>>,
}

fn cmd_coherence(a: &CoherenceArgs, stdout: &mut dyn Write) -> CliResult<i32> {
    let (model, _) = checkpoint::load::<f64>(&a.checkpoint)?;
    let m = layer_coherence(&model, a.layer)?;
    let record = CoherenceRecord {
        layer: a.layer,
        matrix: (0..m.rows()).map(|r| m.row(r).to_vec()).collect(),
    };
    emit(a.out.as_deref(), &to_json(&record)?, stdout)?;
    Ok(EXIT_OK)
}

fn cmd_gmm_verify(a: &GmmVerifyArgs, stdout: &mut dyn Write) -> CliResult<i32> {
    let cfg = ExperimentConfig {
        d: a.d,
        n: a.n,
        p: a.p,
        k: a.k,
        sigma: a.sigma,
        trials: a.trials,
        seed: a.seed,
        operator: match a.operator {
            OperatorArg::ExactGradient => CompressionOperator::ExactGradient,
            OperatorArg::Attention => CompressionOperator::Attention,
        },
        epsilon_rule: a.epsilon.map_or(EpsilonRule::MatchNoise, EpsilonRule::Fixed),
    };
    let report = compression_denoising_experiment(&cfg)?;
    emit(a.out.as_deref(), &to_json(&report)?, stdout)?;
    if report.residual_decrease_fraction < GMM_GATE {
        return Err(CliError::Gate(format!(
            "residual decreased for {:.4} of tokens, below the {GMM_GATE} gate",
            report.residual_decrease_fraction
        )));
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs, stdout: &mut dyn Write) -> CliResult<i32> {
    let outcomes = run_checks(&default_registry(), a.seed)?;
    report_checks(&outcomes, stdout)?;
    if let Some(p) = &a.out {
        fs::write(p, to_json(&outcomes)?).map_err(crate_core::Error::from)?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(CliError::Gate(format!("{failed} gradient check(s) failed")));
    }
    Ok(EXIT_OK)
}

/// One line per check: status, name, measured value, tolerance.
pub fn report_checks(outcomes: &[CheckOutcome], out: &mut dyn Write) -> CliResult<()> {
    for o in outcomes {
        writeln!(
            out,
            "{} {:<42} {:.3e} (tol {:.0e})",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.measured,
            o.tolerance
        )
        .map_err(crate_core::Error::from)?;
    }
    Ok(())
}
