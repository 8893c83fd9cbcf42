//! The `hgprompt` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure. Diagnostics go to stderr; data to stdout or `--out`.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::alignment::{alignment_loss, cosine_similarity_matrix, ensemble_gradient, NormMode, DEFAULT_DEGENERACY_FLOOR};
use crate::bundle::{inspect_bundle, read_bundle, write_bundle, BundleError, PromptBundle};
use crate::ensemble::{fuse_features, PromptRole, PromptTensor, SimplexWeights};
use crate::error::Error;
use crate::exec::Exec;
use crate::format::{csv_line, csv_row, g17, KeyValue};
use crate::harness::{Preset, Scenario, ScenarioConfig, DEFAULT_SAMPLES};
use crate::linalg::default_ridge;
use crate::optimizer::{optimize_weights, sweep_lambda, OptimizationTrace, OptimizerConfig, Ridge};
use crate::transferability::{h_score, CrossCovarianceCache};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hgprompt", version, about = "Multi-source prompt transfer: score, align and optimize ensemble weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check every bundle invariant; violations are printed one per line.
    Validate {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Print the H-score of the features fused with --alpha.
    Hscore {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        alpha: String,
        /// Ridge added to the total covariance, or "auto".
        #[arg(long, default_value = "auto")]
        ridge: String,
    },
    /// Print the alignment loss and per-source cosines at --alpha.
    Align {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        alpha: String,
        /// Fail on a degenerate consensus gradient instead of flooring its norm.
        #[arg(long)]
        strict: bool,
    },
    /// Write the matrix of pairwise gradient cosines as CSV.
    Gradsim {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize the ensemble weights.
    Optimize {
        #[command(flatten)]
        opt: OptimizerArgs,
        /// Per-epoch CSV of the chosen restart.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Final weights as a one-row CSV.
        #[arg(long)]
        out_weights: Option<PathBuf>,
    },
    /// Optimize once per lambda and tabulate the results.
    SweepLambda {
        #[command(flatten)]
        opt: OptimizerArgs,
        #[arg(long, default_value = "0.1,0.5,1,2,5,10")]
        lambdas: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the features fused with --alpha as a single-source bundle.
    Fuse {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        alpha: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the target prompt built from --alpha as a single-source bundle.
    ExportPrompt {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        alpha: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic bundle.
    Synth {
        #[arg(long, value_parser = ["related", "unrelated", "one-informative"])]
        preset: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        sources: usize,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
    },
}

#[derive(Debug, Args)]
struct OptimizerArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    /// Fixed ridge, or "auto" for a scale-adaptive one.
    #[arg(long, default_value = "auto")]
    ridge: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else if matches!(e, Error::InvalidConfig(_) | Error::InvalidWeights(_)) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

impl From<BundleError> for Failure {
    fn from(e: BundleError) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Parses arguments (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(f) = configure_threads() {
        eprintln!("error: {f}");
        return f.code();
    }
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

/// Caps the worker pool at `HGP_THREADS` when set.
fn configure_threads() -> CliResult {
    let Ok(value) = std::env::var("HGP_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("HGP_THREADS must be a positive integer, got {value:?}")))?;
    #[cfg(feature = "parallel")]
    {
        // a pool may already exist when run() is called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Validate { bundle } => validate(&bundle),
        Command::Hscore { bundle, alpha, ridge } => hscore(&bundle, &alpha, &ridge),
        Command::Align { bundle, alpha, strict } => align(&bundle, &alpha, strict),
        Command::Gradsim { bundle, out } => gradsim(&bundle, &out),
        Command::Optimize { opt, trace, out_weights } => optimize(&opt, trace.as_deref(), out_weights.as_deref()),
        Command::SweepLambda { opt, lambdas, out } => sweep(&opt, &lambdas, &out),
        Command::Fuse { bundle, alpha, out } => fuse(&bundle, &alpha, &out, false),
        Command::ExportPrompt { bundle, alpha, out } => fuse(&bundle, &alpha, &out, true),
        Command::Synth {
            preset,
            seed,
            out,
            sources,
            samples,
        } => synth(&preset, seed, &out, sources, samples),
    }
}

fn parse_list(flag: &str, text: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Failure::Usage(format!("--{flag}: {s:?} is not a finite number")))
        })
        .collect()
}

fn parse_alpha(text: &str, bundle: &PromptBundle) -> CliResult<SimplexWeights> {
    let values = parse_list("alpha", text)?;
    if values.len() != bundle.source_count() {
        return Err(Failure::Usage(format!(
            "--alpha has {} weights but the bundle has {} sources",
            values.len(),
            bundle.source_count()
        )));
    }
    SimplexWeights::new(values).map_err(|e| Failure::Usage(format!("--alpha: {e}")))
}

fn parse_ridge(text: &str) -> CliResult<Ridge> {
    if text == "auto" {
        return Ok(Ridge::Auto);
    }
    match text.parse::<f64>() {
        Ok(r) if r >= 0.0 && r.is_finite() => Ok(Ridge::Fixed(r)),
        _ => Err(Failure::Usage(format!("--ridge: expected \"auto\" or a nonnegative number, got {text:?}"))),
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    std::fs::write(path, contents).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

fn validate(path: &Path) -> CliResult {
    let inspection = inspect_bundle(path)?;
    if inspection.violations.is_empty() {
        eprintln!("valid");
        return Ok(());
    }
    for v in &inspection.violations {
        println!("{v}");
    }
    Err(Failure::Data(format!("invalid: {} violation(s)", inspection.violations.len())))
}

fn hscore(path: &Path, alpha: &str, ridge: &str) -> CliResult {
    let ridge = parse_ridge(ridge)?;
    let bundle = read_bundle(path)?;
    let alpha = parse_alpha(alpha, &bundle)?;
    let cache = CrossCovarianceCache::build(&bundle.labeled_features()?)?;
    let ridge = match ridge {
        Ridge::Fixed(r) => r,
        Ridge::Auto => default_ridge(&cache.fused_covariances(&alpha)?.0),
    };
    println!("{}", g17(h_score(&cache, &alpha, ridge)?.value));
    Ok(())
}

fn align(path: &Path, alpha: &str, strict: bool) -> CliResult {
    let bundle = read_bundle(path)?;
    let alpha = parse_alpha(alpha, &bundle)?;
    let set = bundle.gradient_set(DEFAULT_DEGENERACY_FLOOR)?;
    let mode = if strict { NormMode::Strict } else { NormMode::Guarded };
    let report = alignment_loss(&set, &alpha, DEFAULT_DEGENERACY_FLOOR, mode)?;
    let mut kv = KeyValue::new();
    kv.float("align_loss", report.loss)
        .float("ensemble_norm", report.ensemble_norm)
        .text("floored", report.floored)
        .floats("cosines", &report.cosines);
    print!("{}", kv.finish());
    if report.floored {
        eprintln!("warning: consensus gradient norm below {DEFAULT_DEGENERACY_FLOOR:e}; floor applied");
    }
    Ok(())
}

fn gradsim(path: &Path, out: &Path) -> CliResult {
    let bundle = read_bundle(path)?;
    let set = bundle.gradient_set(DEFAULT_DEGENERACY_FLOOR)?;
    let cos = cosine_similarity_matrix(&set, Exec::default());
    let csv: String = (0..cos.rows()).map(|r| csv_row(cos.row(r))).collect();
    write_file(out, &csv)
}

fn optimizer_config(args: &OptimizerArgs) -> CliResult<OptimizerConfig> {
    let cfg = OptimizerConfig {
        learning_rate: args.lr,
        lambda: args.lambda,
        epochs: args.epochs,
        ridge: parse_ridge(&args.ridge)?,
        restarts: args.restarts,
        seed: args.seed,
        ..OptimizerConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn weight_header(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("alpha_{i}")).collect()
}

fn trace_csv(trace: &OptimizationTrace) -> String {
    let m = trace.final_alpha().len();
    let mut header = vec!["epoch".to_string()];
    header.extend(weight_header(m));
    header.extend(["h_score", "align_loss", "loss"].map(String::from));
    let mut out = csv_line(&header);
    for r in trace.records() {
        let mut fields = vec![r.epoch.to_string()];
        fields.extend(r.alpha.iter().map(|a| g17(*a)));
        fields.extend([r.h_score, r.alignment, r.loss].map(g17));
        out.push_str(&csv_line(&fields));
    }
    out
}

fn optimize(args: &OptimizerArgs, trace_path: Option<&Path>, weights_path: Option<&Path>) -> CliResult {
    let cfg = optimizer_config(args)?;
    let bundle = read_bundle(&args.bundle)?;
    let trace = optimize_weights(&bundle, &cfg)?;
    let last = trace.best().last();
    let mut kv = KeyValue::new();
    kv.floats("alpha", trace.final_alpha())
        .float("loss", last.loss)
        .float("h_score", last.h_score)
        .float("align_loss", last.alignment)
        .float("lambda", trace.lambda)
        .float("ridge", trace.ridge)
        .text("restart", trace.chosen)
        .text("epochs", last.epoch)
        .text("termination", trace.termination().as_str());
    print!("{}", kv.finish());
    if !trace.failed_restarts.is_empty() {
        eprintln!("warning: restarts {:?} failed", trace.failed_restarts);
    }
    if let Some(p) = trace_path {
        write_file(p, &trace_csv(&trace))?;
    }
    if let Some(p) = weights_path {
        write_file(p, &csv_row(trace.final_alpha()))?;
    }
    Ok(())
}

fn sweep(args: &OptimizerArgs, lambdas: &str, out: &Path) -> CliResult {
    let cfg = optimizer_config(args)?;
    let lambdas = parse_list("lambdas", lambdas)?;
    if let Some(l) = lambdas.iter().find(|l| **l < 0.0) {
        return Err(Failure::Usage(format!("--lambdas: {l} is negative")));
    }
    let bundle = read_bundle(&args.bundle)?;
    let results = sweep_lambda(&bundle, &cfg, &lambdas)?;
    let m = bundle.source_count();
    let mut header = vec!["lambda".to_string(), "status".to_string()];
    header.extend(weight_header(m));
    header.extend(["h_score", "align_loss", "loss", "termination"].map(String::from));
    let mut csv = csv_line(&header);
    let mut failures = 0;
    for (lambda, result) in &results {
        let mut fields = vec![g17(*lambda)];
        match result {
            Ok(trace) => {
                let last = trace.best().last();
                fields.push("ok".into());
                fields.extend(last.alpha.iter().map(|a| g17(*a)));
                fields.extend([last.h_score, last.alignment, last.loss].map(g17));
                fields.push(trace.termination().as_str().into());
            }
            Err(e) => {
                failures += 1;
                eprintln!("warning: lambda {} failed: {e}", g17(*lambda));
                fields.push("failed".into());
                fields.extend(std::iter::repeat_n(String::new(), m + 4));
            }
        }
        csv.push_str(&csv_line(&fields));
    }
    write_file(out, &csv)?;
    if failures == results.len() {
        let message = format!("all {failures} lambda entries failed");
        let numerical = results.iter().any(|(_, r)| r.as_ref().is_err_and(Error::is_numerical));
        return Err(if numerical { Failure::Numerical(message) } else { Failure::Data(message) });
    }
    Ok(())
}

fn fuse(path: &Path, alpha: &str, out: &Path, prompt_required: bool) -> CliResult {
    let bundle = read_bundle(path)?;
    let alpha = parse_alpha(alpha, &bundle)?;
    if prompt_required && bundle.prompts.is_none() {
        return Err(Failure::Data(format!("{} carries no prompts to export", path.display())));
    }
    let features = fuse_features(&bundle.features, &alpha)?;
    let set = bundle.gradient_set(DEFAULT_DEGENERACY_FLOOR)?;
    let gradient = ensemble_gradient(&set, &alpha)?;
    let prompts = match &bundle.prompts {
        None => None,
        Some(ps) => {
            let tensors = ps
                .iter()
                .enumerate()
                .map(|(i, p)| PromptTensor::new(p.clone(), PromptRole::Source(i)))
                .collect::<Result<Vec<_>, _>>()?;
            Some(vec![crate::ensemble::build_target_prompt(&tensors, &alpha)?.tokens])
        }
    };
    let weights = alpha.iter().map(|a| g17(*a)).collect::<Vec<_>>().join(",");
    let fused = PromptBundle {
        labels: bundle.labels.clone(),
        class_count: bundle.class_count,
        features: vec![features],
        gradients: vec![gradient],
        prompts,
        provenance: format!("fused alpha={weights} from {}", bundle.provenance),
        seed: bundle.seed,
    };
    write_bundle(&fused, out)?;
    Ok(())
}

fn synth(preset: &str, seed: u64, out: &Path, sources: usize, samples: usize) -> CliResult {
    let preset = Preset::parse(preset).ok_or_else(|| Failure::Usage(format!("unknown preset {preset:?}")))?;
    if samples < 2 {
        return Err(Failure::Usage("--samples must be at least 2".into()));
    }
    let cfg = ScenarioConfig {
        sources,
        samples,
        ..ScenarioConfig::default()
    };
    let scenario = Scenario::build(preset, seed, &cfg, Exec::default())?;
    write_bundle(&scenario.bundle, out)?;
    eprintln!(
        "wrote {} sources, {} samples to {}",
        scenario.bundle.source_count(),
        scenario.bundle.sample_count(),
        out.display()
    );
    Ok(())
}
