//! `kqsvd` subcommands.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use kqsvd_core::cachestore::{gen_synthetic, Dtype, Manifest, SynthConfig};
use kqsvd_core::compress::Method;

use crate::bundle::{read_bundle, write_bundle};
use crate::error::CliError;
use crate::experiment::{self, Theorem};
use crate::format::write_file;
use crate::plans::{read_plans, write_plans, RankSpec};

pub const THREADS_ENV: &str = "KQSVD_THREADS";

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "kqsvd", version, args_override_self = true, about = "Low-rank KV-cache projections: calibrate, evaluate, verify")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cache bundle.
    Gen(GenArgs),
    /// Learn per-(layer, KV head) plans from a training bundle.
    Calibrate(CalibrateArgs),
    /// Score plan directories on an evaluation bundle and write a CSV.
    Evaluate(EvaluateArgs),
    /// Recalibrate and evaluate every method under paired K/Q rescaling.
    SweepUnbalance(SweepArgs),
    /// Check a theorem's identities on seeded random instances.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub query_heads: usize,
    /// Defaults to the number of query heads.
    #[arg(long)]
    pub kv_heads: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub head_dim: usize,
    /// Defaults to query_heads * head_dim.
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub sequences: usize,
    /// Intrinsic rank of every cache; defaults to head_dim.
    #[arg(long, value_parser = positive)]
    pub rank: Option<usize>,
    #[arg(long, default_value_t = 0.8)]
    pub decay: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.3)]
    pub qk_correlation: f64,
    /// Top singular value of each cache; defaults to a level giving
    /// attention logits of order one.
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub first_sequence: usize,
    #[arg(long, default_value_t = Dtype::F32)]
    pub dtype: Dtype,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl GenArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            layers: self.layers,
            query_heads: self.query_heads,
            kv_heads: self.kv_heads.unwrap_or(self.query_heads),
            head_dim: self.head_dim,
            model_dim: self
                .model_dim
                .unwrap_or(self.query_heads.saturating_mul(self.head_dim)),
            tokens: self.tokens,
            sequences: self.sequences,
            intrinsic_rank: self.rank.unwrap_or(self.head_dim),
            spectral_decay: self.decay,
            noise_level: self.noise,
            qk_correlation: self.qk_correlation,
            seed: self.seed,
            amplitude: self.amplitude,
            first_sequence: self.first_sequence,
            dtype: self.dtype,
        }
    }
}

#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct RankArgs {
    /// Discarded spectral-energy fraction used to pick per-layer ranks
    /// (default 0.1).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Fixed rank for every layer.
    #[arg(long, value_parser = positive)]
    pub rank: Option<usize>,
}

impl RankArgs {
    pub fn spec(&self) -> Result<RankSpec, CliError> {
        match (self.epsilon, self.rank) {
            (_, Some(r)) => Ok(RankSpec::Rank(r)),
            (Some(e), None) if !(0.0..1.0).contains(&e) => Err(CliError::Usage(format!(
                "--epsilon must lie in [0, 1), got {e}"
            ))),
            (Some(e), None) => Ok(RankSpec::Epsilon(e)),
            (None, None) => Ok(RankSpec::Epsilon(0.1)),
        }
    }
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub method: Method,
    #[command(flatten)]
    pub ranks: RankArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub eval: PathBuf,
    /// Plan directory; repeat to compare methods at shared ranks.
    #[arg(long, required = true)]
    pub plans: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate attention without the causal mask.
    #[arg(long)]
    pub no_causal: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub eval: PathBuf,
    /// Calibration bundle; defaults to the evaluation bundle.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 5.0, 10.0])]
    pub betas: Vec<f64>,
    #[command(flatten)]
    pub ranks: RankArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_causal: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    pub theorem: Theorem,
    #[arg(long, default_value_t = 50, value_parser = positive)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn manifest_summary(dir: &Path, m: &Manifest) -> String {
    format!(
        "{}: model {} L={} h={} g={} d={} D={} T={} n_seq={} dtype={} seed={}",
        dir.display(),
        m.model,
        m.layers,
        m.query_heads,
        m.kv_heads,
        m.head_dim,
        m.model_dim,
        m.tokens,
        m.sequences,
        m.dtype,
        m.seed.map_or_else(|| "-".into(), |s| s.to_string()),
    )
}

fn write_report(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    Ok(write_file(path, text.as_bytes())?)
}

fn cmd_gen(args: &GenArgs) -> Result<(), CliError> {
    let bundle = gen_synthetic(&args.config()).map_err(|e| CliError::Usage(e.to_string()))?;
    write_bundle(&bundle, &args.out)?;
    println!("wrote {}", manifest_summary(&args.out, bundle.manifest()));
    Ok(())
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<(), CliError> {
    let ranks = args.ranks.spec()?;
    let bundle = read_bundle(&args.train)?;
    let set = experiment::calibrate(&bundle, args.method, ranks, args.seed)?;
    write_plans(&set, &args.out)?;
    let ranks: Vec<String> = set
        .layer_ranks()
        .iter()
        .map(|(k, v)| format!("{k}/{v}"))
        .collect();
    println!(
        "wrote {} plans to {} (rank_k/rank_v per layer: {})",
        set.method,
        args.out.display(),
        ranks.join(" ")
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let bundle = read_bundle(&args.eval)?;
    let sets = args
        .plans
        .iter()
        .map(|p| read_plans(p))
        .collect::<Result<Vec<_>, _>>()?;
    let ev = experiment::evaluate(&bundle, &sets, !args.no_causal)?;
    write_report(&args.out, &ev.to_csv())?;
    for m in &ev.methods {
        let row = ev.mean(*m).expect("mean row");
        println!(
            "{m}: mean err_KQT {:.4e}, err_out {:.4e}",
            row.err_kqt(),
            row.err_out()
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let ranks = args.ranks.spec()?;
    if let Some(b) = args.betas.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
        return Err(CliError::Usage(format!("β must be positive and finite, got {b}")));
    }
    let eval = read_bundle(&args.eval)?;
    let train = args.train.as_deref().map(read_bundle).transpose()?;
    let sweep = experiment::sweep_unbalance(
        train.as_ref().unwrap_or(&eval),
        &eval,
        &args.betas,
        &Method::ALL,
        ranks,
        !args.no_causal,
        args.seed,
    )?;
    write_report(&args.out, &sweep.to_csv())?;
    for (beta, dist) in &sweep.eigen_ksvd_distance {
        println!("beta {beta}: max ‖P_eigen - P_ksvd‖_F = {dist:.3e}");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let report = experiment::verify(args.theorem, args.seed, args.trials)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{:?}: invariant violated", args.theorem)))
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::SweepUnbalance(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Some(raw) = std::env::var_os(THREADS_ENV) else {
        return Ok(());
    };
    let n = raw
        .to_str()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer")))?;
    // A pool that is already configured is left alone.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Renders a parse error followed by the usage line of the subcommand it
/// concerns.
fn usage_error(e: clap::Error, args: &[OsString]) -> String {
    let mut text = e.render().to_string();
    if text.contains("Usage:") {
        return text;
    }
    let mut cmd = Cli::command();
    cmd.build();
    let sub = args
        .iter()
        .skip(1)
        .filter_map(|a| a.to_str())
        .find(|a| cmd.find_subcommand(a).is_some())
        .map(str::to_owned);
    let usage = match sub {
        Some(name) => cmd
            .find_subcommand_mut(&name)
            .expect("found above")
            .render_usage(),
        None => cmd.render_usage(),
    };
    text.push_str(&format!("\n{usage}\n"));
    text
}

/// Parses `args`, runs the command and maps failures to exit codes.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{}", usage_error(e, &args));
            return ExitCode::from(1);
        }
    };
    match configure_threads().and_then(|()| execute(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
