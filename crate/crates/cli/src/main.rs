//! `infuse`: runs the pipeline stage by stage, each stage reading and writing
//! files under one run directory.

mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use infuse_core::config::{parse_config, RunConfig, RESOLVED_CONFIG};

use crate::stages::CliError;

#[derive(Debug, Parser)]
#[command(name = "infuse", version, about = "Micro-expression AU detection pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config; defaults to the run directory's resolved config, if any.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (overrides `paths.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Gen,
    /// Compute optical-flow images for every sample.
    Flow(FlowArgs),
    /// Compute magnified inputs for every sample.
    Magnify(MagArgs),
    /// Train one model per leave-one-database-out fold.
    Train,
    /// Score the fold checkpoints and write the protocol report.
    Eval,
    /// Sweep magnification factors and fusion variants.
    Ablate(AblateArgs),
    /// Write class-activation heat maps for a few samples.
    Saliency(SaliencyArgs),
}

#[derive(Debug, Args)]
struct FlowArgs {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Debug, Args)]
struct MagArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
    /// Use decoded magnified frames instead of latent levels.
    #[arg(long)]
    decoded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Factors,
    Fusion,
    All,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Magnification factors to sweep (overrides `eval.factors`).
    #[arg(long, value_delimiter = ',')]
    factors: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "all")]
    sweep: Sweep,
}

#[derive(Debug, Args)]
struct SaliencyArgs {
    /// Number of samples, taken in manifest order.
    #[arg(long, default_value_t = 4)]
    count: usize,
}

/// Config precedence: `--config`, else the run directory's resolved config,
/// else defaults; command-line overrides go on top.
fn resolve(common: &Common, command: &Command) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => {
            let out = common.out.clone().unwrap_or_else(|| RunConfig::default().paths.out);
            let existing = out.join(RESOLVED_CONFIG);
            if existing.exists() {
                parse_config(&existing)?
            } else {
                RunConfig::default()
            }
        }
    };
    if let Some(out) = &common.out {
        cfg.paths.out = out.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    match command {
        Command::Flow(a) => {
            let f = &mut cfg.flow;
            f.lambda = a.lambda.unwrap_or(f.lambda);
            f.iters = a.iters.unwrap_or(f.iters);
            f.tol = a.tol.unwrap_or(f.tol);
            f.levels = a.levels.unwrap_or(f.levels);
        }
        Command::Magnify(a) => {
            let m = &mut cfg.magnify;
            m.alpha = a.alpha.unwrap_or(m.alpha);
            m.depth = a.depth.unwrap_or(m.depth);
            m.decoded |= a.decoded;
        }
        Command::Ablate(a) => {
            if let Some(f) = &a.factors {
                cfg.eval.factors = f.clone();
            }
        }
        _ => {}
    }
    cfg.validate()?;
    let out = cfg.paths.out.clone();
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cfg, out) = resolve(&cli.common, &cli.command)?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    cfg.persist(&out)?;
    let out: &Path = &out;
    match cli.command {
        Command::Gen => stages::gen(&cfg, out),
        Command::Flow(_) => stages::flow(&cfg, out),
        Command::Magnify(_) => stages::magnify(&cfg, out),
        Command::Train => stages::train(&cfg, out),
        Command::Eval => stages::eval(&cfg, out),
        Command::Ablate(a) => stages::ablate(&cfg, out, a.sweep),
        Command::Saliency(a) => stages::saliency(&cfg, out, a.count),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
