//! `empower`: landscapes, training runs and self-checks from JSON configs.
//!
//! Exit codes: 0 success, 1 oracle failure, 2 config error, 3 artifact or
//! run failure.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use empower_core::analytic::GVariant;
use empower_core::oracle::Suite;

#[derive(Debug, Parser)]
#[command(name = "empower", version, about = "Empowerment estimation through learned Gaussian channels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tabulate empowerment over the config's state grid.
    Landscape(LandscapeArgs),
    /// Run the empowerment-maximization loop and save model, policy and metrics.
    Train(TrainArgs),
    /// Compare fast routines against brute-force references.
    OracleCheck(OracleArgs),
    /// Train on the tunnel with the safety reward `1_goal + β·E` and report route usage.
    Safety(SafetyArgs),
    /// Evaluate a saved policy.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Run config (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output_dir` (default `out`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SourceArg {
    Analytic,
    Numeric,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    DerivationConsistent,
    AsPrinted,
}

impl From<VariantArg> for GVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::DerivationConsistent => GVariant::DerivationConsistent,
            VariantArg::AsPrinted => GVariant::AsPrinted,
        }
    }
}

#[derive(Debug, Args)]
struct LandscapeArgs {
    #[command(flatten)]
    common: Common,
    /// Where channel matrices come from.
    #[arg(long, value_enum)]
    source: SourceArg,
    /// Saved channel model; required with `--source learned`.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Analytic pendulum matrix variant.
    #[arg(long, value_enum, default_value = "derivation-consistent")]
    variant: VariantArg,
    /// Finite-difference step for `--source numeric`; defaults to the config's `policy.numeric_eps`.
    #[arg(long, value_name = "F64")]
    eps: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    Waterfill,
    Jacobian,
    Gradient,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Waterfill => Suite::Waterfill,
            SuiteArg::Jacobian => Suite::Jacobian,
            SuiteArg::Gradient => Suite::Gradient,
        }
    }
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long, value_enum)]
    suite: SuiteArg,
    /// Seed for the random instances.
    #[arg(long, value_name = "U64", default_value_t = 0)]
    seed: u64,
    /// Also write the report (and any failing instances) here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SafetyArgs {
    #[command(flatten)]
    common: Common,
    /// Weight of empowerment in the reward; must be ≥ 0.
    #[arg(long, value_name = "F64", allow_negative_numbers = true)]
    beta: f64,
    /// Number of evaluation episodes for the route statistics.
    #[arg(long, value_name = "N", default_value_t = 100)]
    episodes: usize,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Saved policy; defaults to `policy.params` in the output directory.
    #[arg(long, value_name = "PATH")]
    policy: Option<PathBuf>,
    /// Overrides the config's `policy.eval.episodes`.
    #[arg(long, value_name = "N")]
    episodes: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Landscape(a) => commands::landscape(&a),
        Command::Train(a) => commands::train(&a),
        Command::OracleCheck(a) => commands::oracle_check(&a),
        Command::Safety(a) => commands::safety(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
