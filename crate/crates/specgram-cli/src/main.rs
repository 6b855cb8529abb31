#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod error;
mod expr;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use specgram::detequiv::SolverOptions;
use specgram::fluct::{AReading, QuadratureRule, DEFAULT_NODES_PER_EDGE};
use specgram::mimo::{Alternative, EqualityTestOptions, VarianceEstimator};
use specgram::profile::Regime;

use commands::{CltArgs, EqualityArgs, OutageArgs, QuadraticFormArgs};
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "specgram", version, about = "Spectral fluctuations of sparse Gram matrices with a variance profile")]
struct Cli {
    /// Worker threads (overrides SPECGRAM_THREADS); results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Density of the deterministic-equivalent measure on a grid.
    Lsd {
        #[arg(long)]
        profile: PathBuf,
        /// a:b:m, m equally spaced points.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 1e-3)]
        eta: f64,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CLT mean and covariance of linear spectral statistics.
    Clt {
        #[arg(long)]
        profile: PathBuf,
        /// x, x2, zero or log1p_scaled:<sigma2>.
        #[arg(long)]
        f: String,
        /// Second test function of the covariance; defaults to f.
        #[arg(long)]
        g: Option<String>,
        #[arg(long, value_enum, default_value_t = RegimeArg::Moderate)]
        regime: RegimeArg,
        /// A number or an expression in n, e.g. "0.5*sqrt(n)".
        #[arg(long)]
        q: String,
        #[arg(long, default_value = "real_gaussian")]
        model: String,
        #[arg(long, default_value_t = DEFAULT_NODES_PER_EDGE)]
        nodes: usize,
        #[arg(long, value_enum, default_value_t = RuleArg::GaussLegendre)]
        rule: RuleArg,
        #[arg(long, value_enum, default_value_t = AReadingArg::AsPrinted)]
        a_reading: AReadingArg,
        /// Skip the coarser-node re-evaluation.
        #[arg(long)]
        no_convergence_check: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo battery described by a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Per-replication CSV; the summary goes to <out>.summary.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trace test of equal fading matrices.
    TestEquality {
        #[arg(long, required_unless_present = "replay")]
        h1: Option<PathBuf>,
        #[arg(long, required_unless_present = "replay")]
        h2: Option<PathBuf>,
        #[arg(long)]
        h1_imag: Option<PathBuf>,
        #[arg(long)]
        h2_imag: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Standardized fourth moment of the fading entries.
        #[arg(long, default_value_t = 2.0)]
        nu4: f64,
        #[arg(long, value_enum, default_value_t = AlternativeArg::Greater)]
        alternative: AlternativeArg,
        #[arg(long, value_enum, default_value_t = EstimatorArg::Consistent)]
        estimator: EstimatorArg,
        #[arg(long)]
        known_s: Option<f64>,
        #[arg(long)]
        known_sigma2: Option<f64>,
        /// JSON replay config; simulates the rejection rate instead of testing two files.
        #[arg(long, conflicts_with_all = ["h1", "h2"])]
        replay: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gaussian outage curves of the mutual information.
    Outage {
        #[arg(long)]
        d: PathBuf,
        #[arg(long)]
        dt: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        snr_db: Vec<f64>,
        #[arg(long)]
        rate_grid: String,
        #[arg(long)]
        q: String,
        #[arg(long, default_value = "complex_gaussian")]
        model: String,
        /// Adds an empirical column from this many simulated channels.
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo and closed-form checks of the covariance machinery.
    Oracle {
        #[command(subcommand)]
        which: OracleCommand,
    },
}

#[derive(Subcommand, Debug)]
enum OracleCommand {
    /// Covariance of two quadratic forms, simulated against the closed form.
    QuadraticForm {
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value = "real_gaussian")]
        model: String,
        #[arg(long, default_value_t = 0.5)]
        s: f64,
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contour covariance of f(x) = x against its closed form.
    TraceAnchor {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        q: String,
        #[arg(long, value_enum, default_value_t = RegimeArg::Moderate)]
        regime: RegimeArg,
        #[arg(long, default_value = "real_gaussian")]
        model: String,
        #[arg(long, default_value_t = DEFAULT_NODES_PER_EDGE)]
        nodes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum RegimeArg {
    Moderate,
    High,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Moderate => Regime::Moderate,
            RegimeArg::High => Regime::High,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum RuleArg {
    GaussLegendre,
    Midpoint,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AReadingArg {
    AsPrinted,
    Symmetric,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AlternativeArg {
    Greater,
    TwoSided,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EstimatorArg {
    Consistent,
    Printed,
}

fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let threads = match flag {
        Some(t) => Some(t),
        None => match std::env::var("SPECGRAM_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("SPECGRAM_THREADS must be a positive integer, got '{v}'")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Config("thread count must be positive".into()));
        }
        specgram::par::set_threads(t);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Lsd { profile, grid, eta, tol, out } => {
            let solver = SolverOptions { tol, ..SolverOptions::default() };
            commands::lsd(&profile, &grid, eta, solver, out.as_deref())
        }
        Command::Clt { profile, f, g, regime, q, model, nodes, rule, a_reading, no_convergence_check, out } => {
            commands::clt(CltArgs {
                profile: &profile,
                f: &f,
                g: g.as_deref(),
                regime: regime.into(),
                q: &q,
                model: &model,
                nodes,
                rule: match rule {
                    RuleArg::GaussLegendre => QuadratureRule::GaussLegendre,
                    RuleArg::Midpoint => QuadratureRule::Midpoint,
                },
                a_reading: match a_reading {
                    AReadingArg::AsPrinted => AReading::AsPrinted,
                    AReadingArg::Symmetric => AReading::Symmetric,
                },
                convergence_check: !no_convergence_check,
                out: out.as_deref(),
            })
        }
        Command::Simulate { config, out } => commands::simulate(&config, &out),
        Command::TestEquality {
            h1,
            h2,
            h1_imag,
            h2_imag,
            alpha,
            nu4,
            alternative,
            estimator,
            known_s,
            known_sigma2,
            replay,
            out,
        } => {
            if let Some(path) = replay {
                return commands::test_equality_replay(&path, out.as_deref());
            }
            let (Some(h1), Some(h2)) = (h1, h2) else {
                return Err(CliError::Config("--h1 and --h2 are required without --replay".into()));
            };
            let mut opts = EqualityTestOptions::new(alpha, nu4).with_alternative(match alternative {
                AlternativeArg::Greater => Alternative::Greater,
                AlternativeArg::TwoSided => Alternative::TwoSided,
            });
            opts.estimator = match estimator {
                EstimatorArg::Consistent => VarianceEstimator::Consistent,
                EstimatorArg::Printed => VarianceEstimator::Printed,
            };
            opts.known_s = known_s;
            opts.known_sigma2 = known_sigma2;
            commands::test_equality(EqualityArgs {
                h1: &h1,
                h2: &h2,
                h1_imag: h1_imag.as_deref(),
                h2_imag: h2_imag.as_deref(),
                opts,
                out: out.as_deref(),
            })
        }
        Command::Outage { d, dt, snr_db, rate_grid, q, model, reps, seed, out } => commands::outage(OutageArgs {
            d: &d,
            dt: &dt,
            snr_db: &snr_db,
            rate_grid: &rate_grid,
            q: &q,
            model: &model,
            reps,
            seed,
            out: out.as_deref(),
        }),
        Command::Oracle { which } => match which {
            OracleCommand::QuadraticForm { dim, model, s, reps, seed, out } => {
                commands::oracle_quadratic_form(QuadraticFormArgs { dim, model: &model, s, reps, seed, out: out.as_deref() })
            }
            OracleCommand::TraceAnchor { profile, q, regime, model, nodes, out } => {
                commands::oracle_trace_anchor(&profile, &q, regime.into(), &model, nodes, out.as_deref())
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({
                "error": { "kind": err.kind(), "message": err.to_string(), "exit_code": err.exit_code() }
            });
            eprintln!("{record}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
