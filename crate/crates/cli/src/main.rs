//! `snmm`: batch front end for simulation, g-estimation, derived quantities,
//! sensitivity analysis, optimal regimes and the acceptance suite.
//!
//! Every run writes a `manifest.json` that echoes its resolved configuration;
//! `snmm --config manifest.json` repeats the run.

mod commands;
mod config;
mod error;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};
use snmm::gestimation::Method;
use snmm::sensitivity::BiasFamily;

use crate::config::{
    parse_json, read_json, DgpSource, RunConfig, SensitivityConfig, SimulateConfig, Subcommand, VerifyConfig,
};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "snmm", version, about = "g-estimation of structural nested mean models")]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Re-run the configuration stored in a run manifest.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory for a re-run (default: the one in the manifest).
    #[arg(long, requires = "config")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(ClapSubcommand, Debug)]
enum Command {
    /// Simulate a panel from a gallery entry or a custom DGP.
    Simulate(SimulateArgs),
    /// Fit a coarse, standard or multiplicative model.
    Fit(FitArgs),
    /// Evaluate derived counterfactual quantities.
    Derive(DeriveArgs),
    /// Refit a coarse model over a grid of parallel-trends violations.
    Sensitivity(SensitivityArgs),
    /// Estimate an optimal regime and its value.
    Optimal(FitArgs),
    /// Run the acceptance suite.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Gallery entry name.
    #[arg(long, conflicts_with = "dgp_config", required_unless_present = "dgp_config")]
    dgp: Option<String>,
    /// JSON file with a custom DGP.
    #[arg(long)]
    dgp_config: Option<PathBuf>,
    /// Number of subjects.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Long-format panel CSV.
    #[arg(long)]
    data: PathBuf,
    /// JSON column mapping; canonical names when absent.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// JSON model spec.
    #[arg(long)]
    model: PathBuf,
    /// JSON nuisance spec; intercept-only models when absent.
    #[arg(long)]
    nuisance: Option<PathBuf>,
    /// closed-form, iterative or crossfit.
    #[arg(long, default_value = "closed-form")]
    method: String,
    /// Bootstrap replicates (0 for influence-function intervals).
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ridge added to the normalized estimating equations.
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DeriveArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// JSON array of queries.
    #[arg(long)]
    queries: PathBuf,
}

#[derive(Args, Debug)]
struct SensitivityArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// `constant`, `horizon_scaled`, or a JSON file with a bias family.
    #[arg(long, default_value = "constant")]
    family: String,
    /// Grid as `lo:hi:step` or a comma-separated list.
    #[arg(long)]
    grid: String,
    /// JSON array of derived quantities to track.
    #[arg(long)]
    targets: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Reduced replicates and sample sizes; verdicts are indicative only.
    #[arg(long)]
    quick: bool,
    /// Comma-separated criteria to run (default: all).
    #[arg(long, value_delimiter = ',')]
    criteria: Vec<usize>,
    #[arg(long, default_value = "verify-out")]
    out: PathBuf,
}

/// Bootstrap replicates used when `--bootstrap` is absent.
const DEFAULT_DERIVED_BOOTSTRAP: usize = 200;

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn fit_config(sub: Subcommand, a: &FitArgs, default_bootstrap: usize) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::new(sub, a.out.clone());
    cfg.data = Some(absolute(&a.data));
    cfg.schema = a.schema.as_deref().map(|p| read_json(p, "/schema")).transpose()?;
    cfg.model = Some(read_json(&a.model, "/model")?);
    cfg.nuisance = a.nuisance.as_deref().map(|p| read_json(p, "/nuisance")).transpose()?;
    cfg.method = a
        .method
        .parse::<Method>()
        .map_err(|e| match e {
            snmm::Error::Config(m) => CliError::config_at("/method", m),
            other => CliError::from(other),
        })?;
    cfg.bootstrap = a.bootstrap.unwrap_or(default_bootstrap);
    cfg.seed = a.seed;
    cfg.ridge = a.ridge;
    Ok(cfg)
}

fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = |m: &str| CliError::config_at("/sensitivity/grid", format!("{m}: `{s}`"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [lo, hi, step] => {
            let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
            if !(step > 0.0) || hi < lo {
                return Err(bad("need lo <= hi and a positive step"));
            }
            let n = ((hi - lo) / step + 1e-9).floor() as usize;
            if n > 100_000 {
                return Err(bad("grid too fine"));
            }
            Ok((0..=n).map(|i| lo + i as f64 * step).collect())
        }
        [_] => s.split(',').map(num).collect(),
        _ => Err(bad("expected lo:hi:step or a comma-separated list")),
    }
}

fn parse_family(s: &str) -> Result<BiasFamily, CliError> {
    match s {
        "constant" | "horizon_scaled" => parse_json(&format!(r#"{{"family":"{s}"}}"#), "/sensitivity/family"),
        path => read_json(Path::new(path), "/sensitivity/family"),
    }
}

fn build_config(cmd: Command) -> Result<RunConfig, CliError> {
    Ok(match cmd {
        Command::Simulate(a) => {
            let dgp = match (a.dgp, a.dgp_config) {
                (Some(name), _) => DgpSource::Gallery { name },
                (None, Some(p)) => DgpSource::Custom {
                    config: read_json(&p, "/simulate/dgp/config")?,
                },
                (None, None) => unreachable!("clap requires one of them"),
            };
            let mut cfg = RunConfig::new(Subcommand::Simulate, a.out);
            cfg.seed = a.seed;
            cfg.simulate = Some(SimulateConfig { dgp, n: a.n });
            cfg
        }
        Command::Fit(a) => fit_config(Subcommand::Fit, &a, 0)?,
        Command::Optimal(a) => fit_config(Subcommand::Optimal, &a, DEFAULT_DERIVED_BOOTSTRAP)?,
        Command::Derive(a) => {
            let mut cfg = fit_config(Subcommand::Derive, &a.fit, DEFAULT_DERIVED_BOOTSTRAP)?;
            cfg.queries = read_json(&a.queries, "/queries")?;
            cfg
        }
        Command::Sensitivity(a) => {
            let mut cfg = fit_config(Subcommand::Sensitivity, &a.fit, 0)?;
            cfg.sensitivity = Some(SensitivityConfig {
                family: parse_family(&a.family)?,
                grid: parse_grid(&a.grid)?,
                targets: a
                    .targets
                    .as_deref()
                    .map(|p| read_json(p, "/sensitivity/targets"))
                    .transpose()?
                    .unwrap_or_default(),
            });
            cfg
        }
        Command::Verify(a) => {
            let mut cfg = RunConfig::new(Subcommand::Verify, a.out);
            cfg.verify = Some(VerifyConfig {
                quick: a.quick,
                criteria: a.criteria,
            });
            cfg
        }
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    let cfg = match (cli.config, cli.command) {
        (Some(path), _) => {
            let mut cfg = config::load_manifest(&path)?;
            if let Some(out) = cli.out {
                cfg.out = out;
            }
            cfg
        }
        (None, Some(cmd)) => build_config(cmd)?,
        (None, None) => return Err(CliError::config("a subcommand or --config is required")),
    };
    commands::execute(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("-0.1:0.1:0.1").unwrap().len(), 3);
        assert_eq!(parse_grid("0.5, -1").unwrap(), vec![0.5, -1.0]);
        assert_eq!(parse_grid("1:0:0.1").unwrap_err().code, 2);
        assert_eq!(parse_grid("a,b").unwrap_err().code, 2);
    }

    #[test]
    fn builtin_families() {
        assert_eq!(parse_family("constant").unwrap(), BiasFamily::Constant);
        assert_eq!(parse_family("horizon_scaled").unwrap(), BiasFamily::HorizonScaled);
        assert_eq!(parse_family("/no/such/file.json").unwrap_err().code, 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
