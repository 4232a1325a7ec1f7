//! Batch experiment runner behind the `atg run` subcommand.
//!
//! Flags override values from an optional JSON config file (flat object,
//! kebab-case keys matching the flags); unknown file keys are rejected. Each
//! run writes `<out>.csv` with one row per level and `<out>.gp.dat` with the
//! `k n_dofs h1_semi_err eta` columns for plotting. On a mid-run solver
//! failure the partial CSV is still written and the process exits with
//! status 2.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use crate::algorithms::{run, Algorithm, ConvergenceHistory, RunConfig, RunError, ALGORITHM_NAMES};
use crate::mesh::write_mesh;
use crate::problems::{by_name, PROBLEM_NAMES};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Run(#[from] RunError),
}

/// Flags of `atg run`.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct RunArgs {
    /// Problem id: test1, test2 or linear-nonspd.
    #[arg(long)]
    pub problem: Option<String>,
    /// Algorithm id, e.g. atg-mild or regular-adaptive.
    #[arg(long)]
    pub algorithm: Option<String>,
    /// Doerfler bulk fraction in (0, 1).
    #[arg(long)]
    pub theta: Option<f64>,
    /// Subdivisions per side of the initial uniform mesh.
    #[arg(long = "initial-n")]
    pub initial_n: Option<usize>,
    /// Number of refinement steps.
    #[arg(long = "max-levels")]
    pub max_levels: Option<usize>,
    /// Stop refining once this many dofs are reached.
    #[arg(long = "max-dofs")]
    pub max_dofs: Option<usize>,
    /// Geometric weight of the higher-order term sums, in (0, 1).
    #[arg(long = "zeta-tilde")]
    pub zeta_tilde: Option<f64>,
    /// Relative solver tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Seed recorded with the run (the drivers are deterministic).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output basename; writes <out>.csv and <out>.gp.dat.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write <out>.level<k>.mesh files.
    #[arg(long = "dump-meshes")]
    pub dump_meshes: bool,
    /// Print one line per level while running.
    #[arg(long, short)]
    pub verbose: bool,
}

/// JSON config file schema: the same keys as the flags, kebab-case.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct ConfigFile {
    problem: Option<String>,
    algorithm: Option<String>,
    theta: Option<f64>,
    initial_n: Option<usize>,
    max_levels: Option<usize>,
    max_dofs: Option<usize>,
    zeta_tilde: Option<f64>,
    tol: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    dump_meshes: Option<bool>,
}

/// Fully resolved configuration of one experiment.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub run: RunConfig,
    pub out: PathBuf,
    pub dump_meshes: bool,
    pub verbose: bool,
}

/// Merge flags over the optional config file and defaults, then validate.
pub fn parse_config(args: &RunArgs) -> Result<CliConfig, CliError> {
    let file: ConfigFile = match &args.config {
        None => ConfigFile::default(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|source| CliError::Io { path: path.clone(), source })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?
        }
    };

    let problem = args
        .problem
        .clone()
        .or(file.problem)
        .ok_or_else(|| CliError::Usage(usage_hint("missing --problem")))?;
    if by_name(&problem).is_none() {
        return Err(CliError::Usage(format!(
            "unknown problem {problem:?}; valid ids: {}",
            PROBLEM_NAMES.join(", ")
        )));
    }
    let algorithm_name = args
        .algorithm
        .clone()
        .or(file.algorithm)
        .ok_or_else(|| CliError::Usage(usage_hint("missing --algorithm")))?;
    let algorithm: Algorithm = algorithm_name.parse().map_err(CliError::Usage)?;

    let defaults = RunConfig::default();
    let theta = args.theta.or(file.theta).unwrap_or(defaults.theta);
    if !(theta > 0.0 && theta < 1.0) {
        return Err(CliError::Usage(format!("--theta must lie in (0, 1), got {theta}")));
    }
    let zeta_tilde = args.zeta_tilde.or(file.zeta_tilde).unwrap_or(defaults.zeta_tilde);
    if !(zeta_tilde > 0.0 && zeta_tilde < 1.0) {
        return Err(CliError::Usage(format!("--zeta-tilde must lie in (0, 1), got {zeta_tilde}")));
    }
    let initial_n = args.initial_n.or(file.initial_n).unwrap_or(defaults.initial_n);
    if initial_n == 0 {
        return Err(CliError::Usage("--initial-n must be at least 1".into()));
    }
    let tol = args.tol.or(file.tol).unwrap_or(defaults.lin_tol);
    let dump_meshes = args.dump_meshes || file.dump_meshes.unwrap_or(false);

    Ok(CliConfig {
        run: RunConfig {
            problem,
            algorithm,
            theta,
            initial_n,
            max_levels: args.max_levels.or(file.max_levels).unwrap_or(defaults.max_levels),
            max_dofs: args.max_dofs.or(file.max_dofs).unwrap_or(defaults.max_dofs),
            zeta_tilde,
            lin_tol: tol,
            newton_tol: tol,
            seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
            collect_trace: dump_meshes,
            ..defaults
        },
        out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("atg-out")),
        dump_meshes,
        verbose: args.verbose,
    })
}

fn usage_hint(what: &str) -> String {
    format!(
        "{what}; usage: atg run --problem <{}> --algorithm <{}> [--theta F] [--initial-n N] \
         [--max-levels N] [--max-dofs N] [--zeta-tilde F] [--out PATH] [--config FILE.json] \
         [--dump-meshes]",
        PROBLEM_NAMES.join("|"),
        ALGORITHM_NAMES.join("|")
    )
}

/// Convergence history as CSV; floats carry 9 significant digits.
pub fn history_to_csv(history: &ConvergenceHistory) -> String {
    let mut out = String::from(
        "k,n_dofs,h1_semi_err,l2_err,energy_err,eta,osc,hot1,hot2,hot3,e1,e2,solver_iters,wall_ms\n",
    );
    for r in &history.levels {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.k,
            r.n_dofs,
            sig9(r.h1_semi_err),
            sig9(r.l2_err),
            sig9(r.energy_err),
            sig9(r.eta_global),
            sig9(r.osc_global),
            sig9(r.hot1),
            sig9(r.hot2),
            sig9(r.hot3),
            sig9(r.e1),
            sig9(r.e2),
            r.solver_iters,
            r.wall_ms,
        );
    }
    out
}

/// Plot data: `k n_dofs h1_semi_err eta`, whitespace separated.
pub fn history_to_plot_data(history: &ConvergenceHistory) -> String {
    let mut out = String::from("# k n_dofs h1_semi_err eta\n");
    for r in &history.levels {
        let _ = writeln!(
            out,
            "{} {} {} {}",
            r.k,
            r.n_dofs,
            sig9(r.h1_semi_err),
            sig9(r.eta_global)
        );
    }
    out
}

fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Execute a resolved config: run the driver, write the output files, and
/// return the process exit code (0 on success, 2 after a solver failure; the
/// partial CSV is written either way).
pub fn run_experiment(config: &CliConfig) -> Result<i32, CliError> {
    let problem = by_name(&config.run.problem).expect("validated in parse_config");
    let output = run(&problem, &config.run)?;

    if config.verbose {
        for r in &output.history.levels {
            println!(
                "k={:<3} dofs={:<8} h1={:.3e} eta={:.3e} iters={}",
                r.k, r.n_dofs, r.h1_semi_err, r.eta_global, r.solver_iters
            );
        }
    }

    let csv_path = config.out.with_extension("csv");
    write_file(&csv_path, &history_to_csv(&output.history))?;
    let gp_path = config.out.with_extension("gp.dat");
    write_file(&gp_path, &history_to_plot_data(&output.history))?;
    if config.dump_meshes {
        for (k, level) in output.trace.iter().enumerate() {
            let path = config.out.with_extension(format!("level{k}.mesh"));
            write_file(&path, &write_mesh(&level.mesh))?;
        }
    }

    match output.failure {
        None => Ok(0),
        Some(err) => {
            eprintln!("atg: solver failure, partial history written: {err}");
            Ok(2)
        }
    }
}

fn write_file(path: &PathBuf, content: &str) -> Result<(), CliError> {
    fs::write(path, content).map_err(|source| CliError::Io { path: path.clone(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_apply() {
        let args = RunArgs {
            problem: Some("test1".into()),
            algorithm: Some("atg-mild".into()),
            ..RunArgs::default()
        };
        let config = parse_config(&args).unwrap();
        assert_eq!(config.run.theta, 0.25);
        assert_eq!(config.run.initial_n, 8);
        assert_eq!(config.run.max_levels, 12);
        assert_eq!(config.run.max_dofs, 300_000);
        assert_eq!(config.run.zeta_tilde, 0.5);
        assert_eq!(config.run.lin_tol, 1e-10);
    }

    #[test]
    fn theta_flag_is_honored() {
        let args = RunArgs {
            problem: Some("test1".into()),
            algorithm: Some("atg-mild".into()),
            theta: Some(0.15),
            ..RunArgs::default()
        };
        assert_eq!(parse_config(&args).unwrap().run.theta, 0.15);
    }

    #[test]
    fn unknown_algorithm_is_usage_error() {
        let args = RunArgs {
            problem: Some("test1".into()),
            algorithm: Some("bogus".into()),
            ..RunArgs::default()
        };
        match parse_config(&args) {
            Err(CliError::Usage(msg)) => assert!(msg.contains("atg-mild"), "{msg}"),
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn theta_out_of_range_rejected() {
        let args = RunArgs {
            problem: Some("test1".into()),
            algorithm: Some("atg-mild".into()),
            theta: Some(1.5),
            ..RunArgs::default()
        };
        assert!(matches!(parse_config(&args), Err(CliError::Usage(_))));
    }

    #[test]
    fn csv_floats_have_nine_significant_digits() {
        assert_eq!(sig9(0.628318530717), "6.28318531e-1");
        assert_eq!(sig9(0.0), "0.00000000e0");
    }
}
