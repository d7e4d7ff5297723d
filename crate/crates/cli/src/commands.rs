use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use thiserror::Error;
use xva_core::analytic::{self, ConstParams};
use xva_core::mc_linear::{self, McConfig, McEstimate};
use xva_core::model::ViolationKind;
use xva_core::pde1d;
use xva_core::{validate_closeout, Claim, CloseoutFunction, Dynamics, HazardModel, Payoff, SampleBox, Scheme, TimeGrid};
use xva_deep::{deep_bsde, gradcheck, DbsdeError, TrainState, TrialSummary};

use crate::config::{ConfigError, Convention, Method, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Solver(_) | CliError::Check(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<DbsdeError> for CliError {
    fn from(e: DbsdeError) -> Self {
        match e {
            DbsdeError::Invalid(msg) => CliError::Usage(msg),
            other => CliError::Solver(other.to_string()),
        }
    }
}

fn solver_err(e: impl std::fmt::Display) -> CliError {
    CliError::Solver(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "xva",
    version,
    about = "Counterparty-risk valuation: closed forms, Monte Carlo, finite differences and deep BSDE",
    after_help = "Any configuration key can be overridden with --section.key VALUE (or --section.key=VALUE), \
                  e.g. --model.d 5 --solver.method dbsde. XVA_SEED overrides the configured seed; \
                  --solver.seed overrides both."
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel solvers.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Write the CSV result here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write zero in timing columns so reruns are byte-identical.
    #[arg(long, global = true)]
    omit_timing: bool,
    /// Directory for per-trial training logs of the deep solver.
    #[arg(long, global = true)]
    log_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Value of the configured claim. CSV: dim,method,closeout,value,std,seconds
    Value,
    /// Risk-free value, pre-default value and their difference.
    /// CSV: dim,method,closeout,riskfree,value,cva,std,seconds
    Cva,
    /// Relative CVA underestimate of the risk-free closeout over a hazard-rate sweep.
    /// CSV: lambda,relative_error_analytic,relative_error_pde
    Figure1 {
        #[arg(long, default_value_t = 0.01)]
        lambda_min: f64,
        #[arg(long, default_value_t = 0.4)]
        lambda_max: f64,
        /// Number of hazard rates, endpoints included.
        #[arg(long, default_value_t = 40)]
        steps: usize,
        /// Recovery rate R.
        #[arg(long, default_value_t = 0.5)]
        recovery: f64,
        /// Maturity T.
        #[arg(long, default_value_t = 10.0)]
        maturity: f64,
        /// Space intervals J of the finite-difference grid.
        #[arg(long, default_value_t = 2000)]
        space_steps: usize,
        /// Time steps Np of the finite-difference grid.
        #[arg(long, default_value_t = 2000)]
        time_steps: usize,
    },
    /// One row per dimension. CSV: dim,value,std,seconds
    Table {
        /// Comma-separated dimensions.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        /// Overrides solver.method.
        #[arg(long)]
        method: Option<String>,
        /// replacement, riskfree, none, or cva for the adjustment itself.
        #[arg(long, default_value = "replacement")]
        closeout: String,
    },
    /// Randomized incentive-compatibility check of the configured closeout functions.
    /// CSV: function,samples,violations,exceeds_value,below_value,decreasing,slope_above_one
    ValidateCloseout {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Reverse-mode gradients against central differences.
    /// CSV: check,entries,max_rel_error,tolerance,passed
    Gradcheck,
    /// Simulated paths of the configured dynamics. CSV: path,step,t,x0,..,x{d-1}
    Paths,
}

/// Pulls `--section.key VALUE` and `--section.key=VALUE` out of `args`.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg.clone());
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !key.contains('.') {
            rest.push(arg.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

/// Runs one command and returns the process exit code. Diagnostics go to stderr.
pub fn run(args: &[String], env_seed: Option<&str>, stdout: &mut dyn Write) -> i32 {
    match try_run(args, env_seed, stdout) {
        Ok(()) => 0,
        Err(Exit::Clap(e)) => {
            let _ = e.print();
            e.exit_code()
        }
        Err(Exit::Cli(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

enum Exit {
    Clap(clap::Error),
    Cli(CliError),
}

impl From<CliError> for Exit {
    fn from(e: CliError) -> Self {
        Exit::Cli(e)
    }
}

fn try_run(args: &[String], env_seed: Option<&str>, stdout: &mut dyn Write) -> Result<(), Exit> {
    let (rest, overrides) = split_overrides(args)?;
    let cli = Cli::try_parse_from(&rest).map_err(Exit::Clap)?;
    let cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path, env_seed, &overrides),
        None => RunConfig::load(None, env_seed, &overrides),
    }
    .map_err(CliError::from)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()).into());
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(solver_err)?;
    let mut buf = Vec::new();
    let result = pool.install(|| dispatch(&cli, &cfg, &mut buf));
    stdout.write_all(&buf).map_err(CliError::from)?;
    result.map_err(Exit::Cli)
}

/// Output options shared by the solver entry points.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ctx<'a> {
    pub omit_timing: bool,
    pub log_dir: Option<&'a Path>,
}

impl Ctx<'_> {
    fn seconds(&self, s: f64) -> f64 {
        if self.omit_timing {
            0.0
        } else {
            s
        }
    }
}

fn dispatch(cli: &Cli, cfg: &RunConfig, stdout: &mut Vec<u8>) -> Result<(), CliError> {
    let ctx = Ctx {
        omit_timing: cli.omit_timing,
        log_dir: cli.log_dir.as_deref(),
    };
    if let Some(dir) = ctx.log_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut csv = Vec::new();
    match &cli.command {
        Command::Value => {
            cfg.validate()?;
            let start = Instant::now();
            let est = compute_value(cfg, cfg.solver.convention, &ctx)?;
            let secs = ctx.seconds(start.elapsed().as_secs_f64());
            writeln!(stdout, "value = {} ± {}", est.value, est.std)?;
            writeln!(csv, "dim,method,closeout,value,std,seconds")?;
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                cfg.model.d,
                cfg.solver.method.name(),
                cfg.solver.convention.name(),
                est.value,
                est.std,
                secs
            )?;
            if let Some(path) = &cli.out {
                write_file(path, &csv)?;
            }
            return Ok(());
        }
        Command::Cva => {
            cfg.validate()?;
            let start = Instant::now();
            let c = compute_cva(cfg, &ctx)?;
            let secs = ctx.seconds(start.elapsed().as_secs_f64());
            writeln!(csv, "dim,method,closeout,riskfree,value,cva,std,seconds")?;
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                cfg.model.d,
                cfg.solver.method.name(),
                cfg.solver.convention.name(),
                c.riskfree,
                c.value,
                c.cva,
                c.std,
                secs
            )?;
        }
        Command::Figure1 {
            lambda_min,
            lambda_max,
            steps,
            recovery,
            maturity,
            space_steps,
            time_steps,
        } => {
            let rows = figure1(*lambda_min, *lambda_max, *steps, *recovery, *maturity, *space_steps, *time_steps)?;
            writeln!(csv, "lambda,relative_error_analytic,relative_error_pde")?;
            for (l, a, p) in rows {
                writeln!(csv, "{l},{a},{p}")?;
            }
        }
        Command::Table { dims, method, closeout } => {
            let method = method.as_deref().map(Method::parse).transpose()?;
            let want_cva = closeout == "cva";
            let convention = if want_cva {
                cfg.solver.convention
            } else {
                Convention::parse(closeout)?
            };
            writeln!(csv, "dim,value,std,seconds")?;
            for &d in dims {
                let mut row = cfg.clone();
                row.model.d = d;
                row.solver.convention = convention;
                if let Some(m) = method {
                    row.solver.method = m;
                }
                row.validate()?;
                let start = Instant::now();
                let (value, std) = if want_cva {
                    let c = compute_cva(&row, &ctx)?;
                    (c.cva, c.std)
                } else {
                    let e = compute_value(&row, convention, &ctx)?;
                    (e.value, e.std)
                };
                let secs = ctx.seconds(start.elapsed().as_secs_f64());
                writeln!(csv, "{d},{value},{std},{secs}")?;
            }
        }
        Command::ValidateCloseout { samples } => {
            let failures = validate_closeouts(cfg, *samples, &mut csv)?;
            emit(cli, stdout, &csv)?;
            if failures > 0 {
                return Err(CliError::Check(format!("{failures} closeout violations")));
            }
            return Ok(());
        }
        Command::Gradcheck => {
            let results = gradcheck::run_all(cfg.solver.seed)?;
            writeln!(csv, "check,entries,max_rel_error,tolerance,passed")?;
            let mut failed = Vec::new();
            for r in &results {
                writeln!(csv, "{},{},{},{},{}", r.name, r.entries, r.max_rel_error, r.tolerance, r.passed())?;
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            emit(cli, stdout, &csv)?;
            if !failed.is_empty() {
                return Err(CliError::Check(format!("gradient mismatch in {}", failed.join(", "))));
            }
            return Ok(());
        }
        Command::Paths => {
            let dynamics = cfg.dynamics()?;
            let grid = TimeGrid::new(cfg.solver.steps, cfg.claim.maturity).map_err(solver_err)?;
            let batch = xva_core::simulate::simulate(&dynamics, &grid, cfg.solver.paths, cfg.solver.seed, Scheme::ExactGbm)
                .map_err(solver_err)?;
            batch.write_csv(&grid, &mut csv)?;
        }
    }
    emit(cli, stdout, &csv)
}

fn write_file(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(bytes)?;
    f.flush()
}

fn emit(cli: &Cli, stdout: &mut Vec<u8>, csv: &[u8]) -> Result<(), CliError> {
    match &cli.out {
        Some(path) => write_file(path, csv)?,
        None => stdout.write_all(csv)?,
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std: f64,
}

fn exact(value: f64) -> Estimate {
    Estimate { value, std: 0.0 }
}

fn from_mc(e: McEstimate) -> Estimate {
    Estimate {
        value: e.mean,
        std: e.std_error,
    }
}

fn from_trials(s: &TrialSummary) -> Estimate {
    Estimate {
        value: s.mean,
        std: s.std,
    }
}

fn riskfree_claim(cfg: &RunConfig) -> Result<(Claim, Dynamics, HazardModel), CliError> {
    Ok((cfg.claim()?, cfg.dynamics()?, cfg.hazard()?))
}

fn mc_config(cfg: &RunConfig) -> Result<McConfig, CliError> {
    let grid = TimeGrid::new(cfg.solver.steps, cfg.claim.maturity).map_err(solver_err)?;
    Ok(McConfig::new(grid, cfg.solver.paths, cfg.solver.seed).with_scheme(Scheme::ExactGbm))
}

/// Value of the configured claim under `convention`.
pub fn compute_value(cfg: &RunConfig, convention: Convention, ctx: &Ctx<'_>) -> Result<Estimate, CliError> {
    let (claim, dynamics, hazard) = riskfree_claim(cfg)?;
    let x0 = cfg.model.x0;
    match cfg.solver.method {
        Method::Analytic => {
            let p = cfg.const_params();
            let u = analytic::gbm_put_value(&p, 0.0, x0);
            let v = match convention {
                Convention::None => u,
                Convention::Replacement => analytic::replacement_value_nonneg(&p, u, 0.0).map_err(solver_err)?,
                Convention::Riskfree => analytic::riskfree_closeout_value(&p, u, 0.0).map_err(solver_err)?,
            };
            Ok(exact(v))
        }
        Method::Mc => {
            let mc = mc_config(cfg)?;
            match convention {
                Convention::None => Ok(from_mc(
                    mc_linear::estimate_riskfree_value(&claim, &dynamics, &mc).map_err(solver_err)?,
                )),
                Convention::Riskfree => {
                    let p = cfg.const_params();
                    let f = &claim.closeout;
                    let z = move |t: f64, x: &[f64]| f.eval(t, x, analytic::gbm_put_value(&p, t, x[0]));
                    Ok(from_mc(
                        mc_linear::estimate_predefault_value(&claim, &dynamics, &hazard, &z, &mc).map_err(solver_err)?,
                    ))
                }
                Convention::Replacement => Err(CliError::Usage(
                    "Monte Carlo handles only linear valuations".into(),
                )),
            }
        }
        Method::Pde => {
            let grid = cfg.pde_grid()?;
            let v = match convention {
                Convention::None => pde1d::riskfree_solve(&claim, &dynamics, &grid).map_err(solver_err)?,
                Convention::Riskfree => {
                    pde1d::riskfree_closeout_solve(&claim, &dynamics, &hazard, &grid).map_err(solver_err)?
                }
                Convention::Replacement if cfg.claim.lambdabar > 0.0 => {
                    let report = pde1d::bilateral_picard_solve(
                        &claim,
                        &dynamics,
                        &hazard,
                        &grid,
                        &cfg.picard_options(),
                        1e-6,
                    )
                    .map_err(solver_err)?;
                    if !report.report.converged {
                        return Err(CliError::Solver("bilateral iteration did not converge".into()));
                    }
                    report.report.solution().clone()
                }
                Convention::Replacement => {
                    let report = pde1d::picard_solve(&claim, &dynamics, &hazard, &grid, &cfg.picard_options())
                        .map_err(solver_err)?;
                    if !report.converged {
                        return Err(CliError::Solver("Picard iteration did not converge".into()));
                    }
                    report.solution().clone()
                }
            };
            Ok(exact(v.at_origin(x0)))
        }
        Method::Dbsde | Method::DbsdeMultifc => {
            let dc = cfg.dbsde_config();
            let m = cfg.solver.trials;
            match convention {
                Convention::None => {
                    let s = deep_bsde::value_replacement(&claim, &dynamics, &HazardModel::none(), &dc, m)?;
                    write_logs(ctx, cfg, "none", &s.runs)?;
                    Ok(from_trials(&s))
                }
                Convention::Replacement => {
                    let s = deep_bsde::value_replacement(&claim, &dynamics, &hazard, &dc, m)?;
                    write_logs(ctx, cfg, "replacement", &s.runs)?;
                    Ok(from_trials(&s))
                }
                Convention::Riskfree => {
                    let s = deep_bsde::value_riskfree_closeout(&claim, &dynamics, &hazard, &dc, m)?;
                    write_logs(ctx, cfg, "riskfree-stage1", &s.riskfree.runs)?;
                    write_logs(ctx, cfg, "riskfree-stage2", &s.value.runs)?;
                    Ok(from_trials(&s.value))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvaEstimate {
    pub riskfree: f64,
    pub value: f64,
    pub cva: f64,
    pub std: f64,
}

/// Risk-free value minus the value under the configured convention.
pub fn compute_cva(cfg: &RunConfig, ctx: &Ctx<'_>) -> Result<CvaEstimate, CliError> {
    let convention = cfg.solver.convention;
    match cfg.solver.method {
        Method::Dbsde | Method::DbsdeMultifc if convention == Convention::Replacement => {
            let (claim, dynamics, hazard) = riskfree_claim(cfg)?;
            let s = deep_bsde::cva_solve(&claim, &dynamics, &hazard, &cfg.dbsde_config(), cfg.solver.trials)?;
            write_logs(ctx, cfg, "cva-riskfree", &s.riskfree.runs)?;
            write_logs(ctx, cfg, "cva-replacement", &s.replacement.runs)?;
            Ok(CvaEstimate {
                riskfree: s.riskfree.mean,
                value: s.replacement.mean,
                cva: s.cva,
                std: s.cva_std,
            })
        }
        Method::Dbsde | Method::DbsdeMultifc if convention == Convention::Riskfree => {
            let (claim, dynamics, hazard) = riskfree_claim(cfg)?;
            let s = deep_bsde::value_riskfree_closeout(&claim, &dynamics, &hazard, &cfg.dbsde_config(), cfg.solver.trials)?;
            write_logs(ctx, cfg, "riskfree-stage1", &s.riskfree.runs)?;
            write_logs(ctx, cfg, "riskfree-stage2", &s.value.runs)?;
            let diffs: Vec<f64> = s
                .riskfree
                .runs
                .iter()
                .filter_map(|a| s.value.runs.iter().find(|b| b.seed == a.seed).map(|b| a.v - b.v))
                .collect();
            let (cva, std) = deep_bsde::mean_std(&diffs);
            Ok(CvaEstimate {
                riskfree: s.riskfree.mean,
                value: s.value.mean,
                cva,
                std,
            })
        }
        Method::Mc => {
            // Same seed for both estimates: common random numbers.
            let u = compute_value(cfg, Convention::None, ctx)?;
            let v = compute_value(cfg, convention, ctx)?;
            Ok(CvaEstimate {
                riskfree: u.value,
                value: v.value,
                cva: u.value - v.value,
                std: u.std.hypot(v.std),
            })
        }
        _ => {
            let u = compute_value(cfg, Convention::None, ctx)?;
            let v = compute_value(cfg, convention, ctx)?;
            Ok(CvaEstimate {
                riskfree: u.value,
                value: v.value,
                cva: u.value - v.value,
                std: u.std.hypot(v.std),
            })
        }
    }
}

fn write_logs(ctx: &Ctx<'_>, cfg: &RunConfig, label: &str, runs: &[TrainState]) -> Result<(), CliError> {
    let Some(dir) = ctx.log_dir else {
        return Ok(());
    };
    for run in runs {
        let name = format!("{}-{label}-d{}-seed{}.csv", cfg.solver.method.name(), cfg.model.d, run.seed);
        let mut f = BufWriter::new(File::create(dir.join(name))?);
        run.write_log(&mut f, ctx.omit_timing)?;
        f.flush()?;
    }
    Ok(())
}

/// `(lambda, closed form, finite differences)` over an even hazard-rate grid.
pub fn figure1(
    lambda_min: f64,
    lambda_max: f64,
    steps: usize,
    recovery: f64,
    maturity: f64,
    space_steps: usize,
    time_steps: usize,
) -> Result<Vec<(f64, f64, f64)>, CliError> {
    if steps < 2 {
        return Err(CliError::Usage(format!("--steps must be at least 2, got {steps}")));
    }
    if !(lambda_min >= 0.0 && lambda_max > lambda_min && lambda_max.is_finite()) {
        return Err(CliError::Usage("need 0 <= --lambda-min < --lambda-max".into()));
    }
    let h = (lambda_max - lambda_min) / (steps - 1) as f64;
    let lambdas: Vec<f64> = (0..steps).map(|k| lambda_min + h * k as f64).collect();
    let mut p = ConstParams::underestimate_put(0.0);
    p.recovery = recovery;
    p.maturity = maturity;
    p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let closeout = CloseoutFunction::recovery(recovery).map_err(|e| CliError::Usage(e.to_string()))?;
    let claim = Claim::new(Payoff::BasketPut { strike: p.strike }, maturity, closeout)
        .and_then(|c| c.with_discount(p.r))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let dynamics = Dynamics::gbm_uniform(1, p.mu, p.sigma, p.x0).map_err(solver_err)?;
    let grid = pde1d::PdeGrid::for_gbm(space_steps, time_steps, &dynamics, maturity).map_err(|e| CliError::Usage(e.to_string()))?;
    let pde = pde1d::underestimate_sweep(&claim, &dynamics, &lambdas, &grid, &pde1d::PicardOptions::default())
        .map_err(solver_err)?;
    lambdas
        .iter()
        .zip(pde)
        .map(|(&l, e)| {
            let a = analytic::figure1_relative_error(l, recovery, maturity).map_err(|e| CliError::Usage(e.to_string()))?;
            Ok((l, a, e))
        })
        .collect()
}

/// Writes the report rows and returns the number of violations.
fn validate_closeouts(cfg: &RunConfig, samples: usize, csv: &mut Vec<u8>) -> Result<usize, CliError> {
    let claim = cfg.claim()?;
    let d = cfg.model.d;
    let y = 2.0 * cfg.claim.strike * d as f64;
    let sample_box = SampleBox::new((0.0, cfg.claim.maturity), vec![(0.0, 3.0 * cfg.model.x0); d], (-y, y));
    let mut functions = vec![("counterparty", claim.closeout.clone())];
    if let Some(f) = &claim.investor_closeout {
        functions.push(("investor", f.clone()));
    }
    writeln!(csv, "function,samples,violations,exceeds_value,below_value,decreasing,slope_above_one")?;
    let mut total = 0;
    for (name, f) in functions {
        let report = validate_closeout(&f, &sample_box, samples, cfg.solver.seed);
        total += report.violations.len();
        writeln!(
            csv,
            "{name},{},{},{},{},{},{}",
            report.samples,
            report.violations.len(),
            report.count(ViolationKind::ExceedsValue),
            report.count(ViolationKind::BelowValue),
            report.count(ViolationKind::Decreasing),
            report.count(ViolationKind::SlopeAboveOne)
        )?;
    }
    Ok(total)
}
