//! Monte Carlo estimators for the linear valuations: the risk-free value, the
//! intensity-discounted pre-default value with an exogenous recovery `Z`, and
//! a default-time sampling estimator of the same quantity.
//!
//! Paths are simulated one at a time into per-worker buffers, so memory does
//! not grow with the number of paths. Per-path values are reduced by pairwise
//! summation in path order, which makes results independent of the worker count.
//! Time integrals use left-endpoint sums on the simulation grid.

use rayon::prelude::*;

use crate::error::SolverError;
use crate::model::{Claim, Dynamics, HazardModel};
use crate::simulate::{derive_seed, simulate_path, GaussianStream, Scheme, TimeGrid};

/// Exogenous recovery `Z(t, x)` paid at default.
pub type Recovery<'a> = &'a (dyn Fn(f64, &[f64]) -> f64 + Sync);

const DEFAULT_TIME_TAG: u64 = 0x7461_7500;
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl McEstimate {
    /// Standard error of the difference of two independent-or-not estimates,
    /// taken conservatively as the root sum of squares.
    pub fn combined_std_error(&self, other: &McEstimate) -> f64 {
        self.std_error.hypot(other.std_error)
    }
}

/// Simulation settings shared by all estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub grid: TimeGrid,
    pub paths: usize,
    pub seed: u64,
    pub scheme: Scheme,
}

impl McConfig {
    pub fn new(grid: TimeGrid, paths: usize, seed: u64) -> Self {
        Self {
            grid,
            paths,
            seed,
            scheme: Scheme::Euler,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }
}

/// Sum with `O(log n)` error growth and a fixed association order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

fn summarize(values: &[f64], seed: u64) -> McEstimate {
    let n = values.len();
    let mean = pairwise_sum(values) / n as f64;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    McEstimate {
        mean,
        std_error: (var / n as f64).sqrt(),
        n_paths: n,
        seed,
    }
}

fn check_inputs(claim: &Claim, config: &McConfig) -> Result<(), SolverError> {
    if config.paths < 2 {
        return Err(SolverError::unsupported(format!(
            "at least 2 paths are needed for a standard error, got {}",
            config.paths
        )));
    }
    if (config.grid.horizon() - claim.maturity).abs() > 1e-12 * claim.maturity.max(1.0) {
        return Err(SolverError::unsupported(format!(
            "grid horizon {} differs from maturity {}",
            config.grid.horizon(),
            claim.maturity
        )));
    }
    Ok(())
}

/// Evaluates `value(path, states)` on every path and summarizes.
fn estimate<F>(dynamics: &Dynamics, config: &McConfig, value: F) -> Result<McEstimate, SolverError>
where
    F: Fn(usize, &[f64]) -> f64 + Sync,
{
    let m = dynamics.dim();
    let steps = config.grid.steps();
    let mut values = vec![0.0; config.paths];
    values
        .par_chunks_mut(CHUNK)
        .enumerate()
        .try_for_each(|(chunk, out)| {
            let mut states = vec![0.0; (steps + 1) * m];
            let mut increments = vec![0.0; steps * dynamics.noise_dim()];
            for (j, slot) in out.iter_mut().enumerate() {
                let path = chunk * CHUNK + j;
                simulate_path(
                    dynamics,
                    &config.grid,
                    config.scheme,
                    config.seed,
                    path,
                    &mut states,
                    &mut increments,
                )?;
                *slot = value(path, &states);
            }
            Ok::<(), SolverError>(())
        })?;
    if let Some(path) = values.iter().position(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteState { path, step: steps });
    }
    Ok(summarize(&values, config.seed))
}

fn predefault_path(
    claim: &Claim,
    hazard: &HazardModel,
    recovery: Recovery<'_>,
    grid: &TimeGrid,
    m: usize,
    states: &[f64],
) -> f64 {
    let dt = grid.dt();
    let mut exponent = 0.0_f64;
    let mut acc = 0.0;
    for i in 0..grid.steps() {
        let t = grid.node(i);
        let x = &states[i * m..(i + 1) * m];
        let lambda = hazard.lambda(t, x);
        let source = claim.c(t, x) + lambda * recovery(t, x);
        let k = claim.r(t, x) + lambda;
        // Coefficients frozen over the step, exponential integrated exactly.
        let weight = if k == 0.0 { dt } else { -(-k * dt).exp_m1() / k };
        acc += source * (-exponent).exp() * weight;
        exponent += k * dt;
    }
    let x_t = &states[grid.steps() * m..];
    acc + (-exponent).exp() * claim.payoff.eval(x_t)
}

/// `E[ int_0^T c e^{-int r} ds + e^{-int_0^T r} phi(X_T) ]`.
pub fn estimate_riskfree_value(
    claim: &Claim,
    dynamics: &Dynamics,
    config: &McConfig,
) -> Result<McEstimate, SolverError> {
    let zero = |_: f64, _: &[f64]| 0.0;
    estimate_predefault_value(claim, dynamics, &HazardModel::none(), &zero, config)
}

/// `E[ int_0^T (c + lambda Z) e^{-int (r + lambda)} ds + e^{-int_0^T (r + lambda)} phi(X_T) ]`.
pub fn estimate_predefault_value(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    recovery: Recovery<'_>,
    config: &McConfig,
) -> Result<McEstimate, SolverError> {
    check_inputs(claim, config)?;
    let m = dynamics.dim();
    estimate(dynamics, config, |_, states| {
        predefault_path(claim, hazard, recovery, &config.grid, m, states)
    })
}

/// Cash-flow form of the pre-default value: draws `tau ~ Exp(lambda)` per
/// path and pays `Z` at the last grid node at or before `tau` (discounted to
/// `tau`), or the terminal payoff if `tau > T`. Cash flows accrue until the
/// earlier of `tau` and `T`.
pub fn estimate_by_default_sampling(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    recovery: Recovery<'_>,
    config: &McConfig,
) -> Result<McEstimate, SolverError> {
    check_inputs(claim, config)?;
    let lambda = hazard.counterparty().as_constant().ok_or_else(|| {
        SolverError::unsupported("default-time sampling requires a constant intensity")
    })?;
    let m = dynamics.dim();
    let grid = &config.grid;
    let dt = grid.dt();
    let steps = grid.steps();
    let tau_seed = derive_seed(config.seed, DEFAULT_TIME_TAG);
    estimate(dynamics, config, |path, states| {
        let tau = if lambda > 0.0 {
            -GaussianStream::new(tau_seed, path as u64).uniform().ln() / lambda
        } else {
            f64::INFINITY
        };
        let mut exponent = 0.0_f64;
        let mut acc = 0.0;
        for i in 0..steps {
            let t = grid.node(i);
            let x = &states[i * m..(i + 1) * m];
            let r = claim.r(t, x);
            if tau <= grid.node(i + 1) {
                let h = (tau - t).max(0.0);
                acc += claim.c(t, x) * (-exponent).exp() * h;
                exponent += r * h;
                return acc + (-exponent).exp() * recovery(t, x);
            }
            acc += claim.c(t, x) * (-exponent).exp() * dt;
            exponent += r * dt;
        }
        acc + (-exponent).exp() * claim.payoff.eval(&states[steps * m..])
    })
}
