//! Deep BSDE solver with a single recurrent gradient network, the
//! multi-trial wrapper, the CVA solver, the two-stage risk-free-closeout
//! pipeline and the per-time-node baseline.
//!
//! On the grid `t_i = i T / N` the rollout is
//!
//! ```text
//! V_0 = v
//! V_{i+1} = V_i - F(t_i, X_i, V_i) dt + N(t_i, X_i) . sigma(t_i, X_i) dW_i
//! F(t, x, y) = c + lambda f(t, x, y) - (r + lambda) y
//! loss = mean over paths of (V_N - phi(X_N))^2
//! ```
//!
//! where `N` approximates the spatial gradient of the value. Paths are drawn
//! afresh every iteration from a seed derived from the trial seed and the
//! iteration index, so runs are reproducible and independent of the worker count.

use std::io::{self, Write};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;
use xva_core::simulate::{derive_seed, simulate, GaussianStream};
use xva_core::{Claim, CloseoutFunction, CloseoutKind, Dynamics, HazardModel, ModelError, PathBatch, Scheme, SolverError, TimeGrid};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::nn::{AdamConfig, AdamState, FcSubnetworks, LstmStack, Network, NnError, ParamSet};

#[derive(Debug, Error)]
pub enum DbsdeError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite value in the rollout at step {step}")]
    NonFinite { step: usize },
    #[error("{skipped} of {iterations} iterations skipped for non-finite gradients")]
    TooManySkips { skipped: usize, iterations: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{failed} of {total} trials failed; first error: {first}")]
    TrialsFailed { failed: usize, total: usize, first: String },
}

const TAG_INIT: u64 = 0x696e_6974;
const TAG_PILOT: u64 = 0x7069_6c6f;
const TAG_JITTER: u64 = 0x6a69_7474;
const TAG_PATHS: u64 = 0x7061_7468;
const TAG_STAGE2: u64 = 0x7374_6732;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Architecture {
    /// One recurrent network shared by all time nodes.
    #[default]
    Lstm,
    /// An independent feedforward network per time node.
    MultiFc,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Lstm => "dbsde",
            Architecture::MultiFc => "dbsde-multifc",
        }
    }
}

/// Stop once the mean of `v` over the last `window` iterations differs from
/// the mean over the window before it by less than `rel_tol` (relative).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    pub window: usize,
    pub rel_tol: f64,
    pub min_iterations: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            window: 200,
            rel_tol: 5e-4,
            min_iterations: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbsdeConfig {
    /// Time steps `N`.
    pub steps: usize,
    /// Paths per iteration `L`.
    pub batch: usize,
    /// Iteration budget `n`.
    pub iterations: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub architecture: Architecture,
    /// Hidden width; `d + 10` when unset.
    pub hidden: Option<usize>,
    pub early_stop: Option<EarlyStop>,
    pub pilot_paths: usize,
    /// Relative half-width of the uniform jitter applied to the pilot value.
    pub init_jitter: f64,
    /// Path scheme; exact sampling for GBM and Euler otherwise when unset.
    pub scheme: Option<Scheme>,
    pub max_skip_fraction: f64,
}

impl Default for DbsdeConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 64,
            iterations: 4000,
            adam: AdamConfig::default(),
            seed: 0,
            architecture: Architecture::Lstm,
            hidden: None,
            early_stop: Some(EarlyStop::default()),
            pilot_paths: 1024,
            init_jitter: 0.2,
            scheme: None,
            max_skip_fraction: 0.01,
        }
    }
}

impl DbsdeConfig {
    pub fn validate(&self) -> Result<(), DbsdeError> {
        let bad = |s: &str| Err(DbsdeError::Invalid(s.to_string()));
        if self.steps < 1 {
            return bad("N must be at least 1");
        }
        if self.batch < 2 {
            return bad("L must be at least 2");
        }
        if self.iterations < 1 {
            return bad("iters must be at least 1");
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.pilot_paths < 1 {
            return bad("pilot paths must be positive");
        }
        if !(0.0..1.0).contains(&self.init_jitter) {
            return bad("init jitter must lie in [0, 1)");
        }
        if self.hidden == Some(0) {
            return bad("hidden width must be positive");
        }
        if let Some(es) = &self.early_stop {
            if es.window == 0 {
                return bad("early-stop window must be positive");
            }
        }
        Ok(())
    }

    pub fn network(&self, dim: usize) -> Network {
        let hidden = self.hidden.unwrap_or(dim + 10);
        match self.architecture {
            Architecture::Lstm => Network::Lstm(LstmStack {
                state_dim: dim,
                hidden,
                layers: 3,
            }),
            Architecture::MultiFc => Network::MultiFc(FcSubnetworks {
                state_dim: dim,
                hidden,
                nodes: self.steps,
            }),
        }
    }

    fn scheme_for(&self, dynamics: &Dynamics) -> Scheme {
        self.scheme.unwrap_or(if dynamics.as_gbm().is_some() {
            Scheme::ExactGbm
        } else {
            Scheme::Euler
        })
    }
}

/// A coefficient sampled on the paths of one time node.
#[derive(Debug, Clone, PartialEq)]
enum RowCoef {
    Const(f64),
    Rows(Vec<f64>),
}

impl RowCoef {
    fn sample(c: &xva_core::Coefficient, t: f64, xs: &Tensor) -> Self {
        match c.as_constant() {
            Some(v) => RowCoef::Const(v),
            None => RowCoef::Rows((0..xs.rows()).map(|l| c.eval(t, xs.row(l))).collect()),
        }
    }

    fn at(&self, l: usize) -> f64 {
        match self {
            RowCoef::Const(v) => *v,
            RowCoef::Rows(v) => v[l],
        }
    }
}

/// Path data of one iteration arranged by time node.
struct StepData {
    t: f64,
    x: Tensor,
    /// `sigma(t_i, X_i) dW_i`, one row per path.
    shock: Tensor,
    r: RowCoef,
    lambda: RowCoef,
    c: RowCoef,
}

struct RolloutData {
    dt: f64,
    maturity: f64,
    steps: Vec<StepData>,
    payoff: Tensor,
}

impl RolloutData {
    fn new(claim: &Claim, dynamics: &Dynamics, hazard: &HazardModel, paths: &PathBatch, grid: &TimeGrid) -> Self {
        let (batch, m, n) = (paths.paths(), paths.dim(), paths.steps());
        let mut scratch = vec![0.0; m * dynamics.noise_dim()];
        let states = |i: usize| Tensor::from_fn(batch, m, |l, k| paths.state(l, i)[k]);
        let steps = (0..n)
            .map(|i| {
                let t = grid.node(i);
                let x = states(i);
                let mut shock = Tensor::zeros(batch, m);
                for l in 0..batch {
                    let out = &mut shock.data_mut()[l * m..(l + 1) * m];
                    dynamics.diffuse_into(t, x.row(l), paths.increment(l, i), &mut scratch, out);
                }
                StepData {
                    t,
                    r: RowCoef::sample(&claim.discount, t, &x),
                    lambda: RowCoef::sample(hazard.counterparty(), t, &x),
                    c: RowCoef::sample(&claim.cashflow, t, &x),
                    x,
                    shock,
                }
            })
            .collect();
        let payoff = Tensor::from_fn(batch, 1, |l, _| claim.payoff.eval(paths.terminal(l)));
        Self {
            dt: grid.dt(),
            maturity: grid.horizon(),
            steps,
            payoff,
        }
    }
}

/// Argument of the closeout function inside the driver.
#[derive(Debug, Clone, Copy)]
pub enum RecoveryInput<'a> {
    /// `f(t, x, V)`: the replacement convention.
    Replacement,
    /// `f(t, x, U_i)` with `U_i` given per time node and path.
    Fixed(&'a [Vec<f64>]),
}

/// Tape nodes of one rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub loss: Var,
    /// `V_0, ..., V_N`, each `L x 1`.
    pub values: Vec<Var>,
}

/// The gradient estimate at a time node: `(tape, node, t / T, X_i) -> L x m`.
pub type GradientFn<'a> = dyn FnMut(&mut Tape, usize, f64, Var) -> Result<Var, NnError> + 'a;

fn closeout_on_tape(tape: &mut Tape, f: &CloseoutFunction, t: f64, xs: &Tensor, y: Var) -> Result<Var, DbsdeError> {
    Ok(match f.kind() {
        CloseoutKind::Identity => y,
        CloseoutKind::Recovery { rate } => {
            let p = tape.pos_part(y);
            let p = tape.scale(p, rate);
            let n = tape.neg_part(y);
            tape.sub(p, n)?
        }
        CloseoutKind::InvestorRecovery { rate } => {
            let p = tape.pos_part(y);
            let n = tape.neg_part(y);
            let n = tape.scale(n, rate);
            tape.sub(p, n)?
        }
        CloseoutKind::Custom => tape.map_indexed(y, |l, v| {
            // Central difference for the slope of a user closure.
            let h = 1e-6 * v.abs().max(1.0);
            let x = xs.row(l);
            let slope = (f.eval(t, x, v + h) - f.eval(t, x, v - h)) / (2.0 * h);
            (f.eval(t, x, v), slope)
        }),
    })
}

fn times_rows(tape: &mut Tape, a: Var, coef: &RowCoef, scale: f64) -> Result<Var, DbsdeError> {
    Ok(match coef {
        RowCoef::Const(v) => tape.scale(a, v * scale),
        RowCoef::Rows(v) => {
            let w = tape.constant(Tensor::new(v.len(), 1, v.iter().map(|x| x * scale).collect())?);
            tape.mul(a, w)?
        }
    })
}

fn record_rollout(
    tape: &mut Tape,
    data: &RolloutData,
    claim: &Claim,
    v: Var,
    gradient: &mut GradientFn<'_>,
    recovery: RecoveryInput<'_>,
) -> Result<Rollout, DbsdeError> {
    let batch = data.payoff.rows();
    let dt = data.dt;
    let mut y = tape.broadcast(v, batch, 1)?;
    let mut values = Vec::with_capacity(data.steps.len() + 1);
    values.push(y);
    for (i, s) in data.steps.iter().enumerate() {
        if let RecoveryInput::Fixed(u) = recovery {
            if u.len() != data.steps.len() || u[i].len() != batch {
                return Err(DbsdeError::Invalid("recovery input does not match the path batch".into()));
            }
        }
        let x = tape.constant(s.x.clone());
        let z = gradient(tape, i, s.t / data.maturity, x)?;
        let shock = tape.constant(s.shock.clone());
        let zs = tape.mul(z, shock)?;
        let noise = tape.row_sum(zs);
        // y_{i+1} = y - dt (c + lambda f - (r + lambda) y) + noise
        let decay = match (&s.r, &s.lambda) {
            (RowCoef::Const(r), RowCoef::Const(l)) => RowCoef::Const(1.0 + (r + l) * dt),
            _ => RowCoef::Rows((0..batch).map(|l| 1.0 + (s.r.at(l) + s.lambda.at(l)) * dt).collect()),
        };
        let mut next = times_rows(tape, y, &decay, 1.0)?;
        let lambda_zero = matches!(s.lambda, RowCoef::Const(l) if l == 0.0);
        if !lambda_zero {
            let f = match recovery {
                RecoveryInput::Replacement => closeout_on_tape(tape, &claim.closeout, s.t, &s.x, y)?,
                RecoveryInput::Fixed(u) => {
                    let vals = (0..batch).map(|l| claim.closeout.eval(s.t, s.x.row(l), u[i][l])).collect();
                    tape.constant(Tensor::new(batch, 1, vals)?)
                }
            };
            let lf = times_rows(tape, f, &s.lambda, -dt)?;
            next = tape.add(next, lf)?;
        }
        if !matches!(s.c, RowCoef::Const(c) if c == 0.0) {
            let cs = tape.constant(Tensor::from_fn(batch, 1, |l, _| -dt * s.c.at(l)));
            next = tape.add(next, cs)?;
        }
        y = tape.add(next, noise)?;
        values.push(y);
    }
    if tape.value(y).data().iter().any(|v| !v.is_finite()) {
        let step = values
            .iter()
            .position(|v| tape.value(*v).data().iter().any(|x| !x.is_finite()))
            .unwrap_or(values.len() - 1);
        return Err(DbsdeError::NonFinite { step });
    }
    let phi = tape.constant(data.payoff.clone());
    let diff = tape.sub(y, phi)?;
    let sq = tape.square(diff);
    let loss = tape.mean(sq);
    Ok(Rollout { loss, values })
}

/// Records the rollout for a batch of paths with an arbitrary gradient
/// estimate and returns the loss node.
#[allow(clippy::too_many_arguments)]
pub fn rollout_loss(
    tape: &mut Tape,
    gradient: &mut GradientFn<'_>,
    v: Var,
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    paths: &PathBatch,
    grid: &TimeGrid,
    recovery: RecoveryInput<'_>,
) -> Result<Rollout, DbsdeError> {
    if paths.steps() != grid.steps() || (grid.horizon() - claim.maturity).abs() > 1e-12 * claim.maturity {
        return Err(DbsdeError::Invalid("path grid does not match the claim maturity".into()));
    }
    let data = RolloutData::new(claim, dynamics, hazard, paths, grid);
    record_rollout(tape, &data, claim, v, gradient, recovery)
}

/// A network gradient closure over recorded parameters.
pub fn network_gradient<'a>(
    tape: &mut Tape,
    network: &'a Network,
    params: &'a [Var],
    batch: usize,
) -> impl FnMut(&mut Tape, usize, f64, Var) -> Result<Var, NnError> + 'a {
    let mut carry = network.begin(tape, batch);
    move |tape, node, t, x| network.step(tape, params, node, t, x, &mut carry)
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub network: Network,
    pub params: ParamSet,
    pub v: f64,
    pub v_init: f64,
    pub iterations: usize,
    pub loss_history: Vec<f64>,
    pub v_history: Vec<f64>,
    /// Elapsed seconds after each iteration.
    pub time_history: Vec<f64>,
    pub seconds: f64,
    pub skipped: usize,
    pub seed: u64,
    pub converged: bool,
}

impl TrainState {
    /// Training log with columns `iter,loss,v,seconds`; the timing column
    /// is written as 0 when `omit_timing` is set so logs are reproducible.
    pub fn write_log<W: Write>(&self, mut out: W, omit_timing: bool) -> io::Result<()> {
        writeln!(out, "iter,loss,v,seconds")?;
        for i in 0..self.iterations {
            let secs = if omit_timing { 0.0 } else { self.time_history[i] };
            writeln!(out, "{},{},{},{}", i + 1, self.loss_history[i], self.v_history[i], secs)?;
        }
        Ok(())
    }

    /// Parameters plus the trained initial value under the name `v`.
    pub fn checkpoint(&self) -> ParamSet {
        let mut p = self.params.clone();
        p.push("v", Tensor::scalar(self.v));
        p
    }
}

/// Mean discounted payoff and cash flow over a pilot batch.
fn pilot_value(claim: &Claim, dynamics: &Dynamics, config: &DbsdeConfig, grid: &TimeGrid) -> Result<f64, DbsdeError> {
    let paths = simulate(
        dynamics,
        grid,
        config.pilot_paths,
        derive_seed(config.seed, TAG_PILOT),
        config.scheme_for(dynamics),
    )?;
    let dt = grid.dt();
    let per_path: Vec<f64> = (0..paths.paths())
        .map(|l| {
            let mut disc = 1.0;
            let mut acc = 0.0;
            for i in 0..grid.steps() {
                let (t, x) = (grid.node(i), paths.state(l, i));
                acc += disc * claim.c(t, x) * dt;
                disc *= (-claim.r(t, x) * dt).exp();
            }
            acc + disc * claim.payoff.eval(paths.terminal(l))
        })
        .collect();
    Ok(xva_core::mc_linear::pairwise_sum(&per_path) / per_path.len() as f64)
}

fn initial_value(claim: &Claim, dynamics: &Dynamics, config: &DbsdeConfig, grid: &TimeGrid) -> Result<f64, DbsdeError> {
    let pilot = pilot_value(claim, dynamics, config, grid)?;
    let u = GaussianStream::new(derive_seed(config.seed, TAG_JITTER), 0).uniform();
    Ok(pilot * (1.0 + config.init_jitter * (2.0 * u - 1.0)))
}

fn converged(history: &[f64], es: &EarlyStop) -> bool {
    let k = history.len();
    let w = es.window;
    if k < es.min_iterations.max(2 * w) {
        return false;
    }
    let now = history[k - w..].iter().sum::<f64>() / w as f64;
    let before = history[k - 2 * w..k - w].iter().sum::<f64>() / w as f64;
    (now - before).abs() <= es.rel_tol * now.abs()
}

/// Paths for iteration `iter` of a run seeded with `seed`.
fn iteration_paths(
    dynamics: &Dynamics,
    grid: &TimeGrid,
    config: &DbsdeConfig,
    seed: u64,
    iter: usize,
) -> Result<PathBatch, DbsdeError> {
    let s = derive_seed(derive_seed(seed, TAG_PATHS), iter as u64);
    Ok(simulate(dynamics, grid, config.batch, s, config.scheme_for(dynamics))?)
}

/// The frozen network of a finished run, rolled forward along fresh paths.
pub struct FrozenSolution<'a> {
    pub state: &'a TrainState,
    pub claim: &'a Claim,
    pub hazard: &'a HazardModel,
}

impl FrozenSolution<'_> {
    /// `V_i` for every node `i < N` and path.
    fn values(&self, data: &RolloutData) -> Result<Vec<Vec<f64>>, DbsdeError> {
        let mut tape = Tape::new();
        let params = self.state.params.record_frozen(&mut tape);
        let v = tape.constant(Tensor::scalar(self.state.v));
        let batch = data.payoff.rows();
        let mut grad = network_gradient(&mut tape, &self.state.network, &params, batch);
        let roll = record_rollout(&mut tape, data, self.claim, v, &mut grad, RecoveryInput::Replacement)?;
        Ok(roll.values[..data.steps.len()]
            .iter()
            .map(|y| tape.value(*y).data().to_vec())
            .collect())
    }
}

fn train_impl(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    config: &DbsdeConfig,
    frozen: Option<&FrozenSolution<'_>>,
) -> Result<TrainState, DbsdeError> {
    config.validate()?;
    if dynamics.dim() == 0 {
        return Err(DbsdeError::Invalid("state dimension must be positive".into()));
    }
    let start = Instant::now();
    let grid = TimeGrid::new(config.steps, claim.maturity)?;
    let network = config.network(dynamics.dim());
    let mut params = network.init(derive_seed(config.seed, TAG_INIT));
    let v_init = initial_value(claim, dynamics, config, &grid)?;
    let mut all: Vec<Tensor> = params.tensors().to_vec();
    all.push(Tensor::scalar(v_init));
    let mut adam = AdamState::new(config.adam, &all);
    let path_seed = if frozen.is_some() {
        derive_seed(config.seed, TAG_STAGE2)
    } else {
        config.seed
    };
    let mut state = TrainState {
        network,
        params: ParamSet::new(),
        v: v_init,
        v_init,
        iterations: 0,
        loss_history: Vec::with_capacity(config.iterations),
        v_history: Vec::with_capacity(config.iterations),
        time_history: Vec::with_capacity(config.iterations),
        seconds: 0.0,
        skipped: 0,
        seed: config.seed,
        converged: false,
    };
    for iter in 0..config.iterations {
        let paths = iteration_paths(dynamics, &grid, config, path_seed, iter)?;
        let data = RolloutData::new(claim, dynamics, hazard, &paths, &grid);
        let fixed = match frozen {
            Some(f) => Some(f.values(&data)?),
            None => None,
        };
        let recovery = match &fixed {
            Some(u) => RecoveryInput::Fixed(u),
            None => RecoveryInput::Replacement,
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = all.iter().map(|t| tape.param(t.clone())).collect();
        let (net_vars, v_var) = vars.split_at(vars.len() - 1);
        let mut grad = network_gradient(&mut tape, &network, net_vars, config.batch);
        let loss = match record_rollout(&mut tape, &data, claim, v_var[0], &mut grad, recovery) {
            Ok(r) => {
                let loss = r.loss;
                let mut g = tape.backward(loss)?;
                let grads: Vec<Tensor> = vars.iter().map(|v| g.take(*v)).collect();
                adam.step(&mut all, &grads)?;
                tape.value(loss).item()
            }
            Err(DbsdeError::NonFinite { .. }) => {
                adam.skip();
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        state.v = all[all.len() - 1].item();
        state.loss_history.push(loss);
        state.v_history.push(state.v);
        state.time_history.push(start.elapsed().as_secs_f64());
        state.iterations = iter + 1;
        if !state.v.is_finite() {
            return Err(DbsdeError::NonFinite { step: 0 });
        }
        if let Some(es) = &config.early_stop {
            if converged(&state.v_history, es) {
                state.converged = true;
                break;
            }
        }
    }
    state.skipped = adam.skipped();
    if state.skipped as f64 > config.max_skip_fraction * state.iterations as f64 {
        return Err(DbsdeError::TooManySkips {
            skipped: state.skipped,
            iterations: state.iterations,
        });
    }
    all.pop();
    params.tensors_mut().clone_from_slice(&all);
    state.params = params;
    state.seconds = start.elapsed().as_secs_f64();
    Ok(state)
}

/// One training run of the solver.
pub fn train(claim: &Claim, dynamics: &Dynamics, hazard: &HazardModel, config: &DbsdeConfig) -> Result<TrainState, DbsdeError> {
    train_impl(claim, dynamics, hazard, config, None)
}

/// Trained values of `M` independent runs.
#[derive(Debug, Clone)]
pub struct TrialSummary {
    /// `v*` of every successful trial, in seed order.
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single trial).
    pub std: f64,
    /// Wall-clock seconds per successful trial.
    pub seconds: Vec<f64>,
    /// `(seed, message)` of failed trials.
    pub failed: Vec<(u64, String)>,
    pub runs: Vec<TrainState>,
}

impl TrialSummary {
    fn from_results(results: Vec<(u64, Result<TrainState, DbsdeError>)>) -> Result<Self, DbsdeError> {
        let total = results.len();
        let mut runs = Vec::new();
        let mut failed = Vec::new();
        for (seed, r) in results {
            match r {
                Ok(s) => runs.push(s),
                Err(e) => failed.push((seed, e.to_string())),
            }
        }
        if runs.is_empty() || runs.len() + 1 < total {
            return Err(DbsdeError::TrialsFailed {
                failed: failed.len(),
                total,
                first: failed.first().map(|f| f.1.clone()).unwrap_or_default(),
            });
        }
        Ok(Self::from_runs(runs, failed))
    }

    fn from_runs(runs: Vec<TrainState>, failed: Vec<(u64, String)>) -> Self {
        let values: Vec<f64> = runs.iter().map(|s| s.v).collect();
        let (mean, std) = mean_std(&values);
        Self {
            seconds: runs.iter().map(|s| s.seconds).collect(),
            values,
            mean,
            std,
            failed,
            runs,
        }
    }

    pub fn total_seconds(&self) -> f64 {
        self.seconds.iter().sum()
    }

    pub fn mean_seconds(&self) -> f64 {
        self.total_seconds() / self.seconds.len().max(1) as f64
    }
}

/// Arithmetic mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn trial_seeds(config: &DbsdeConfig, trials: usize) -> Result<Vec<u64>, DbsdeError> {
    if trials == 0 {
        return Err(DbsdeError::Invalid("M must be at least 1".into()));
    }
    Ok((1..=trials as u64).map(|k| config.seed.wrapping_add(k)).collect())
}

/// Averages `M` runs seeded `seed + 1, ..., seed + M`. A single failed trial
/// is excluded and reported; more failures fail the call.
pub fn value_replacement(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    config: &DbsdeConfig,
    trials: usize,
) -> Result<TrialSummary, DbsdeError> {
    config.validate()?;
    let seeds = trial_seeds(config, trials)?;
    let results = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = DbsdeConfig { seed, ..config.clone() };
            (seed, train(claim, dynamics, hazard, &cfg))
        })
        .collect();
    TrialSummary::from_results(results)
}

/// The baseline with one feedforward network per time node.
pub fn train_multifc_baseline(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    config: &DbsdeConfig,
    trials: usize,
) -> Result<TrialSummary, DbsdeError> {
    let cfg = DbsdeConfig {
        architecture: Architecture::MultiFc,
        ..config.clone()
    };
    value_replacement(claim, dynamics, hazard, &cfg, trials)
}

#[derive(Debug, Clone)]
pub struct CvaSummary {
    /// Runs with no default.
    pub riskfree: TrialSummary,
    /// Runs with the claim's hazard and replacement closeout.
    pub replacement: TrialSummary,
    pub cva: f64,
    /// Sample standard deviation of the per-trial differences.
    pub cva_std: f64,
}

/// Risk-free value, replacement value and their difference. Both runs use
/// the same trial seeds, hence the same initial parameters and paths.
pub fn cva_solve(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    config: &DbsdeConfig,
    trials: usize,
) -> Result<CvaSummary, DbsdeError> {
    let riskfree = value_replacement(claim, dynamics, &HazardModel::none(), config, trials)?;
    let replacement = value_replacement(claim, dynamics, hazard, config, trials)?;
    let diffs: Vec<f64> = riskfree
        .runs
        .iter()
        .filter_map(|u| replacement.runs.iter().find(|v| v.seed == u.seed).map(|v| u.v - v.v))
        .collect();
    let cva = riskfree.mean - replacement.mean;
    let cva_std = mean_std(&diffs).1;
    Ok(CvaSummary {
        riskfree,
        replacement,
        cva,
        cva_std,
    })
}

#[derive(Debug, Clone)]
pub struct RiskfreeCloseoutSummary {
    /// Stage 1: the risk-free value.
    pub riskfree: TrialSummary,
    /// Stage 2: the value with the frozen stage-1 solution in the closeout.
    pub value: TrialSummary,
    /// Wall-clock of both stages per trial.
    pub seconds: Vec<f64>,
}

/// Two-stage pipeline for the risk-free closeout. Stage 1 trains with no
/// default. Stage 2 rolls the frozen stage-1 solution along each batch of
/// fresh paths and uses it as the closeout argument in a second, linear run.
pub fn value_riskfree_closeout(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    config: &DbsdeConfig,
    trials: usize,
) -> Result<RiskfreeCloseoutSummary, DbsdeError> {
    config.validate()?;
    let seeds = trial_seeds(config, trials)?;
    let none = HazardModel::none();
    let results: Vec<(u64, Result<(TrainState, TrainState), DbsdeError>)> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = DbsdeConfig { seed, ..config.clone() };
            let run = || -> Result<(TrainState, TrainState), DbsdeError> {
                let u = train(claim, dynamics, &none, &cfg)?;
                let frozen = FrozenSolution {
                    state: &u,
                    claim,
                    hazard: &none,
                };
                let v0 = train_impl(claim, dynamics, hazard, &cfg, Some(&frozen))?;
                Ok((u, v0))
            };
            (seed, run())
        })
        .collect();
    let total = results.len();
    let mut stage1 = Vec::new();
    let mut stage2 = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in results {
        match r {
            Ok((u, v)) => {
                stage1.push(u);
                stage2.push(v);
            }
            Err(e) => failed.push((seed, e.to_string())),
        }
    }
    if stage2.is_empty() || stage2.len() + 1 < total {
        return Err(DbsdeError::TrialsFailed {
            failed: failed.len(),
            total,
            first: failed.first().map(|f| f.1.clone()).unwrap_or_default(),
        });
    }
    let seconds = stage1.iter().zip(&stage2).map(|(a, b)| a.seconds + b.seconds).collect();
    Ok(RiskfreeCloseoutSummary {
        riskfree: TrialSummary::from_runs(stage1, failed.clone()),
        value: TrialSummary::from_runs(stage2, failed),
        seconds,
    })
}
