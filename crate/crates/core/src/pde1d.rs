//! One-dimensional finite differences for the linear Cauchy problems
//! `u_t + a u_xx + b u_x - k u + g = 0, u(T) = phi`, the Picard iteration for
//! the nonlinear valuation equation, its bilateral extension and the bound
//! functions `J` and `I`.
//!
//! The space domain is `[0, x_max]` on a uniform grid. The node `x = 0` is
//! treated as absorbing (the diffusion and drift vanish there for GBM), so its
//! row reduces to the ODE `u_t - k u + g = 0`. At `x_max` the solution is set
//! to zero when the terminal payoff vanishes on the last two nodes, and is
//! otherwise linearly extrapolated (zero second derivative).
//!
//! The drift is centered, or upwinded at nodes where the cell Peclet number
//! `|b| dx / (2a)` exceeds one. Time stepping is Crank–Nicolson; the first two intervals after maturity are
//! fully implicit to damp the payoff kink (Rannacher start-up).

use std::io::{self, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::SolverError;
use crate::model::{neg_part, pos_part, Claim, CloseoutFunction, CloseoutKind, Dynamics, HazardModel};

/// Coefficient `(t, x) -> value` of a one-dimensional linear problem.
pub type Coef1 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RightBoundary {
    /// Zero if the terminal payoff vanishes at the two last nodes, else linear.
    #[default]
    Auto,
    Zero,
    Linear,
}

/// Space-time grid and scheme settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeGrid {
    pub space_steps: usize,
    pub time_steps: usize,
    pub x_max: f64,
    pub maturity: f64,
    /// `0.5` for Crank–Nicolson, `1` for fully implicit.
    pub theta: f64,
    /// Number of initial intervals stepped fully implicitly.
    pub rannacher_steps: usize,
    pub right: RightBoundary,
}

impl PdeGrid {
    pub fn new(space_steps: usize, time_steps: usize, x_max: f64, maturity: f64) -> Result<Self, SolverError> {
        if space_steps < 4 || time_steps < 1 {
            return Err(SolverError::unsupported(format!(
                "grid needs at least 4 space steps and 1 time step, got J={space_steps}, Np={time_steps}"
            )));
        }
        if !(x_max > 0.0 && x_max.is_finite()) || !(maturity > 0.0 && maturity.is_finite()) {
            return Err(SolverError::unsupported(format!(
                "x_max={x_max} and T={maturity} must be positive"
            )));
        }
        Ok(Self {
            space_steps,
            time_steps,
            x_max,
            maturity,
            theta: 0.5,
            rannacher_steps: 2,
            right: RightBoundary::Auto,
        })
    }

    /// Domain `[0, x0 exp((mu + 6 sigma) sqrt(T) + mu T)]` for a GBM factor.
    pub fn for_gbm(
        space_steps: usize,
        time_steps: usize,
        dynamics: &Dynamics,
        maturity: f64,
    ) -> Result<Self, SolverError> {
        let g = dynamics
            .as_gbm()
            .filter(|_| dynamics.dim() == 1)
            .ok_or_else(|| SolverError::unsupported("automatic domain requires 1-D GBM dynamics"))?;
        let (mu, sigma) = (g.mu[0], g.sigma[0]);
        let x_max = dynamics.x0()[0] * ((mu + 6.0 * sigma) * maturity.sqrt() + mu * maturity).exp();
        Self::new(space_steps, time_steps, x_max, maturity)
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_rannacher_steps(mut self, steps: usize) -> Self {
        self.rannacher_steps = steps;
        self
    }

    pub fn with_right_boundary(mut self, right: RightBoundary) -> Self {
        self.right = right;
        self
    }

    pub fn dx(&self) -> f64 {
        self.x_max / self.space_steps as f64
    }

    pub fn dt(&self) -> f64 {
        self.maturity / self.time_steps as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        if j == self.space_steps {
            self.x_max
        } else {
            j as f64 * self.dx()
        }
    }

    pub fn t(&self, n: usize) -> f64 {
        if n == self.time_steps {
            self.maturity
        } else {
            n as f64 * self.dt()
        }
    }

    fn validate(&self) -> Result<(), SolverError> {
        if !(self.theta >= 0.5 && self.theta <= 1.0) {
            return Err(SolverError::unsupported(format!("theta {} outside [0.5, 1]", self.theta)));
        }
        Ok(())
    }
}

/// Solution values on the `(N_p + 1) x (J + 1)` grid, row-major in `(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    grid: PdeGrid,
    values: Vec<f64>,
}

impl ValueGrid {
    pub fn grid(&self) -> &PdeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, n: usize, j: usize) -> f64 {
        self.values[n * (self.grid.space_steps + 1) + j]
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        let w = self.grid.space_steps + 1;
        &self.values[n * w..(n + 1) * w]
    }

    /// Cubic Lagrange interpolation in `x` on time slice `n`.
    pub fn interpolate(&self, n: usize, x: f64) -> f64 {
        let row = self.slice(n);
        let h = self.grid.dx();
        let j_last = self.grid.space_steps;
        let s = (x / h).clamp(0.0, j_last as f64);
        let base = (s.floor() as usize).saturating_sub(1).min(j_last - 3);
        let mut out = 0.0;
        for i in 0..4 {
            let mut w = 1.0;
            for k in 0..4 {
                if k != i {
                    w *= (s - (base + k) as f64) / (i as f64 - k as f64);
                }
            }
            out += w * row[base + i];
        }
        out
    }

    /// Value at `t = 0`.
    pub fn at_origin(&self, x: f64) -> f64 {
        self.interpolate(0, x)
    }

    /// `sup |self - other|`.
    pub fn sup_distance(&self, other: &ValueGrid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `sup (self - other)`; nonpositive iff `self <= other` everywhere.
    pub fn max_excess(&self, other: &ValueGrid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn zip_map(&self, other: &ValueGrid, f: impl Fn(f64, f64) -> f64) -> ValueGrid {
        ValueGrid {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// CSV with header `t,x,value`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,x,value")?;
        for n in 0..=self.grid.time_steps {
            let t = self.grid.t(n);
            for (j, v) in self.slice(n).iter().enumerate() {
                writeln!(out, "{:.16e},{:.16e},{:.16e}", t, self.grid.x(j), v)?;
            }
        }
        Ok(())
    }
}

/// Coefficients of `u_t + a u_xx + b u_x - k u + g = 0`.
#[derive(Clone)]
pub struct LinearProblem {
    pub diffusion: Coef1,
    pub drift: Coef1,
    pub discount: Coef1,
    pub source: Option<Coef1>,
    /// When set, `a`, `b` and `k` are evaluated once at `t = 0` and the
    /// factorized systems are reused for every step.
    pub time_homogeneous: bool,
}

impl LinearProblem {
    pub fn new(diffusion: Coef1, drift: Coef1, discount: Coef1) -> Self {
        Self {
            diffusion,
            drift,
            discount,
            source: None,
            time_homogeneous: false,
        }
    }

    /// `a = sigma^2 x^2 / 2`, `b = mu x`, constant `k`.
    pub fn gbm(mu: f64, sigma: f64, k: f64) -> Self {
        Self {
            diffusion: Arc::new(move |_, x| 0.5 * sigma * sigma * x * x),
            drift: Arc::new(move |_, x| mu * x),
            discount: Arc::new(move |_, _| k),
            source: None,
            time_homogeneous: true,
        }
    }

    pub fn with_source(mut self, g: Coef1) -> Self {
        self.source = Some(g);
        self
    }
}

/// Solves a linear Cauchy problem backward from `u(T, x) = terminal(x)`.
pub fn solve_linear_cauchy(
    problem: &LinearProblem,
    terminal: &dyn Fn(f64) -> f64,
    grid: &PdeGrid,
) -> Result<ValueGrid, SolverError> {
    let op = Operator {
        a: problem.diffusion.clone(),
        b: problem.drift.clone(),
        k: problem.discount.clone(),
        homogeneous: problem.time_homogeneous,
    };
    let phi: Vec<f64> = (0..=grid.space_steps).map(|j| terminal(grid.x(j))).collect();
    let xs: Vec<f64> = (0..=grid.space_steps).map(|j| grid.x(j)).collect();
    match &problem.source {
        None => march(grid, &op, &phi, &|_, _, out: &mut [f64]| out.fill(0.0), None),
        Some(g) => march(
            grid,
            &op,
            &phi,
            &|_, t, out: &mut [f64]| {
                for (o, x) in out.iter_mut().zip(&xs) {
                    *o = g(t, *x);
                }
            },
            None,
        ),
    }
}

struct Operator {
    a: Coef1,
    b: Coef1,
    k: Coef1,
    homogeneous: bool,
}

/// Tridiagonal rows of `L u = alpha u_{j-1} + beta u_j + gamma u_{j+1}` on
/// rows `0..J`, with the boundary closures already folded in.
struct Rows {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
}

impl Rows {
    fn build(op: &Operator, grid: &PdeGrid, t: f64, zero_right: bool) -> Result<Self, SolverError> {
        let jn = grid.space_steps;
        let h = grid.dx();
        let mut alpha = vec![0.0; jn];
        let mut beta = vec![0.0; jn];
        let mut gamma = vec![0.0; jn];
        beta[0] = -(op.k)(t, 0.0);
        for j in 1..jn {
            let x = grid.x(j);
            let a = (op.a)(t, x);
            if !(a > 0.0) {
                return Err(SolverError::unsupported(format!(
                    "diffusion coefficient a={a} is not positive at t={t}, x={x}"
                )));
            }
            let b = (op.b)(t, x);
            let d = a / (h * h);
            beta[j] = -2.0 * d - (op.k)(t, x);
            if b.abs() * h <= 2.0 * a {
                alpha[j] = d - b / (2.0 * h);
                gamma[j] = d + b / (2.0 * h);
            } else {
                // Cell Peclet number above one: upwind the drift to keep the
                // off-diagonals nonnegative.
                alpha[j] = d + neg_part(b) / h;
                gamma[j] = d + pos_part(b) / h;
                beta[j] -= b.abs() / h;
            }
        }
        let last = jn - 1;
        if !zero_right {
            alpha[last] -= gamma[last];
            beta[last] += 2.0 * gamma[last];
        }
        gamma[last] = 0.0;
        Ok(Self { alpha, beta, gamma })
    }

    /// `u + (1 - theta) dt L u + dt (theta g_now + (1 - theta) g_next)` on rows `0..J`.
    fn explicit_part(&self, theta: f64, dt: f64, u: &[f64], g_now: &[f64], g_next: &[f64], out: &mut [f64]) {
        let jn = self.beta.len();
        let (alpha, beta, gamma) = (&self.alpha[..jn], &self.beta[..jn], &self.gamma[..jn]);
        let (u, g_now, g_next) = (&u[..jn + 1], &g_now[..jn], &g_next[..jn]);
        let out = &mut out[..jn];
        let w = (1.0 - theta) * dt;
        let (a, b) = (theta * dt, (1.0 - theta) * dt);
        out[0] = u[0] + w * beta[0] * u[0] + a * g_now[0] + b * g_next[0];
        for j in 1..jn {
            let lu = alpha[j] * u[j - 1] + beta[j] * u[j] + gamma[j] * u[j + 1];
            out[j] = u[j] + w * lu + a * g_now[j] + b * g_next[j];
        }
    }
}

/// Twisted LU factors of `I - w L`: rows above the middle are eliminated
/// downward, rows below it upward, so the two recurrences are independent.
struct Factored {
    mid: usize,
    // Per row: inverse pivot, coupling used during elimination (already
    // scaled by the pivot) and coupling used during back substitution.
    inv_pivot: Vec<f64>,
    elim: Vec<f64>,
    back: Vec<f64>,
    mid_lower: f64,
    mid_upper: f64,
    mid_inv_pivot: f64,
}

impl Factored {
    fn new(rows: &Rows, w: f64) -> Result<Self, SolverError> {
        let n = rows.beta.len();
        let mid = n / 2;
        let lower: Vec<f64> = rows.alpha.iter().map(|a| -w * a).collect();
        let upper: Vec<f64> = rows.gamma.iter().map(|g| -w * g).collect();
        let diag: Vec<f64> = rows.beta.iter().map(|b| 1.0 - w * b).collect();
        let mut inv_pivot = vec![0.0; n];
        let mut elim = vec![0.0; n];
        let mut back = vec![0.0; n];
        let check = |pivot: f64, j: usize| {
            if pivot.abs() < 1e-300 || !pivot.is_finite() {
                Err(SolverError::Invariant(format!("singular tridiagonal system at row {j}")))
            } else {
                Ok(1.0 / pivot)
            }
        };
        let mut prev = 0.0;
        for j in 0..mid {
            let ip = check(diag[j] - lower[j] * prev, j)?;
            inv_pivot[j] = ip;
            elim[j] = lower[j] * ip;
            back[j] = upper[j] * ip;
            prev = back[j];
        }
        let top = prev;
        let mut next = 0.0;
        for j in (mid + 1..n).rev() {
            let ip = check(diag[j] - upper[j] * next, j)?;
            inv_pivot[j] = ip;
            elim[j] = upper[j] * ip;
            back[j] = lower[j] * ip;
            next = back[j];
        }
        let mid_inv_pivot = check(diag[mid] - lower[mid] * top - upper[mid] * next, mid)?;
        Ok(Self {
            mid,
            inv_pivot,
            elim,
            back,
            mid_lower: lower[mid],
            mid_upper: upper[mid],
            mid_inv_pivot,
        })
    }

    fn solve(&self, r: &mut [f64]) {
        let n = self.inv_pivot.len();
        let m = self.mid;
        let below = n - 1 - m;
        let (ip, el, bk) = (&self.inv_pivot[..n], &self.elim[..n], &self.back[..n]);
        let r = &mut r[..n];
        let (mut y, mut z) = (0.0, 0.0);
        for k in 0..below {
            let j = k;
            y = r[j] * ip[j] - el[j] * y;
            r[j] = y;
            let i = n - 1 - k;
            z = r[i] * ip[i] - el[i] * z;
            r[i] = z;
        }
        for j in below..m {
            y = r[j] * ip[j] - el[j] * y;
            r[j] = y;
        }
        let x_mid = (r[m] - self.mid_lower * y - self.mid_upper * z) * self.mid_inv_pivot;
        r[m] = x_mid;
        let (mut up, mut down) = (x_mid, x_mid);
        for k in 0..below {
            let j = m - 1 - k;
            up = r[j] - bk[j] * up;
            r[j] = up;
            let i = m + 1 + k;
            down = r[i] - bk[i] * down;
            r[i] = down;
        }
        for j in (0..m - below).rev() {
            up = r[j] - bk[j] * up;
            r[j] = up;
        }
    }
}

/// `source(n, t_n, out)` fills `g(t_n, x_j)` for all nodes.
type SourceFill<'a> = &'a (dyn Fn(usize, f64, &mut [f64]) + Sync);

/// Backward time stepping. `buffer` is storage for the result that may be
/// recycled from a grid of the same shape.
fn march(
    grid: &PdeGrid,
    op: &Operator,
    terminal: &[f64],
    source: SourceFill<'_>,
    buffer: Option<Vec<f64>>,
) -> Result<ValueGrid, SolverError> {
    grid.validate()?;
    let jn = grid.space_steps;
    let np = grid.time_steps;
    let width = jn + 1;
    let dt = grid.dt();

    let mut values = buffer.unwrap_or_default();
    values.resize((np + 1) * width, 0.0);
    values[np * width..].copy_from_slice(terminal);

    let mut g_next = vec![0.0; width];
    let mut g_now = vec![0.0; width];
    source(np, grid.t(np), &mut g_next);

    let zero_right = match grid.right {
        RightBoundary::Zero => true,
        RightBoundary::Linear => false,
        RightBoundary::Auto => {
            terminal[jn] == 0.0 && terminal[jn - 1] == 0.0 && g_next[jn] == 0.0 && g_next[jn - 1] == 0.0
        }
    };

    // Cached for time-homogeneous operators: rows, CN factors, implicit factors.
    let fixed = if op.homogeneous {
        let rows = Rows::build(op, grid, 0.0, zero_right)?;
        let cn = Factored::new(&rows, grid.theta * dt)?;
        let implicit = Factored::new(&rows, dt)?;
        Some((rows, cn, implicit))
    } else {
        None
    };
    let mut rows_next = match fixed {
        Some(_) => None,
        None => Some(Rows::build(op, grid, grid.t(np), zero_right)?),
    };

    for step in 0..np {
        let n = np - 1 - step;
        let t_now = grid.t(n);
        let implicit = step < grid.rannacher_steps;
        let theta = if implicit { 1.0 } else { grid.theta };
        source(n, t_now, &mut g_now);
        let (head, tail) = values.split_at_mut((n + 1) * width);
        let u_next = &tail[..width];
        let u_now = &mut head[n * width..];

        let rows_now = match &fixed {
            Some(_) => None,
            None => Some(Rows::build(op, grid, t_now, zero_right)?),
        };
        let explicit_rows = match &fixed {
            Some((rows, _, _)) => rows,
            None => rows_next.as_ref().expect("rows at the later node"),
        };
        let u_now = &mut u_now[..width];
        explicit_rows.explicit_part(theta, dt, u_next, &g_now, &g_next, u_now);
        let rhs = &mut u_now[..jn];
        match (&fixed, &rows_now) {
            (Some((_, _, f)), _) if implicit => f.solve(rhs),
            (Some((_, f, _)), _) => f.solve(rhs),
            (None, Some(r)) => Factored::new(r, theta * dt)?.solve(rhs),
            (None, None) => unreachable!("rows are built for non-homogeneous operators"),
        }
        if rows_now.is_some() {
            rows_next = rows_now;
        }

        u_now[jn] = if zero_right { 0.0 } else { 2.0 * u_now[jn - 1] - u_now[jn - 2] };
        std::mem::swap(&mut g_now, &mut g_next);
    }
    if !all_finite(&values) {
        let k = values.iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(SolverError::Invariant(format!(
            "non-finite solution value at t={}, x={}",
            grid.t(k / width),
            grid.x(k % width)
        )));
    }
    Ok(ValueGrid {
        grid: grid.clone(),
        values,
    })
}

fn all_finite(v: &[f64]) -> bool {
    // Lane-wise accumulation of `x * 0`, which is NaN exactly for non-finite `x`.
    let mut acc = [0.0f64; 8];
    let chunks = v.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] += c[k] * 0.0;
        }
    }
    acc.iter().chain(tail).all(|a| (a * 0.0) == 0.0)
}

/// Which intensities enter the discount rate of a model-level solve.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Discounting {
    Riskless,
    Counterparty,
    Both,
}

/// A claim, a 1-D factor and intensities, with grid nodes precomputed.
struct Model1d<'a> {
    claim: &'a Claim,
    dynamics: &'a Dynamics,
    hazard: &'a HazardModel,
    grid: &'a PdeGrid,
    xs: Vec<f64>,
}

impl<'a> Model1d<'a> {
    fn new(
        claim: &'a Claim,
        dynamics: &'a Dynamics,
        hazard: &'a HazardModel,
        grid: &'a PdeGrid,
    ) -> Result<Self, SolverError> {
        if dynamics.dim() != 1 || dynamics.noise_dim() != 1 {
            return Err(SolverError::unsupported(format!(
                "finite differences need a 1-D factor with 1-D noise, got m={}, n={}",
                dynamics.dim(),
                dynamics.noise_dim()
            )));
        }
        if (grid.maturity - claim.maturity).abs() > 1e-12 * claim.maturity.max(1.0) {
            return Err(SolverError::unsupported(format!(
                "grid maturity {} differs from claim maturity {}",
                grid.maturity, claim.maturity
            )));
        }
        let xs = (0..=grid.space_steps).map(|j| grid.x(j)).collect();
        Ok(Self {
            claim,
            dynamics,
            hazard,
            grid,
            xs,
        })
    }

    fn operator(&self, discounting: Discounting) -> Operator {
        let d1 = self.dynamics.clone();
        let d2 = self.dynamics.clone();
        let claim = self.claim.clone();
        let hazard = self.hazard.clone();
        let constant_hazard = match discounting {
            Discounting::Riskless => true,
            Discounting::Counterparty => hazard.counterparty().as_constant().is_some(),
            Discounting::Both => {
                hazard.counterparty().as_constant().is_some()
                    && hazard.investor().map_or(true, |c| c.as_constant().is_some())
            }
        };
        let homogeneous = self.dynamics.as_gbm().is_some() && claim.discount.as_constant().is_some() && constant_hazard;
        Operator {
            a: Arc::new(move |t, x| {
                let mut s = [0.0];
                d1.diffusion_into(t, &[x], &mut s);
                0.5 * s[0] * s[0]
            }),
            b: Arc::new(move |t, x| {
                let mut m = [0.0];
                d2.drift_into(t, &[x], &mut m);
                m[0]
            }),
            k: Arc::new(move |t, x| {
                let p = [x];
                let r = claim.r(t, &p);
                match discounting {
                    Discounting::Riskless => r,
                    Discounting::Counterparty => r + hazard.lambda(t, &p),
                    Discounting::Both => r + hazard.lambda(t, &p) + hazard.lambda_bar(t, &p),
                }
            }),
            homogeneous,
        }
    }

    fn terminal(&self) -> Vec<f64> {
        self.xs.iter().map(|x| self.claim.payoff.eval(&[*x])).collect()
    }

    fn solve(
        &self,
        discounting: Discounting,
        terminal: &[f64],
        source: SourceFill<'_>,
        buffer: Option<Vec<f64>>,
    ) -> Result<ValueGrid, SolverError> {
        march(self.grid, &self.operator(discounting), terminal, source, buffer)
    }

    fn riskfree(&self) -> Result<ValueGrid, SolverError> {
        let fill = |_: usize, t: f64, out: &mut [f64]| {
            for (o, x) in out.iter_mut().zip(&self.xs) {
                *o = self.claim.c(t, &[*x]);
            }
        };
        self.solve(Discounting::Riskless, &self.terminal(), &fill, None)
    }

    /// One unilateral Picard step: discount `r + lambda`, source `c + lambda f(prev)`.
    fn picard_step(&self, prev: &ValueGrid, buffer: Option<Vec<f64>>) -> Result<ValueGrid, SolverError> {
        let f = &self.claim.closeout;
        let constant = (
            self.claim.cashflow.as_constant(),
            self.hazard.counterparty().as_constant(),
            f.kind(),
        );
        let fill = |n: usize, t: f64, out: &mut [f64]| {
            let ys = prev.slice(n);
            if let (Some(c), Some(lambda), CloseoutKind::Recovery { rate }) = constant {
                let lambda = lambda.max(0.0);
                for (o, y) in out.iter_mut().zip(ys) {
                    *o = c + lambda * (rate * pos_part(*y) - neg_part(*y));
                }
                return;
            }
            for ((o, x), y) in out.iter_mut().zip(&self.xs).zip(ys) {
                let p = [*x];
                *o = self.claim.c(t, &p) + self.hazard.lambda(t, &p) * f.eval(t, &p, *y);
            }
        };
        self.solve(Discounting::Counterparty, &self.terminal(), &fill, buffer)
    }

    fn investor_closeout(&self, t: f64, x: &[f64], y: f64) -> f64 {
        self.claim.investor_closeout.as_ref().map_or(y, |f| f.eval(t, x, y))
    }

    /// Bilateral step: discount `r + lambda + lambdabar`,
    /// source `c + lambda f(prev) + lambdabar fbar(prev)`.
    fn bilateral_step(&self, prev: &ValueGrid, buffer: Option<Vec<f64>>) -> Result<ValueGrid, SolverError> {
        let f = &self.claim.closeout;
        let fill = |n: usize, t: f64, out: &mut [f64]| {
            for (j, (o, x)) in out.iter_mut().zip(&self.xs).enumerate() {
                let p = [*x];
                let y = prev.value(n, j);
                *o = self.claim.c(t, &p)
                    + self.hazard.lambda(t, &p) * f.eval(t, &p, y)
                    + self.hazard.lambda_bar(t, &p) * self.investor_closeout(t, &p, y);
            }
        };
        self.solve(Discounting::Both, &self.terminal(), &fill, buffer)
    }

    /// Lower bound `J`: discount `r`, source `-|c| + lambda f(0)`, terminal `-|phi|`.
    fn lower_bound(&self) -> Result<ValueGrid, SolverError> {
        let f = &self.claim.closeout;
        let fill = |_: usize, t: f64, out: &mut [f64]| {
            for (o, x) in out.iter_mut().zip(&self.xs) {
                let p = [*x];
                *o = -self.claim.c(t, &p).abs() + self.hazard.lambda(t, &p) * f.eval(t, &p, 0.0);
            }
        };
        let terminal: Vec<f64> = self.terminal().iter().map(|v| -v.abs()).collect();
        self.solve(Discounting::Riskless, &terminal, &fill, None)
    }

    /// Upper bound `I`: discount `r`, source `c + lambdabar (fbar(V) - V)`, terminal `phi`.
    fn upper_bound(&self, v: &ValueGrid) -> Result<ValueGrid, SolverError> {
        let fill = |n: usize, t: f64, out: &mut [f64]| {
            for (j, (o, x)) in out.iter_mut().zip(&self.xs).enumerate() {
                let p = [*x];
                let y = v.value(n, j);
                *o = self.claim.c(t, &p)
                    + self.hazard.lambda_bar(t, &p) * (self.investor_closeout(t, &p, y) - y);
            }
        };
        self.solve(Discounting::Riskless, &self.terminal(), &fill, None)
    }
}

/// Solves `u_t + L u - r u + c = 0`, `u(T) = phi`: the risk-free value `U`.
pub fn riskfree_solve(claim: &Claim, dynamics: &Dynamics, grid: &PdeGrid) -> Result<ValueGrid, SolverError> {
    let hazard = HazardModel::none();
    Model1d::new(claim, dynamics, &hazard, grid)?.riskfree()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Keep every iterate; otherwise only `V^0`, `V^1` and the last one.
    pub keep_iterates: bool,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            keep_iterates: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PicardReport {
    /// `V^0, V^1, ...`; all iterates or `[V^0, V^1, V^k*]` depending on options.
    pub iterates: Vec<ValueGrid>,
    /// `sup |V^k - V^{k-1}|` for `k = 1..=k*`.
    pub sup_norm_deltas: Vec<f64>,
    /// `sup (V^k - V^{k-1})` for each `k`.
    pub max_increase: Vec<f64>,
    /// `sup (V^{k-1} - V^k)` for each `k`.
    pub max_decrease: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl PicardReport {
    pub fn initial(&self) -> &ValueGrid {
        &self.iterates[0]
    }

    /// `V^1`, which for the unilateral iteration is the risk-free-closeout value.
    pub fn first_iterate(&self) -> &ValueGrid {
        &self.iterates[1]
    }

    pub fn solution(&self) -> &ValueGrid {
        self.iterates.last().expect("at least one iterate")
    }
}

fn iterate(
    start: ValueGrid,
    options: &PicardOptions,
    mut step: impl FnMut(&ValueGrid, Option<Vec<f64>>) -> Result<ValueGrid, SolverError>,
) -> Result<PicardReport, SolverError> {
    let mut report = PicardReport {
        iterates: vec![start],
        sup_norm_deltas: Vec::new(),
        max_increase: Vec::new(),
        max_decrease: Vec::new(),
        converged: false,
        iterations: 0,
    };
    let mut rising = 0;
    let mut spare = None;
    for k in 1..=options.max_iter.max(1) {
        let prev = report.iterates.last().expect("nonempty");
        let next = step(prev, spare.take())?;
        let (mut increase, mut decrease) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (a, b) in next.values.iter().zip(&prev.values) {
            let d = a - b;
            if d > increase {
                increase = d;
            }
            if -d > decrease {
                decrease = -d;
            }
        }
        let delta = increase.max(decrease).max(0.0);
        report.max_increase.push(increase);
        report.max_decrease.push(decrease);
        if let Some(last) = report.sup_norm_deltas.last() {
            rising = if delta > *last { rising + 1 } else { 0 };
        }
        report.sup_norm_deltas.push(delta);
        report.iterations = k;
        if !options.keep_iterates && report.iterates.len() >= 3 {
            spare = report.iterates.pop().map(|g| g.values);
        }
        report.iterates.push(next);
        if rising >= 3 {
            return Err(SolverError::Diverged { iteration: k, delta });
        }
        if delta < options.tol {
            report.converged = true;
            break;
        }
    }
    Ok(report)
}

/// Picard iteration for the unilateral valuation equation, starting at `V^0 = U`.
pub fn picard_solve(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    grid: &PdeGrid,
    options: &PicardOptions,
) -> Result<PicardReport, SolverError> {
    let model = Model1d::new(claim, dynamics, hazard, grid)?;
    let u = model.riskfree()?;
    iterate(u, options, |prev, buf| model.picard_step(prev, buf))
}

/// Same as [`picard_solve`] with a precomputed risk-free value.
pub fn picard_solve_from(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    grid: &PdeGrid,
    riskfree: ValueGrid,
    options: &PicardOptions,
) -> Result<PicardReport, SolverError> {
    let model = Model1d::new(claim, dynamics, hazard, grid)?;
    if riskfree.grid != *grid {
        return Err(SolverError::unsupported("risk-free value was computed on a different grid"));
    }
    iterate(riskfree, options, |prev, buf| model.picard_step(prev, buf))
}

/// One more Picard step from `v`; the sup-norm change is the fixed-point residual.
pub fn picard_residual(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    v: &ValueGrid,
) -> Result<f64, SolverError> {
    let model = Model1d::new(claim, dynamics, hazard, &v.grid)?;
    Ok(model.picard_step(v, None)?.sup_distance(v))
}

/// `V0`: `U` first, then the linear solve with source `c + lambda f(U)`.
pub fn riskfree_closeout_solve(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    grid: &PdeGrid,
) -> Result<ValueGrid, SolverError> {
    let model = Model1d::new(claim, dynamics, hazard, grid)?;
    let u = model.riskfree()?;
    model.picard_step(&u, None)
}

/// Risk-free value, both pre-default values and the two CVAs.
#[derive(Debug, Clone)]
pub struct CvaCurves {
    pub u: ValueGrid,
    pub v: ValueGrid,
    pub v0: ValueGrid,
    /// `U - V`, replacement closeout.
    pub pi: ValueGrid,
    /// `U - V0`, risk-free closeout.
    pub pi0: ValueGrid,
    pub picard_iterations: usize,
}

impl CvaCurves {
    /// `(Pi - Pi0) / Pi` at `(0, x)`; zero when `Pi` vanishes.
    pub fn relative_underestimate(&self, x: f64) -> f64 {
        let pi = self.pi.at_origin(x);
        if pi == 0.0 {
            return 0.0;
        }
        (pi - self.pi0.at_origin(x)) / pi
    }
}

/// Computes [`CvaCurves`] and checks `0 <= Pi0 <= Pi` gridwise within `tol`.
pub fn cva_curves(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    grid: &PdeGrid,
    options: &PicardOptions,
    tol: f64,
) -> Result<CvaCurves, SolverError> {
    let model = Model1d::new(claim, dynamics, hazard, grid)?;
    let u = model.riskfree()?;
    cva_from_riskfree(&model, u, options, tol)
}

fn cva_from_riskfree(
    model: &Model1d<'_>,
    u: ValueGrid,
    options: &PicardOptions,
    tol: f64,
) -> Result<CvaCurves, SolverError> {
    let mut report = iterate(u, options, |prev, buf| model.picard_step(prev, buf))?;
    if !report.converged {
        return Err(SolverError::Invariant(format!(
            "Picard iteration did not reach tolerance {} in {} iterations",
            options.tol, options.max_iter
        )));
    }
    let iterations = report.iterations;
    let v = report.iterates.pop().expect("solution");
    let v0 = if report.iterates.len() >= 2 {
        report.iterates.swap_remove(1)
    } else {
        v.clone()
    };
    let u = report.iterates.swap_remove(0);
    let pi = u.zip_map(&v, |a, b| a - b);
    let pi0 = u.zip_map(&v0, |a, b| a - b);
    let excess = pi0.max_excess(&pi);
    if excess > tol {
        return Err(SolverError::Invariant(format!("Pi0 exceeds Pi by {excess:e}")));
    }
    let low = pi0.values.iter().copied().fold(f64::INFINITY, f64::min);
    if low < -tol {
        return Err(SolverError::Invariant(format!("Pi0 is negative ({low:e})")));
    }
    Ok(CvaCurves {
        u,
        v,
        v0,
        pi,
        pi0,
        picard_iterations: iterations,
    })
}

/// Relative CVA underestimate at `(0, x0)` for several constant intensities,
/// sharing one risk-free solve. Intensities are processed in parallel.
pub fn underestimate_sweep(
    claim: &Claim,
    dynamics: &Dynamics,
    lambdas: &[f64],
    grid: &PdeGrid,
    options: &PicardOptions,
) -> Result<Vec<f64>, SolverError> {
    let x0 = dynamics.x0()[0];
    let u = riskfree_solve(claim, dynamics, grid)?;
    let u_x0 = u.at_origin(x0);
    lambdas
        .par_iter()
        .map(|lambda| {
            let hazard = HazardModel::constant(*lambda)?;
            let model = Model1d::new(claim, dynamics, &hazard, grid)?;
            let v1 = model.picard_step(&u, None)?;
            let pi0 = u_x0 - v1.at_origin(x0);
            let report = iterate(v1, options, |prev, buf| model.picard_step(prev, buf))?;
            if !report.converged {
                return Err(SolverError::Invariant(format!(
                    "Picard iteration did not converge for lambda={lambda}"
                )));
            }
            let pi = u_x0 - report.solution().at_origin(x0);
            Ok(if pi == 0.0 { 0.0 } else { (pi - pi0) / pi })
        })
        .collect()
}

/// Bilateral iteration with its unilateral input `V`.
#[derive(Debug, Clone)]
pub struct BilateralReport {
    /// Converged unilateral value `V`.
    pub unilateral: ValueGrid,
    /// `Psi^0 = Psi_0, Psi^1, ...`.
    pub report: PicardReport,
}

/// Bilateral Picard iteration started at `Psi_0`. Fails if an iterate drops
/// below its predecessor, or the limit below `Psi_0`, by more than `tol`.
pub fn bilateral_picard_solve(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    grid: &PdeGrid,
    options: &PicardOptions,
    tol: f64,
) -> Result<BilateralReport, SolverError> {
    let model = Model1d::new(claim, dynamics, hazard, grid)?;
    let unilateral_options = PicardOptions {
        keep_iterates: false,
        ..*options
    };
    let u = model.riskfree()?;
    let v = iterate(u, &unilateral_options, |prev, buf| model.picard_step(prev, buf))?
        .iterates
        .pop()
        .expect("solution");
    let psi0 = model.bilateral_step(&v, None)?;
    let report = iterate(psi0, options, |prev, buf| model.bilateral_step(prev, buf))?;
    for (k, drop) in report.max_decrease.iter().enumerate() {
        if *drop > tol {
            return Err(SolverError::Invariant(format!(
                "bilateral iterate {} fell below its predecessor by {drop:e}",
                k + 1
            )));
        }
    }
    let below = report.initial().max_excess(report.solution());
    if below > tol {
        return Err(SolverError::Invariant(format!("Psi fell below Psi_0 by {below:e}")));
    }
    Ok(BilateralReport {
        unilateral: v,
        report,
    })
}

/// Bound functions: `J` below every unilateral iterate, `I` above every bilateral one.
#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: ValueGrid,
    pub upper: ValueGrid,
}

/// `J` and `I`, the latter built from the converged unilateral value `v`.
pub fn sandwich_bounds(
    claim: &Claim,
    dynamics: &Dynamics,
    hazard: &HazardModel,
    v: &ValueGrid,
) -> Result<Bounds, SolverError> {
    let model = Model1d::new(claim, dynamics, hazard, &v.grid)?;
    Ok(Bounds {
        lower: model.lower_bound()?,
        upper: model.upper_bound(v)?,
    })
}

/// Closeout used by the bilateral examples: `fbar(y) = y^+ - R' y^-`.
pub fn investor_recovery(rate: f64) -> Result<CloseoutFunction, SolverError> {
    Ok(CloseoutFunction::investor_recovery(rate)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{bs_put, figure1_relative_error, replacement_value_nonneg, riskfree_closeout_value, ConstParams};
    use crate::model::{CloseoutSide, Payoff};

    fn put(p: &ConstParams) -> (Claim, Dynamics) {
        let claim = Claim::new(
            Payoff::BasketPut { strike: p.strike },
            p.maturity,
            CloseoutFunction::recovery(p.recovery).unwrap(),
        )
        .unwrap()
        .with_discount(p.r)
        .unwrap();
        (claim, Dynamics::gbm_uniform(1, p.mu, p.sigma, p.x0).unwrap())
    }

    #[test]
    fn black_scholes_interior() {
        let p = ConstParams {
            maturity: 1.0,
            ..ConstParams::underestimate_put(0.0)
        };
        let grid = PdeGrid::new(2000, 2000, 4.0, 1.0).unwrap();
        let u = solve_linear_cauchy(&LinearProblem::gbm(p.r, p.sigma, p.r), &|x| (1.0 - x).max(0.0), &grid).unwrap();
        let mut err: f64 = 0.0;
        for j in 400..=1600 {
            err = err.max((u.value(0, j) - bs_put(&p, 0.0, grid.x(j))).abs());
        }
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_discounting() {
        let grid = PdeGrid::new(50, 400, 3.0, 2.0).unwrap();
        let grid = grid.with_rannacher_steps(0);
        let problem = LinearProblem::gbm(0.1, 0.3, 0.07);
        let u = solve_linear_cauchy(&problem, &|_| 1.0, &grid).unwrap();
        for n in 0..=400 {
            let exact = (-0.07 * (2.0 - grid.t(n))).exp();
            for j in 0..=50 {
                assert!((u.value(n, j) - exact).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pure_source_integration() {
        let grid = PdeGrid::new(50, 100, 3.0, 2.0).unwrap();
        let problem = LinearProblem::gbm(0.1, 0.3, 0.0).with_source(Arc::new(|_, _| 1.0));
        let u = solve_linear_cauchy(&problem, &|_| 0.0, &grid).unwrap();
        for n in 0..=100 {
            for j in 0..=50 {
                assert!((u.value(n, j) - (2.0 - grid.t(n))).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn time_dependent_coefficients_match_homogeneous_path() {
        let grid = PdeGrid::new(200, 200, 4.0, 1.0).unwrap();
        let fast = LinearProblem::gbm(0.05, 0.2, 0.05);
        let slow = LinearProblem {
            time_homogeneous: false,
            ..fast.clone()
        };
        let a = solve_linear_cauchy(&fast, &|x| (1.0 - x).max(0.0), &grid).unwrap();
        let b = solve_linear_cauchy(&slow, &|x| (1.0 - x).max(0.0), &grid).unwrap();
        assert!(a.sup_distance(&b) < 1e-13);
    }

    #[test]
    fn rejects_degenerate_diffusion() {
        let grid = PdeGrid::new(50, 10, 3.0, 1.0).unwrap();
        let problem = LinearProblem::gbm(0.1, 0.0, 0.0);
        assert!(matches!(
            solve_linear_cauchy(&problem, &|_| 1.0, &grid),
            Err(SolverError::Unsupported(_))
        ));
    }

    #[test]
    fn terminal_slice_is_exact_payoff() {
        let p = ConstParams::underestimate_put(0.0);
        let (claim, dynamics) = put(&p);
        let grid = PdeGrid::for_gbm(100, 50, &dynamics, p.maturity).unwrap();
        let u = riskfree_solve(&claim, &dynamics, &grid).unwrap();
        for j in 0..=100 {
            assert_eq!(u.value(50, j), (1.0 - grid.x(j)).max(0.0));
        }
    }

    #[test]
    fn zero_intensity_stops_at_first_iterate() {
        let p = ConstParams::underestimate_put(0.0);
        let (claim, dynamics) = put(&p);
        let grid = PdeGrid::for_gbm(200, 100, &dynamics, p.maturity).unwrap();
        let report =
            picard_solve(&claim, &dynamics, &HazardModel::constant(0.0).unwrap(), &grid, &PicardOptions::default())
                .unwrap();
        assert_eq!(report.iterations, 1);
        assert!(report.converged);
        assert_eq!(report.initial(), report.solution());
    }

    #[test]
    fn identity_closeout_gives_riskfree_value() {
        let p = ConstParams::underestimate_put(0.3);
        let (claim, dynamics) = put(&p);
        let claim = claim.with_closeout(CloseoutFunction::identity(CloseoutSide::Counterparty));
        let grid = PdeGrid::for_gbm(200, 100, &dynamics, p.maturity).unwrap();
        let hazard = HazardModel::constant(0.3).unwrap();
        let report = picard_solve(&claim, &dynamics, &hazard, &grid, &PicardOptions::default()).unwrap();
        assert!(report.solution().sup_distance(report.initial()) < 1e-7);
    }

    #[test]
    fn underestimate_configuration() {
        let p = ConstParams::underestimate_put(0.3);
        let (claim, dynamics) = put(&p);
        let grid = PdeGrid::for_gbm(1000, 1000, &dynamics, p.maturity).unwrap();
        let hazard = HazardModel::constant(p.lambda).unwrap();
        let curves = cva_curves(&claim, &dynamics, &hazard, &grid, &PicardOptions::default(), 1e-6).unwrap();
        let u = bs_put(&p, 0.0, 1.0);
        let v = curves.v.at_origin(1.0);
        let v0 = curves.v0.at_origin(1.0);
        assert!((v - replacement_value_nonneg(&p, u, 0.0).unwrap()).abs() < 1e-3);
        assert!((v - (-1.5f64).exp() * u).abs() < 1e-3);
        assert!((v0 - riskfree_closeout_value(&p, u, 0.0).unwrap()).abs() < 1e-3);
        let e = curves.relative_underestimate(1.0);
        assert!((e - figure1_relative_error(0.3, 0.5, 10.0).unwrap()).abs() < 2e-3, "{e}");
    }

    #[test]
    fn first_iterate_is_riskfree_closeout_value() {
        let p = ConstParams::underestimate_put(0.3);
        let (claim, dynamics) = put(&p);
        let grid = PdeGrid::for_gbm(300, 200, &dynamics, p.maturity).unwrap();
        let hazard = HazardModel::constant(p.lambda).unwrap();
        let report = picard_solve(&claim, &dynamics, &hazard, &grid, &PicardOptions::default()).unwrap();
        let v0 = riskfree_closeout_solve(&claim, &dynamics, &hazard, &grid).unwrap();
        assert!(report.first_iterate().sup_distance(&v0) < 1e-10);
        // Monotone decreasing iterates with shrinking steps.
        assert!(report.max_increase.iter().all(|d| *d <= 1e-12));
        assert!(report.sup_norm_deltas.windows(2).all(|w| w[1] < w[0]));
        assert!(picard_residual(&claim, &dynamics, &hazard, report.solution()).unwrap() < 1e-8);
    }

    #[test]
    fn zero_recovery_closeouts_coincide() {
        let p = ConstParams {
            recovery: 0.0,
            ..ConstParams::underestimate_put(0.3)
        };
        let (claim, dynamics) = put(&p);
        let grid = PdeGrid::for_gbm(300, 200, &dynamics, p.maturity).unwrap();
        let hazard = HazardModel::constant(p.lambda).unwrap();
        let curves = cva_curves(&claim, &dynamics, &hazard, &grid, &PicardOptions::default(), 1e-6).unwrap();
        assert!(curves.pi.sup_distance(&curves.pi0) < 1e-6);
    }

    #[test]
    fn non_contractive_closeout_diverges() {
        let p = ConstParams::underestimate_put(1.0);
        let (claim, dynamics) = put(&p);
        let claim = claim.with_closeout(CloseoutFunction::custom(CloseoutSide::Counterparty, |_, _, y| 3.0 * y));
        let grid = PdeGrid::for_gbm(100, 50, &dynamics, p.maturity).unwrap();
        let hazard = HazardModel::constant(1.0).unwrap();
        let out = picard_solve(&claim, &dynamics, &hazard, &grid, &PicardOptions::default());
        assert!(matches!(out, Err(SolverError::Diverged { .. })), "{out:?}");
    }

    #[test]
    fn second_order_refinement() {
        let p = ConstParams::underestimate_put(0.3);
        let (claim, dynamics) = put(&p);
        let hazard = HazardModel::constant(p.lambda).unwrap();
        let values: Vec<f64> = [100, 200, 400, 800]
            .iter()
            .map(|&j| {
                let grid = PdeGrid::new(j, j, 5.0, p.maturity).unwrap();
                picard_solve(&claim, &dynamics, &hazard, &grid, &PicardOptions::default())
                    .unwrap()
                    .solution()
                    .at_origin(1.0)
            })
            .collect();
        for w in values.windows(3) {
            let ratio = (w[1] - w[0]) / (w[2] - w[1]);
            assert!((3.0..5.0).contains(&ratio), "{values:?} ratio {ratio}");
        }
    }

    #[test]
    fn csv_layout() {
        let grid = PdeGrid::new(4, 2, 1.0, 1.0).unwrap();
        let u = solve_linear_cauchy(&LinearProblem::gbm(0.0, 0.2, 0.0), &|_| 1.0, &grid).unwrap();
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3 * 5);
        assert_eq!(lines[0], "t,x,value");
        assert_eq!(lines[1], "0.0000000000000000e0,0.0000000000000000e0,1.0000000000000000e0");
    }

    #[test]
    fn interpolation_is_exact_for_cubics() {
        let grid = PdeGrid::new(10, 1, 1.0, 1.0).unwrap();
        let cubic = |x: f64| 1.0 + x - 2.0 * x * x + 0.5 * x * x * x;
        let values: Vec<f64> = (0..2).flat_map(|_| (0..=10).map(|j| cubic(grid.x(j)))).collect();
        let vg = ValueGrid { grid, values };
        for x in [0.0, 0.03, 0.47, 0.95, 1.0] {
            assert!((vg.at_origin(x) - cubic(x)).abs() < 1e-12);
        }
    }
}
