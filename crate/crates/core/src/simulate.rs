//! Seeded forward simulation of the factor process.
//!
//! Every path owns an independent ChaCha8 stream selected by `(seed, path)`;
//! within a path the draws for step `i` always sit at the same stream offset,
//! so a sample is a pure function of `(seed, path, step)` and batches are
//! bit-identical regardless of how many workers generate them.

use std::io::{self, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::erf::erfc_inv;

use crate::error::SolverError;
use crate::model::Dynamics;

/// Uniform time grid `0 = t_0 < ... < t_N = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    steps: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(steps: usize, horizon: f64) -> Result<Self, SolverError> {
        if steps == 0 {
            return Err(SolverError::unsupported("time grid needs at least one step"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(SolverError::unsupported(format!("time horizon {horizon} must be positive")));
        }
        Ok(Self { steps, horizon })
    }

    /// Accepts explicit nodes only if they start at zero and are uniformly spaced.
    pub fn from_nodes(nodes: &[f64]) -> Result<Self, SolverError> {
        if nodes.len() < 2 || nodes[0] != 0.0 {
            return Err(SolverError::unsupported("time nodes must start at 0 and have at least two entries"));
        }
        let grid = Self::new(nodes.len() - 1, nodes[nodes.len() - 1])?;
        let tol = 1e-12 * grid.horizon;
        for (i, t) in nodes.iter().enumerate() {
            if (t - grid.node(i)).abs() > tol {
                return Err(SolverError::unsupported("non-uniform time grids are not supported"));
            }
        }
        Ok(grid)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            self.horizon * i as f64 / self.steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.node(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    Euler,
    /// Log-exact sampling of the built-in GBM; uses the same Brownian increments.
    ExactGbm,
}

/// Standard normal quantile.
#[inline]
pub fn normal_quantile(u: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

/// Gaussian draws for one path, produced by inverse-CDF sampling.
pub struct GaussianStream {
    rng: ChaCha8Rng,
}

impl GaussianStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Uniform on the open interval `(0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        normal_quantile(self.uniform())
    }
}

/// A child seed for `(seed, tag)`, e.g. one per training iteration.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(tag);
    rng.next_u64()
}

/// Simulates path `path` into caller-provided buffers:
/// `states` holds `(N+1) * m` values, `increments` holds `N * n` values.
pub fn simulate_path(
    dynamics: &Dynamics,
    grid: &TimeGrid,
    scheme: Scheme,
    seed: u64,
    path: usize,
    states: &mut [f64],
    increments: &mut [f64],
) -> Result<(), SolverError> {
    let m = dynamics.dim();
    let n = dynamics.noise_dim();
    let steps = grid.steps();
    debug_assert_eq!(states.len(), (steps + 1) * m);
    debug_assert_eq!(increments.len(), steps * n);
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut normals = GaussianStream::new(seed, path as u64);
    for w in increments.iter_mut() {
        *w = sqrt_dt * normals.normal();
    }
    states[..m].copy_from_slice(dynamics.x0());
    match scheme {
        Scheme::Euler => {
            let mut drift = vec![0.0; m];
            let mut diff = vec![0.0; m];
            let mut scratch = vec![0.0; m * n];
            for i in 0..steps {
                let t = grid.node(i);
                let (done, rest) = states.split_at_mut((i + 1) * m);
                let x = &done[i * m..];
                let dw = &increments[i * n..(i + 1) * n];
                dynamics.drift_into(t, x, &mut drift);
                dynamics.diffuse_into(t, x, dw, &mut scratch, &mut diff);
                let next = &mut rest[..m];
                for k in 0..m {
                    next[k] = x[k] + drift[k] * dt + diff[k];
                }
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(SolverError::NonFiniteState { path, step: i + 1 });
                }
            }
        }
        Scheme::ExactGbm => {
            let gbm = dynamics
                .as_gbm()
                .ok_or_else(|| SolverError::unsupported("exact sampling requires GBM dynamics"))?;
            let log_drift: Vec<f64> = gbm
                .mu
                .iter()
                .zip(&gbm.sigma)
                .map(|(mu, s)| (mu - 0.5 * s * s) * dt)
                .collect();
            for i in 0..steps {
                let (done, rest) = states.split_at_mut((i + 1) * m);
                let x = &done[i * m..];
                let dw = &increments[i * n..(i + 1) * n];
                for k in 0..m {
                    rest[k] = x[k] * (log_drift[k] + gbm.sigma[k] * dw[k]).exp();
                }
                if rest[..m].iter().any(|v| !v.is_finite()) {
                    return Err(SolverError::NonFiniteState { path, step: i + 1 });
                }
            }
        }
    }
    Ok(())
}

/// `L` simulated paths with their Brownian increments.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    paths: usize,
    steps: usize,
    dim: usize,
    noise_dim: usize,
    states: Vec<f64>,
    increments: Vec<f64>,
}

impl PathBatch {
    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    #[inline]
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * (self.steps + 1) + step) * self.dim;
        &self.states[off..off + self.dim]
    }

    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * self.steps + step) * self.noise_dim;
        &self.increments[off..off + self.noise_dim]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(path, self.steps)
    }

    /// CSV with one row per `(path, step)`: `path,step,t,x0..x{m-1}`.
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, mut out: W) -> io::Result<()> {
        write!(out, "path,step,t")?;
        for k in 0..self.dim {
            write!(out, ",x{k}")?;
        }
        writeln!(out)?;
        for l in 0..self.paths {
            for i in 0..=self.steps {
                write!(out, "{l},{i},{}", grid.node(i))?;
                for v in self.state(l, i) {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Simulates `paths` paths in parallel on the current rayon pool.
pub fn simulate(
    dynamics: &Dynamics,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    scheme: Scheme,
) -> Result<PathBatch, SolverError> {
    if paths == 0 {
        return Err(SolverError::unsupported("need at least one path"));
    }
    let (m, n, steps) = (dynamics.dim(), dynamics.noise_dim(), grid.steps());
    let mut states = vec![0.0; paths * (steps + 1) * m];
    let mut increments = vec![0.0; paths * steps * n];
    let results: Vec<Result<(), SolverError>> = states
        .par_chunks_mut((steps + 1) * m)
        .zip(increments.par_chunks_mut(steps * n))
        .enumerate()
        .map(|(l, (s, w))| simulate_path(dynamics, grid, scheme, seed, l, s, w))
        .collect();
    results.into_iter().collect::<Result<(), _>>()?;
    Ok(PathBatch {
        paths,
        steps,
        dim: m,
        noise_dim: n,
        states,
        increments,
    })
}

/// Euler–Maruyama paths.
pub fn simulate_euler(
    dynamics: &Dynamics,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<PathBatch, SolverError> {
    simulate(dynamics, grid, paths, seed, Scheme::Euler)
}

/// Exact GBM paths driven by the same increments as [`simulate_euler`].
pub fn simulate_gbm_exact(
    dynamics: &Dynamics,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<PathBatch, SolverError> {
    if dynamics.as_gbm().is_none() {
        return Err(SolverError::unsupported("exact sampling requires GBM dynamics"));
    }
    simulate(dynamics, grid, paths, seed, Scheme::ExactGbm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(4, 2.0).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(g.dt(), 0.5);
        assert!(TimeGrid::new(0, 1.0).is_err());
        assert!(TimeGrid::from_nodes(&[0.0, 0.5, 1.0]).is_ok());
        assert!(TimeGrid::from_nodes(&[0.0, 0.4, 1.0]).is_err());
    }

    #[test]
    fn quantile_matches_known_points() {
        assert!(normal_quantile(0.5).abs() < 1e-15);
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((normal_quantile(0.001) + 3.090232306167813).abs() < 1e-11);
    }

    #[test]
    fn zero_dynamics_stay_at_x0() {
        let d = Dynamics::gbm_uniform(3, 0.0, 0.0, 0.7).unwrap();
        let g = TimeGrid::new(10, 1.0).unwrap();
        let batch = simulate_euler(&d, &g, 5, 1).unwrap();
        for l in 0..5 {
            for i in 0..=10 {
                assert_eq!(batch.state(l, i), &[0.7, 0.7, 0.7]);
            }
        }
    }

    #[test]
    fn deterministic_growth_matches_compound_recursion() {
        let d = Dynamics::new(
            vec![1.0],
            1,
            Arc::new(|_, x, out| out[0] = x[0]),
            Arc::new(|_, _, out| out[0] = 0.0),
        )
        .unwrap();
        let g = TimeGrid::new(100, 1.0).unwrap();
        let batch = simulate_euler(&d, &g, 2, 3).unwrap();
        let expected = 1.01f64.powi(100);
        assert!((batch.terminal(1)[0] - expected).abs() < 1e-12);
        assert!((expected - 2.704813829421526).abs() < 1e-12);
    }

    #[test]
    fn euler_gbm_terminal_mean() {
        let d = Dynamics::gbm(vec![0.05], vec![0.2], vec![0.8]).unwrap();
        let g = TimeGrid::new(100, 1.0).unwrap();
        let batch = simulate_euler(&d, &g, 100_000, 11).unwrap();
        let xs: Vec<f64> = (0..batch.paths()).map(|l| batch.terminal(l)[0]).collect();
        let (mean, var) = mean_var(&xs);
        let se = (var / xs.len() as f64).sqrt();
        let exact = 0.8 * 0.05f64.exp();
        assert!((mean - exact).abs() < 3.0 * se, "mean {mean} vs {exact} (se {se})");
    }

    #[test]
    fn exact_gbm_without_volatility_is_exponential() {
        let d = Dynamics::gbm(vec![0.07, -0.02], vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        let g = TimeGrid::new(50, 2.0).unwrap();
        let batch = simulate_gbm_exact(&d, &g, 3, 5).unwrap();
        for i in 0..=50 {
            let t = g.node(i);
            let x = batch.state(2, i);
            assert!((x[0] / (0.07 * t).exp() - 1.0).abs() < 1e-13);
            assert!((x[1] / (2.0 * (-0.02 * t).exp()) - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn exact_sampling_rejects_general_dynamics() {
        let d = Dynamics::new(
            vec![1.0],
            1,
            Arc::new(|_, _, out| out[0] = 0.0),
            Arc::new(|_, _, out| out[0] = 1.0),
        )
        .unwrap();
        let g = TimeGrid::new(4, 1.0).unwrap();
        assert!(simulate_gbm_exact(&d, &g, 2, 1).is_err());
    }

    #[test]
    fn euler_and_exact_share_increments() {
        let d = Dynamics::gbm_uniform(2, 0.05, 0.2, 1.0).unwrap();
        let g = TimeGrid::new(20, 1.0).unwrap();
        let a = simulate_euler(&d, &g, 10, 42).unwrap();
        let b = simulate_gbm_exact(&d, &g, 10, 42).unwrap();
        for l in 0..10 {
            for i in 0..20 {
                assert_eq!(a.increment(l, i), b.increment(l, i));
            }
        }
    }

    // Kolmogorov–Smirnov statistic of standardized log increments against N(0, 1).
    #[test]
    fn exact_log_increments_are_gaussian() {
        let (mu, sigma) = (0.05, 0.2);
        let d = Dynamics::gbm(vec![mu], vec![sigma], vec![0.8]).unwrap();
        let g = TimeGrid::new(1, 0.25).unwrap();
        let n = 10_000;
        let batch = simulate_gbm_exact(&d, &g, n, 99).unwrap();
        let dt = g.dt();
        let mut z: Vec<f64> = (0..n)
            .map(|l| {
                let r = (batch.terminal(l)[0] / 0.8).ln();
                (r - (mu - 0.5 * sigma * sigma) * dt) / (sigma * dt.sqrt())
            })
            .collect();
        z.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cdf = |x: f64| 0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2);
        let mut ks: f64 = 0.0;
        for (i, zi) in z.iter().enumerate() {
            let f = cdf(*zi);
            ks = ks.max((f - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - f).abs());
        }
        let critical = 1.628 / (n as f64).sqrt();
        assert!(ks < critical, "KS statistic {ks} >= {critical}");
    }

    // Weak-order-one check: with common increments the difference of terminal
    // means behaves like C/N, where C follows from E_euler = x0 (1 + mu T/N)^N.
    #[test]
    fn euler_weak_error_is_first_order() {
        let (mu, sigma, x0, t) = (0.5, 0.2, 0.8, 1.0);
        let d = Dynamics::gbm(vec![mu], vec![sigma], vec![x0]).unwrap();
        let paths = 20_000;
        let mut scaled = Vec::new();
        for n in [25usize, 50, 100, 200] {
            let g = TimeGrid::new(n, t).unwrap();
            let e = simulate_euler(&d, &g, paths, 7).unwrap();
            let x = simulate_gbm_exact(&d, &g, paths, 7).unwrap();
            let diffs: Vec<f64> = (0..paths).map(|l| e.terminal(l)[0] - x.terminal(l)[0]).collect();
            let (mean, var) = mean_var(&diffs);
            let se = (var / paths as f64).sqrt();
            let oracle = x0 * ((1.0 + mu * t / n as f64).powi(n as i32) - (mu * t).exp());
            assert!((mean - oracle).abs() < 4.0 * se + 1e-12, "N={n}: {mean} vs {oracle}");
            scaled.push(n as f64 * mean);
        }
        let c = scaled.iter().sum::<f64>() / scaled.len() as f64;
        for s in &scaled {
            assert!((s - c).abs() <= 0.1 * c.abs(), "N*diff {s} not close to C={c}");
        }
    }

    #[test]
    fn increments_have_brownian_moments_and_no_lag_correlation() {
        let d = Dynamics::gbm_uniform(1, 0.0, 0.2, 1.0).unwrap();
        let g = TimeGrid::new(50, 1.0).unwrap();
        let paths = 4_000;
        let batch = simulate_euler(&d, &g, paths, 2024).unwrap();
        let dt = g.dt();
        let mut all = Vec::new();
        let (mut num, mut den) = (0.0, 0.0);
        for l in 0..paths {
            for i in 0..50 {
                let w = batch.increment(l, i)[0];
                all.push(w);
                den += w * w;
                if i + 1 < 50 {
                    num += w * batch.increment(l, i + 1)[0];
                }
            }
        }
        let (mean, var) = mean_var(&all);
        let n = all.len() as f64;
        assert!(mean.abs() < 4.0 * (dt / n).sqrt());
        assert!((var / dt - 1.0).abs() < 0.02);
        let rho = num / den;
        assert!(rho.abs() < 3.0 / n.sqrt(), "lag-1 autocorrelation {rho}");
    }

    #[test]
    fn batches_are_reproducible_across_pool_sizes() {
        let d = Dynamics::gbm_uniform(3, 0.05, 0.2, 0.8).unwrap();
        let g = TimeGrid::new(30, 1.0).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_euler(&d, &g, 257, 77).unwrap())
        };
        let a = run(1);
        assert_eq!(a, run(3));
        assert_eq!(a, simulate_euler(&d, &g, 257, 77).unwrap());
        assert_ne!(a, simulate_euler(&d, &g, 257, 78).unwrap());
    }

    #[test]
    fn blow_up_is_reported_with_location() {
        let d = Dynamics::new(
            vec![10.0],
            1,
            Arc::new(|_, x, out| out[0] = x[0].powi(8)),
            Arc::new(|_, _, out| out[0] = 0.0),
        )
        .unwrap();
        let g = TimeGrid::new(100, 1.0).unwrap();
        match simulate_euler(&d, &g, 3, 1) {
            Err(SolverError::NonFiniteState { path: 0, step }) => assert!(step >= 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let d = Dynamics::gbm_uniform(2, 0.0, 0.0, 1.5).unwrap();
        let g = TimeGrid::new(2, 1.0).unwrap();
        let batch = simulate_euler(&d, &g, 1, 1).unwrap();
        let mut buf = Vec::new();
        batch.write_csv(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "path,step,t,x0,x1\n0,0,0,1.5,1.5\n0,1,0.5,1.5,1.5\n0,2,1,1.5,1.5\n");
    }
}
