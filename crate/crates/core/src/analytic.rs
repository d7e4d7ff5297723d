//! Closed-form values for the constant-coefficient GBM family
//! (constant `r`, `lambda`, `R`; zero cash flow; claims with nonnegative value).
//!
//! Two of the formulas here are derived rather than quoted, and are verified
//! against the finite-difference and Monte Carlo solvers in the test suites.
//!
//! **Replacement closeout.** Let `U` solve `L U - r U = 0`, `U(T) = phi`.
//! With `f(y) = R y^+ - y^-` and a value `V >= 0`, the nonlinear equation
//! `L V - (r + lambda) V + lambda f(V) = 0` becomes the linear
//! `L V - (r + (1 - R) lambda) V = 0`. Its solution is
//! `V = exp(-(1 - R) lambda (T - t)) U`, which is indeed nonnegative, so the
//! linearization is self-consistent (and unique by the comparison principle).
//!
//! **Risk-free closeout.** `V0(t,x) = E[ int_t^T lambda R U(s,X_s)
//! e^{-(r+lambda)(s-t)} ds + e^{-(r+lambda)(T-t)} phi(X_T) ]`. Because
//! `e^{-r s} U(s, X_s)` is a martingale (tower property of the expectation
//! defining `U`), `E[U(s,X_s)] e^{-r(s-t)} = U(t,x)`, and the integral
//! collapses to `[R (1 - e^{-lambda (T-t)}) + e^{-lambda (T-t)}] U(t,x)`.
//! Neither step needs the drift to equal `r`.
//!
//! The relative CVA underestimate `(Pi - Pi0) / Pi` then no longer depends on
//! `x`, `r`, `sigma` or `K`:
//! `1 - (1 - R)(1 - e^{-lambda T}) / (1 - e^{-(1 - R) lambda T})`.

use statrs::function::erf::erfc;

use crate::error::ModelError;

/// Parameters of the constant-coefficient model family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstParams {
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub recovery: f64,
    pub strike: f64,
    pub x0: f64,
    pub maturity: f64,
    pub dim: usize,
}

impl ConstParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(ModelError::invalid("sigma", "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ModelError::invalid("lambda", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.recovery) {
            return Err(ModelError::invalid("R", "must lie in [0, 1)"));
        }
        if !(self.maturity > 0.0 && self.maturity.is_finite()) {
            return Err(ModelError::invalid("T", "must be positive"));
        }
        if !(self.strike > 0.0) {
            return Err(ModelError::invalid("K", "must be positive"));
        }
        if self.dim == 0 {
            return Err(ModelError::invalid("d", "must be positive"));
        }
        Ok(())
    }

    /// The one-dimensional put used for the CVA-underestimate curve:
    /// `r = mu = 0.05`, `sigma = 0.2`, `K = x0 = 1`, `T = 10`, `R = 0.5`.
    pub fn underestimate_put(lambda: f64) -> Self {
        Self {
            r: 0.05,
            mu: 0.05,
            sigma: 0.2,
            lambda,
            recovery: 0.5,
            strike: 1.0,
            x0: 1.0,
            maturity: 10.0,
            dim: 1,
        }
    }

    /// The basket-put benchmark: `r = 0.03`, `mu = 0.05`, `sigma = 0.2`,
    /// `lambda = 0.1`, `R = 0.4`, `K = 1`, `x0 = 0.8`, `T = 1`.
    pub fn basket_put(dim: usize) -> Self {
        Self {
            r: 0.03,
            mu: 0.05,
            sigma: 0.2,
            lambda: 0.1,
            recovery: 0.4,
            strike: 1.0,
            x0: 0.8,
            maturity: 1.0,
            dim,
        }
    }
}

/// Standard normal distribution function.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Black–Scholes European put with rate `r`, volatility `sigma`, strike `K`
/// and time to maturity `T - t`. Returns the payoff for `t >= T`.
pub fn bs_put(p: &ConstParams, t: f64, x: f64) -> f64 {
    put_with_drift(p, p.r, t, x)
}

/// `e^{-r (T-t)} E[(K - X_T)^+ | X_t = x]` when `X` is a GBM with drift `mu`
/// rather than `r`. Coincides with [`bs_put`] when `mu = r`.
pub fn gbm_put_value(p: &ConstParams, t: f64, x: f64) -> f64 {
    put_with_drift(p, p.mu, t, x)
}

fn put_with_drift(p: &ConstParams, drift: f64, t: f64, x: f64) -> f64 {
    let tau = p.maturity - t;
    if tau <= 0.0 {
        return (p.strike - x).max(0.0);
    }
    if x <= 0.0 {
        return p.strike * (-p.r * tau).exp();
    }
    let vol = p.sigma * tau.sqrt();
    let d1 = ((x / p.strike).ln() + (drift + 0.5 * p.sigma * p.sigma) * tau) / vol;
    let d2 = d1 - vol;
    (-p.r * tau).exp() * (p.strike * norm_cdf(-d2) - x * (drift * tau).exp() * norm_cdf(-d1))
}

fn check_value(u: f64) -> Result<(), ModelError> {
    if u < 0.0 || !u.is_finite() {
        return Err(ModelError::invalid(
            "U",
            format!("risk-free value {u} must be finite and nonnegative for the linearized formula"),
        ));
    }
    Ok(())
}

/// Pre-default value under the replacement closeout: `e^{-(1-R) lambda (T-t)} U`.
pub fn replacement_value_nonneg(p: &ConstParams, u: f64, t: f64) -> Result<f64, ModelError> {
    check_value(u)?;
    Ok((-(1.0 - p.recovery) * p.lambda * (p.maturity - t)).exp() * u)
}

/// Pre-default value under the risk-free closeout:
/// `[R (1 - e^{-lambda (T-t)}) + e^{-lambda (T-t)}] U`.
pub fn riskfree_closeout_value(p: &ConstParams, u: f64, t: f64) -> Result<f64, ModelError> {
    check_value(u)?;
    let survival = (-p.lambda * (p.maturity - t)).exp();
    Ok((p.recovery * (1.0 - survival) + survival) * u)
}

/// Relative CVA underestimate of the risk-free closeout, `(Pi - Pi0) / Pi`.
pub fn figure1_relative_error(lambda: f64, recovery: f64, maturity: f64) -> Result<f64, ModelError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ModelError::invalid("lambda", "must be nonnegative"));
    }
    if !(0.0..1.0).contains(&recovery) {
        return Err(ModelError::invalid("R", "must lie in [0, 1)"));
    }
    if !(maturity > 0.0 && maturity.is_finite()) {
        return Err(ModelError::invalid("T", "must be positive"));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let lr = 1.0 - recovery;
    let riskfree_cva = lr * -(-lambda * maturity).exp_m1();
    let replacement_cva = -(-lr * lambda * maturity).exp_m1();
    Ok(1.0 - riskfree_cva / replacement_cva)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Cox–Ross–Rubinstein tree for a European put.
    fn binomial_put(p: &ConstParams, x: f64, steps: usize) -> f64 {
        let dt = p.maturity / steps as f64;
        let u = (p.sigma * dt.sqrt()).exp();
        let d = 1.0 / u;
        let disc = (-p.r * dt).exp();
        let q = ((p.r * dt).exp() - d) / (u - d);
        let mut v: Vec<f64> = (0..=steps)
            .map(|j| (p.strike - x * u.powi(j as i32) * d.powi((steps - j) as i32)).max(0.0))
            .collect();
        for n in (0..steps).rev() {
            for j in 0..=n {
                v[j] = disc * (q * v[j + 1] + (1.0 - q) * v[j]);
            }
        }
        v[0]
    }

    fn params(r: f64, sigma: f64, strike: f64, maturity: f64) -> ConstParams {
        ConstParams {
            r,
            mu: r,
            sigma,
            lambda: 0.0,
            recovery: 0.0,
            strike,
            x0: 1.0,
            maturity,
            dim: 1,
        }
    }

    #[test]
    fn put_in_vanishing_volatility_limit() {
        let p = params(0.0, 1e-8, 1.0, 1.0);
        assert!((bs_put(&p, 0.0, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn put_matches_binomial_tree() {
        let p = params(0.05, 0.2, 1.0, 10.0);
        let tree = binomial_put(&p, 1.0, 10_000);
        let bs = bs_put(&p, 0.0, 1.0);
        assert!((bs - tree).abs() < 1e-4, "bs {bs} tree {tree}");
    }

    #[test]
    fn deep_out_of_the_money_put_vanishes() {
        let p = params(0.05, 0.2, 1.0, 10.0);
        assert!(bs_put(&p, 0.0, 100.0) <= 1e-10);
    }

    #[test]
    fn put_at_maturity_is_payoff() {
        let p = params(0.05, 0.2, 1.0, 10.0);
        assert_eq!(bs_put(&p, 10.0, 0.7), 0.30000000000000004);
        assert_eq!(bs_put(&p, 11.0, 1.7), 0.0);
    }

    #[test]
    fn drifted_put_reduces_to_black_scholes() {
        let p = params(0.04, 0.3, 1.1, 2.0);
        assert_eq!(gbm_put_value(&p, 0.5, 0.9), bs_put(&p, 0.5, 0.9));
        // Higher drift lowers the expected put payoff.
        let q = ConstParams { mu: 0.1, ..p };
        assert!(gbm_put_value(&q, 0.5, 0.9) < bs_put(&p, 0.5, 0.9));
    }

    #[test]
    fn replacement_value_examples() {
        let mut p = ConstParams::basket_put(5);
        p.lambda = 0.0;
        assert_eq!(replacement_value_nonneg(&p, 0.77, 0.0).unwrap(), 0.77);
        let p = ConstParams {
            recovery: 1.0 - 1e-12,
            ..ConstParams::basket_put(5)
        };
        assert!((replacement_value_nonneg(&p, 0.77, 0.0).unwrap() - 0.77).abs() < 1e-9);
        let p = ConstParams::basket_put(5);
        let v = replacement_value_nonneg(&p, 0.7736, 0.0).unwrap();
        assert!((v - 0.7736 * (-0.06f64).exp()).abs() < 1e-15);
        assert!((v - 0.7285).abs() < 1e-4);
        assert!(replacement_value_nonneg(&p, -0.1, 0.0).is_err());
    }

    #[test]
    fn riskfree_closeout_examples() {
        let mut p = ConstParams::underestimate_put(0.0);
        assert_eq!(riskfree_closeout_value(&p, 0.4, 0.0).unwrap(), 0.4);
        p.lambda = 0.3;
        p.recovery = 0.0;
        let v = riskfree_closeout_value(&p, 0.4, 0.0).unwrap();
        assert!((v - (-3.0f64).exp() * 0.4).abs() < 1e-15);
        p.recovery = 0.5;
        let v = riskfree_closeout_value(&p, 1.0, 0.0).unwrap();
        let e3 = (-3.0f64).exp();
        assert!((v - (0.5 * (1.0 - e3) + e3)).abs() < 1e-15);
        assert!((v - 0.524_893_534).abs() < 1e-8);
        assert!(riskfree_closeout_value(&p, -1.0, 0.0).is_err());
    }

    #[test]
    fn underestimate_curve_points() {
        let e = figure1_relative_error(0.3, 0.5, 10.0).unwrap();
        assert!((e - 0.38849).abs() < 1e-4, "{e}");
        assert!(figure1_relative_error(1e-8, 0.5, 10.0).unwrap() < 1e-6);
        assert_eq!(figure1_relative_error(0.0, 0.5, 10.0).unwrap(), 0.0);
        for lambda in [0.01, 0.1, 0.3, 1.0, 5.0] {
            assert_eq!(figure1_relative_error(lambda, 0.0, 10.0).unwrap(), 0.0);
        }
        assert!(figure1_relative_error(-0.1, 0.5, 1.0).is_err());
        assert!(figure1_relative_error(0.1, 1.0, 1.0).is_err());
    }

    // Second-order series of both CVAs in lambda gives e ~ R lambda T / 2.
    #[test]
    fn underestimate_small_hazard_series() {
        for lambda in [1e-6, 1e-5, 1e-4] {
            let e = figure1_relative_error(lambda, 0.5, 10.0).unwrap();
            let series = 0.5 * lambda * 10.0 / 2.0;
            assert!((e - series).abs() < 1e-3 * series + 1e-13, "{e} vs {series}");
        }
    }

    #[test]
    fn underestimate_increases_with_hazard() {
        let mut prev = 0.0;
        for i in 1..=50 {
            let e = figure1_relative_error(0.01 * i as f64, 0.5, 10.0).unwrap();
            assert!(e > prev);
            assert!((0.0..1.0).contains(&e));
            prev = e;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn closeout_ordering(lambda in 0.0..2.0f64, rec in 0.0..0.999f64, tau in 0.001..30.0f64, u in 0.0..10.0f64) {
            let p = ConstParams { lambda, recovery: rec, maturity: tau, ..ConstParams::underestimate_put(lambda) };
            let v = replacement_value_nonneg(&p, u, 0.0).unwrap();
            let v0 = riskfree_closeout_value(&p, u, 0.0).unwrap();
            prop_assert!(v <= v0 * (1.0 + 1e-14) + 1e-300);
            prop_assert!(v0 <= u * (1.0 + 1e-14));
            let e = figure1_relative_error(lambda, rec, tau).unwrap();
            prop_assert!((-1e-12..1.0).contains(&e));
        }
    }
}
