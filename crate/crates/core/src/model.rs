//! Financial model data shared by every solver: the factor dynamics, default
//! intensities, closeout functions, claims and the BSDE driver built from them.
//!
//! Coefficient functions are plain `Fn(t, x)` closures behind `Arc`, so a
//! model can be cloned cheaply and evaluated from any worker thread.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::ModelError;

/// A scalar function of `(t, x)`.
pub type StateFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// A vector-valued function of `(t, x)` writing into the output slice.
pub type VectorFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// A closeout map `(t, x, y) -> f(t, x, y)`.
pub type CloseoutFn = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;
/// A terminal payoff `x -> phi(x)`.
pub type PayoffFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Parameters of the built-in geometric Brownian motion
/// `dX_i = mu_i X_i dt + sigma_i X_i dW_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GbmParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Markov factor dynamics `dX = mu(t, X) dt + sigma(t, X) dW`.
#[derive(Clone)]
pub struct Dynamics {
    dim: usize,
    noise_dim: usize,
    x0: Vec<f64>,
    drift: VectorFn,
    // Row-major `dim x noise_dim`.
    diffusion: VectorFn,
    gbm: Option<GbmParams>,
}

impl fmt::Debug for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dynamics")
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("x0", &self.x0)
            .field("gbm", &self.gbm)
            .finish_non_exhaustive()
    }
}

impl Dynamics {
    /// General dynamics. `diffusion` fills a row-major `dim x noise_dim` matrix.
    pub fn new(
        x0: Vec<f64>,
        noise_dim: usize,
        drift: VectorFn,
        diffusion: VectorFn,
    ) -> Result<Self, ModelError> {
        if x0.is_empty() || noise_dim == 0 {
            return Err(ModelError::invalid("dimension", "must be positive"));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::invalid("x0", "must be finite"));
        }
        Ok(Self {
            dim: x0.len(),
            noise_dim,
            x0,
            drift,
            diffusion,
            gbm: None,
        })
    }

    /// Independent geometric Brownian motions, one per coordinate.
    pub fn gbm(mu: Vec<f64>, sigma: Vec<f64>, x0: Vec<f64>) -> Result<Self, ModelError> {
        let d = x0.len();
        if d == 0 || mu.len() != d || sigma.len() != d {
            return Err(ModelError::invalid(
                "gbm",
                format!(
                    "mu ({}), sigma ({}) and x0 ({}) must have the same positive length",
                    mu.len(),
                    sigma.len(),
                    d
                ),
            ));
        }
        if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(ModelError::invalid("sigma", "must be finite and nonnegative"));
        }
        if mu.iter().chain(x0.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::invalid("gbm", "mu and x0 must be finite"));
        }
        let (m1, s1) = (mu.clone(), sigma.clone());
        let drift: VectorFn = Arc::new(move |_, x, out| {
            for ((o, m), xi) in out.iter_mut().zip(&m1).zip(x) {
                *o = m * xi;
            }
        });
        let diffusion: VectorFn = Arc::new(move |_, x, out| {
            let d = s1.len();
            out.iter_mut().for_each(|o| *o = 0.0);
            for i in 0..d {
                out[i * d + i] = s1[i] * x[i];
            }
        });
        Ok(Self {
            dim: d,
            noise_dim: d,
            x0,
            drift,
            diffusion,
            gbm: Some(GbmParams { mu, sigma }),
        })
    }

    /// Homogeneous GBM basket: every coordinate shares `mu`, `sigma`, `x0`.
    pub fn gbm_uniform(dim: usize, mu: f64, sigma: f64, x0: f64) -> Result<Self, ModelError> {
        Self::gbm(vec![mu; dim], vec![sigma; dim], vec![x0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn as_gbm(&self) -> Option<&GbmParams> {
        self.gbm.as_ref()
    }

    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    pub fn diffusion_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    /// `out = sigma(t, x) dw`. `scratch` must hold `dim * noise_dim` values;
    /// it is untouched for the diagonal GBM case.
    pub fn diffuse_into(&self, t: f64, x: &[f64], dw: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        if let Some(g) = &self.gbm {
            for i in 0..self.dim {
                out[i] = g.sigma[i] * x[i] * dw[i];
            }
            return;
        }
        (self.diffusion)(t, x, scratch);
        let n = self.noise_dim;
        for (i, o) in out.iter_mut().enumerate() {
            *o = scratch[i * n..(i + 1) * n]
                .iter()
                .zip(dw)
                .map(|(s, w)| s * w)
                .sum();
        }
    }

    /// Uniform parabolicity holds on compact sets away from `x = 0` iff
    /// every GBM volatility is strictly positive. Only the built-in model is checked.
    pub fn check_parabolic(&self) -> Result<(), ModelError> {
        match &self.gbm {
            Some(g) if g.sigma.iter().all(|s| *s > 0.0) => Ok(()),
            Some(_) => Err(ModelError::invalid("sigma", "must be strictly positive")),
            None => Ok(()),
        }
    }
}

/// A scalar model coefficient of `(t, x)`: rates, intensities, cash-flow rates.
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    Function(StateFn),
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c})"),
            Coefficient::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl Coefficient {
    pub fn function(f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Coefficient::Function(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Function(f) => f(t, x),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Coefficient::Constant(c) => Some(*c),
            Coefficient::Function(_) => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Coefficient::Constant(c) if *c == 0.0)
    }
}

impl From<f64> for Coefficient {
    fn from(c: f64) -> Self {
        Coefficient::Constant(c)
    }
}

/// Default intensities of the counterparty and, in the bilateral case, the investor.
#[derive(Debug, Clone)]
pub struct HazardModel {
    counterparty: Coefficient,
    investor: Option<Coefficient>,
}

impl HazardModel {
    pub fn new(counterparty: Coefficient) -> Result<Self, ModelError> {
        check_intensity("lambda", &counterparty)?;
        Ok(Self {
            counterparty,
            investor: None,
        })
    }

    pub fn constant(lambda: f64) -> Result<Self, ModelError> {
        Self::new(Coefficient::Constant(lambda))
    }

    /// No default risk at all; turns every pre-default value into the risk-free one.
    pub fn none() -> Self {
        Self {
            counterparty: Coefficient::Constant(0.0),
            investor: None,
        }
    }

    pub fn with_investor(mut self, investor: Coefficient) -> Result<Self, ModelError> {
        check_intensity("lambdabar", &investor)?;
        self.investor = Some(investor);
        Ok(self)
    }

    pub fn counterparty(&self) -> &Coefficient {
        &self.counterparty
    }

    pub fn investor(&self) -> Option<&Coefficient> {
        self.investor.as_ref()
    }

    /// Counterparty intensity at `(t, x)`, clamped to zero with a debug assertion.
    #[inline]
    pub fn lambda(&self, t: f64, x: &[f64]) -> f64 {
        let l = self.counterparty.eval(t, x);
        debug_assert!(l >= 0.0, "negative intensity {l} at t={t}");
        l.max(0.0)
    }

    #[inline]
    pub fn lambda_bar(&self, t: f64, x: &[f64]) -> f64 {
        match &self.investor {
            Some(c) => c.eval(t, x).max(0.0),
            None => 0.0,
        }
    }
}

fn check_intensity(name: &'static str, c: &Coefficient) -> Result<(), ModelError> {
    match c {
        Coefficient::Constant(v) if !(v.is_finite() && *v >= 0.0) => {
            Err(ModelError::invalid(name, format!("intensity {v} must be finite and nonnegative")))
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseoutSide {
    Counterparty,
    Investor,
}

/// Built-in closeout shapes. `Custom` closeouts carry only their closure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CloseoutKind {
    /// `R y^+ - y^-`
    Recovery { rate: f64 },
    /// `y^+ - R' y^-`
    InvestorRecovery { rate: f64 },
    /// `f(t, x, y) = y`
    Identity,
    Custom,
}

/// The lump-sum payoff at default as a function of the reference value `y`.
#[derive(Clone)]
pub struct CloseoutFunction {
    side: CloseoutSide,
    kind: CloseoutKind,
    eval: CloseoutFn,
}

impl fmt::Debug for CloseoutFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CloseoutFunction")
            .field("side", &self.side)
            .field("kind", &self.kind)
            .finish()
    }
}

#[inline]
pub fn pos_part(y: f64) -> f64 {
    y.max(0.0)
}

#[inline]
pub fn neg_part(y: f64) -> f64 {
    (-y).max(0.0)
}

impl CloseoutFunction {
    /// Counterparty recovery closeout `R y^+ - y^-`, `R` in `[0, 1)`.
    pub fn recovery(rate: f64) -> Result<Self, ModelError> {
        check_recovery("R", rate)?;
        Ok(Self {
            side: CloseoutSide::Counterparty,
            kind: CloseoutKind::Recovery { rate },
            eval: Arc::new(move |_, _, y| rate * pos_part(y) - neg_part(y)),
        })
    }

    /// Investor closeout `y^+ - R' y^-`, `R'` in `[0, 1)`.
    pub fn investor_recovery(rate: f64) -> Result<Self, ModelError> {
        check_recovery("Rprime", rate)?;
        Ok(Self {
            side: CloseoutSide::Investor,
            kind: CloseoutKind::InvestorRecovery { rate },
            eval: Arc::new(move |_, _, y| pos_part(y) - rate * neg_part(y)),
        })
    }

    /// `f(t, x, y) = y`, the boundary case of both closeout inequalities.
    pub fn identity(side: CloseoutSide) -> Self {
        Self {
            side,
            kind: CloseoutKind::Identity,
            eval: Arc::new(|_, _, y| y),
        }
    }

    /// An arbitrary closeout. Its contract is not checked here; see [`validate_closeout`].
    pub fn custom(
        side: CloseoutSide,
        f: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            side,
            kind: CloseoutKind::Custom,
            eval: Arc::new(f),
        }
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], y: f64) -> f64 {
        match self.kind {
            CloseoutKind::Recovery { rate } => rate * pos_part(y) - neg_part(y),
            CloseoutKind::InvestorRecovery { rate } => pos_part(y) - rate * neg_part(y),
            CloseoutKind::Identity => y,
            CloseoutKind::Custom => (self.eval)(t, x, y),
        }
    }

    pub fn side(&self) -> CloseoutSide {
        self.side
    }

    pub fn kind(&self) -> CloseoutKind {
        self.kind
    }
}

fn check_recovery(name: &'static str, rate: f64) -> Result<(), ModelError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(ModelError::invalid(name, format!("recovery rate {rate} must lie in [0, 1)")))
    }
}

/// Terminal payoff of a claim.
#[derive(Clone)]
pub enum Payoff {
    /// `(d K - sum_i x_i)^+`; the vanilla put when `d = 1`.
    BasketPut { strike: f64 },
    /// `sum_i x_i - d K`, a forward-like payoff whose value changes sign.
    Forward { strike: f64 },
    Constant(f64),
    Custom(PayoffFn),
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payoff::BasketPut { strike } => write!(f, "BasketPut {{ strike: {strike} }}"),
            Payoff::Forward { strike } => write!(f, "Forward {{ strike: {strike} }}"),
            Payoff::Constant(c) => write!(f, "Constant({c})"),
            Payoff::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl Payoff {
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Payoff::BasketPut { strike } => {
                let s: f64 = x.iter().sum();
                pos_part(x.len() as f64 * strike - s)
            }
            Payoff::Forward { strike } => x.iter().sum::<f64>() - x.len() as f64 * strike,
            Payoff::Constant(c) => *c,
            Payoff::Custom(f) => f(x),
        }
    }

    /// True when the payoff is known to be nonnegative everywhere.
    pub fn is_nonnegative(&self) -> bool {
        match self {
            Payoff::BasketPut { .. } => true,
            Payoff::Constant(c) => *c >= 0.0,
            _ => false,
        }
    }
}

/// A defaultable claim: terminal payoff, running cash flow, discounting and
/// the closeout function(s) applied at default.
#[derive(Debug, Clone)]
pub struct Claim {
    pub payoff: Payoff,
    pub cashflow: Coefficient,
    pub discount: Coefficient,
    pub maturity: f64,
    pub closeout: CloseoutFunction,
    pub investor_closeout: Option<CloseoutFunction>,
}

impl Claim {
    /// A claim with zero cash flow and zero discount rate; use the `with_*` builders.
    pub fn new(payoff: Payoff, maturity: f64, closeout: CloseoutFunction) -> Result<Self, ModelError> {
        if !(maturity.is_finite() && maturity > 0.0) {
            return Err(ModelError::invalid("T", format!("maturity {maturity} must be positive")));
        }
        if closeout.side() != CloseoutSide::Counterparty {
            return Err(ModelError::invalid("closeout", "must be a counterparty-side closeout"));
        }
        Ok(Self {
            payoff,
            cashflow: Coefficient::Constant(0.0),
            discount: Coefficient::Constant(0.0),
            maturity,
            closeout,
            investor_closeout: None,
        })
    }

    pub fn with_discount(mut self, r: impl Into<Coefficient>) -> Result<Self, ModelError> {
        let r = r.into();
        if let Some(v) = r.as_constant() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ModelError::invalid("r", format!("discount rate {v} must be nonnegative")));
            }
        }
        self.discount = r;
        Ok(self)
    }

    pub fn with_cashflow(mut self, c: impl Into<Coefficient>) -> Self {
        self.cashflow = c.into();
        self
    }

    pub fn with_investor_closeout(mut self, f: CloseoutFunction) -> Result<Self, ModelError> {
        if f.side() != CloseoutSide::Investor {
            return Err(ModelError::invalid("investor_closeout", "must be an investor-side closeout"));
        }
        self.investor_closeout = Some(f);
        Ok(self)
    }

    /// Same claim with a different counterparty closeout.
    pub fn with_closeout(mut self, f: CloseoutFunction) -> Self {
        self.closeout = f;
        self
    }

    #[inline]
    pub fn r(&self, t: f64, x: &[f64]) -> f64 {
        self.discount.eval(t, x)
    }

    #[inline]
    pub fn c(&self, t: f64, x: &[f64]) -> f64 {
        self.cashflow.eval(t, x)
    }
}

fn check_finite_inputs(t: f64, x: &[f64], y: f64) -> Result<(), ModelError> {
    if !t.is_finite() || !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { t, y });
    }
    Ok(())
}

/// Unilateral driver `F(t,x,y) = c + lambda f(t,x,y) - (r + lambda) y`.
pub fn bsde_driver(
    claim: &Claim,
    hazard: &HazardModel,
    t: f64,
    x: &[f64],
    y: f64,
) -> Result<f64, ModelError> {
    check_finite_inputs(t, x, y)?;
    let lambda = hazard.lambda(t, x);
    let r = claim.r(t, x);
    Ok(claim.c(t, x) + lambda * claim.closeout.eval(t, x, y) - (r + lambda) * y)
}

/// Bilateral driver `c + lambda f(y) + lambdabar fbar(y) - (r + lambda + lambdabar) y`.
/// Without an investor closeout the investor term uses `fbar(y) = y`.
pub fn bilateral_driver(
    claim: &Claim,
    hazard: &HazardModel,
    t: f64,
    x: &[f64],
    y: f64,
) -> Result<f64, ModelError> {
    check_finite_inputs(t, x, y)?;
    let lambda = hazard.lambda(t, x);
    let lambda_bar = hazard.lambda_bar(t, x);
    let r = claim.r(t, x);
    let fbar = claim
        .investor_closeout
        .as_ref()
        .map_or(y, |f| f.eval(t, x, y));
    Ok(claim.c(t, x) + lambda * claim.closeout.eval(t, x, y) + lambda_bar * fbar
        - (r + lambda + lambda_bar) * y)
}

/// Axis-aligned box of `(t, x, y)` from which closeout samples are drawn.
#[derive(Debug, Clone)]
pub struct SampleBox {
    pub t: (f64, f64),
    pub x: Vec<(f64, f64)>,
    pub y: (f64, f64),
}

impl SampleBox {
    pub fn new(t: (f64, f64), x: Vec<(f64, f64)>, y: (f64, f64)) -> Self {
        Self { t, x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// Counterparty closeout exceeds the value: `f(y) > y`.
    ExceedsValue,
    /// Investor closeout below the value: `fbar(y) < y`.
    BelowValue,
    /// `f(y2) < f(y1)` for `y1 < y2`.
    Decreasing,
    /// `f(y2) - f(y1) > y2 - y1`.
    SlopeAboveOne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub t: f64,
    pub x: Vec<f64>,
    pub y1: f64,
    pub y2: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CloseoutReport {
    pub samples: usize,
    pub violations: Vec<Violation>,
}

impl CloseoutReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Randomized check of the incentive-compatibility contract of a closeout
/// function over `sample_box`. Deterministic for a given seed.
pub fn validate_closeout(
    f: &CloseoutFunction,
    sample_box: &SampleBox,
    n_samples: usize,
    seed: u64,
) -> CloseoutReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CloseoutReport {
        samples: n_samples,
        violations: Vec::new(),
    };
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    };
    let mut x = vec![0.0; sample_box.x.len()];
    for _ in 0..n_samples {
        let t = uniform(&mut rng, sample_box.t);
        for (xi, range) in x.iter_mut().zip(&sample_box.x) {
            *xi = uniform(&mut rng, *range);
        }
        let a = uniform(&mut rng, sample_box.y);
        let b = uniform(&mut rng, sample_box.y);
        let (y1, y2) = if a <= b { (a, b) } else { (b, a) };
        let f1 = f.eval(t, &x, y1);
        let f2 = f.eval(t, &x, y2);
        let mut push = |kind| {
            report.violations.push(Violation {
                kind,
                t,
                x: x.clone(),
                y1,
                y2,
            })
        };
        // Round-off allowance relative to the magnitudes involved.
        let slack = 1e-12 * (1.0 + y1.abs().max(y2.abs()));
        match f.side() {
            CloseoutSide::Counterparty if f1 > y1 + slack || f2 > y2 + slack => {
                push(ViolationKind::ExceedsValue)
            }
            CloseoutSide::Investor if f1 < y1 - slack || f2 < y2 - slack => {
                push(ViolationKind::BelowValue)
            }
            _ => {}
        }
        if y2 > y1 {
            let df = f2 - f1;
            if df < -slack {
                push(ViolationKind::Decreasing);
            } else if df > (y2 - y1) + slack {
                push(ViolationKind::SlopeAboveOne);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn claim_with(closeout: CloseoutFunction, r: f64) -> Claim {
        Claim::new(Payoff::Constant(1.0), 1.0, closeout)
            .unwrap()
            .with_discount(r)
            .unwrap()
    }

    #[test]
    fn driver_without_default_is_minus_r_y() {
        let claim = claim_with(CloseoutFunction::recovery(0.4).unwrap(), 0.03);
        let f = bsde_driver(&claim, &HazardModel::none(), 0.5, &[1.0], 1.0).unwrap();
        assert_eq!(f, -0.03);
    }

    #[test]
    fn driver_with_recovery_closeout() {
        let claim = claim_with(CloseoutFunction::recovery(0.4).unwrap(), 0.03);
        let hazard = HazardModel::constant(0.1).unwrap();
        let f = bsde_driver(&claim, &hazard, 0.0, &[1.0], 1.0).unwrap();
        assert!((f - (-0.09)).abs() < 1e-15, "{f}");
    }

    #[test]
    fn identity_closeout_cancels_intensity() {
        let claim = claim_with(CloseoutFunction::identity(CloseoutSide::Counterparty), 0.03);
        for lambda in [0.0, 0.1, 2.5, 40.0] {
            let hazard = HazardModel::constant(lambda).unwrap();
            let f = bsde_driver(&claim, &hazard, 0.2, &[3.0], 1.7).unwrap();
            assert!((f - (-0.03 * 1.7)).abs() < 1e-12, "lambda={lambda}: {f}");
        }
    }

    #[test]
    fn driver_rejects_non_finite_inputs() {
        let claim = claim_with(CloseoutFunction::recovery(0.4).unwrap(), 0.03);
        let h = HazardModel::constant(0.1).unwrap();
        assert!(bsde_driver(&claim, &h, f64::NAN, &[1.0], 1.0).is_err());
        assert!(bsde_driver(&claim, &h, 0.0, &[f64::INFINITY], 1.0).is_err());
        assert!(bsde_driver(&claim, &h, 0.0, &[1.0], f64::NAN).is_err());
        assert!(bilateral_driver(&claim, &h, 0.0, &[1.0], f64::INFINITY).is_err());
    }

    #[test]
    fn bilateral_driver_collapses_without_investor() {
        let claim = claim_with(CloseoutFunction::recovery(0.4).unwrap(), 0.03);
        let h = HazardModel::constant(0.2).unwrap();
        for y in [-1.0, 0.0, 0.7] {
            let a = bsde_driver(&claim, &h, 0.0, &[1.0], y).unwrap();
            let b = bilateral_driver(&claim, &h, 0.0, &[1.0], y).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bilateral_driver_terms() {
        let claim = claim_with(CloseoutFunction::recovery(0.4).unwrap(), 0.03)
            .with_investor_closeout(CloseoutFunction::investor_recovery(0.6).unwrap())
            .unwrap();
        let h = HazardModel::constant(0.2)
            .unwrap()
            .with_investor(Coefficient::Constant(0.05))
            .unwrap();
        // y < 0: f = y, fbar = R' y.
        let y = -2.0;
        let expected = 0.2 * y + 0.05 * 0.6 * y - (0.03 + 0.2 + 0.05) * y;
        let got = bilateral_driver(&claim, &h, 0.0, &[1.0], y).unwrap();
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn recovery_closeout_is_incentive_compatible() {
        let f = CloseoutFunction::recovery(0.4).unwrap();
        let b = SampleBox::new((0.0, 1.0), vec![(0.0, 2.0)], (-5.0, 5.0));
        let report = validate_closeout(&f, &b, 10_000, 7);
        assert!(report.is_ok(), "{:?}", report.violations.first());
    }

    #[test]
    fn investor_recovery_is_incentive_compatible() {
        let f = CloseoutFunction::investor_recovery(0.3).unwrap();
        let b = SampleBox::new((0.0, 1.0), vec![(0.0, 2.0)], (-5.0, 5.0));
        assert!(validate_closeout(&f, &b, 10_000, 7).is_ok());
    }

    #[test]
    fn shifted_closeout_exceeds_value() {
        let f = CloseoutFunction::custom(CloseoutSide::Counterparty, |_, _, y| y + 1.0);
        let b = SampleBox::new((0.0, 1.0), vec![(0.0, 2.0)], (-5.0, 5.0));
        let report = validate_closeout(&f, &b, 500, 1);
        assert_eq!(report.count(ViolationKind::ExceedsValue), 500);
        assert_eq!(report.count(ViolationKind::SlopeAboveOne), 0);
    }

    #[test]
    fn doubled_closeout_breaks_lipschitz_bound() {
        let f = CloseoutFunction::custom(CloseoutSide::Counterparty, |_, _, y| 2.0 * y);
        let b = SampleBox::new((0.0, 1.0), vec![(0.0, 2.0)], (-5.0, 5.0));
        let report = validate_closeout(&f, &b, 500, 1);
        assert!(report.count(ViolationKind::SlopeAboveOne) > 400);
    }

    #[test]
    fn validation_is_deterministic() {
        let f = CloseoutFunction::custom(CloseoutSide::Counterparty, |_, _, y| 2.0 * y);
        let b = SampleBox::new((0.0, 1.0), vec![(0.0, 2.0), (1.0, 3.0)], (-5.0, 5.0));
        assert_eq!(validate_closeout(&f, &b, 200, 3), validate_closeout(&f, &b, 200, 3));
    }

    #[test]
    fn recovery_rates_outside_unit_interval_rejected() {
        assert!(CloseoutFunction::recovery(1.0).is_err());
        assert!(CloseoutFunction::recovery(-0.1).is_err());
        assert!(CloseoutFunction::investor_recovery(1.2).is_err());
    }

    #[test]
    fn claim_validation() {
        let f = CloseoutFunction::recovery(0.4).unwrap();
        assert!(Claim::new(Payoff::Constant(1.0), 0.0, f.clone()).is_err());
        assert!(Claim::new(Payoff::Constant(1.0), 1.0, f.clone())
            .unwrap()
            .with_discount(-0.01)
            .is_err());
        let fbar = CloseoutFunction::investor_recovery(0.5).unwrap();
        assert!(Claim::new(Payoff::Constant(1.0), 1.0, fbar.clone()).is_err());
        assert!(Claim::new(Payoff::Constant(1.0), 1.0, f.clone())
            .unwrap()
            .with_investor_closeout(f)
            .is_err());
        assert!(HazardModel::constant(-0.1).is_err());
    }

    #[test]
    fn gbm_coefficients() {
        let dynamics = Dynamics::gbm(vec![0.05, 0.01], vec![0.2, 0.3], vec![0.8, 1.1]).unwrap();
        let mut mu = [0.0; 2];
        dynamics.drift_into(0.3, &[2.0, 4.0], &mut mu);
        assert_eq!(mu, [0.05 * 2.0, 0.01 * 4.0]);
        let mut sig = [9.0; 4];
        dynamics.diffusion_into(0.3, &[2.0, 4.0], &mut sig);
        assert_eq!(sig, [0.2 * 2.0, 0.0, 0.0, 0.3 * 4.0]);
        assert_eq!(dynamics.noise_dim(), dynamics.dim());
        assert!(dynamics.check_parabolic().is_ok());
        let flat = Dynamics::gbm_uniform(2, 0.0, 0.0, 1.0).unwrap();
        assert!(flat.check_parabolic().is_err());
    }

    #[test]
    fn general_diffusion_product() {
        let d = Dynamics::new(
            vec![1.0, 2.0],
            3,
            Arc::new(|_, _, out| out.fill(0.0)),
            Arc::new(|_, _, out| {
                out.copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
            }),
        )
        .unwrap();
        let mut scratch = [0.0; 6];
        let mut out = [0.0; 2];
        d.diffuse_into(0.0, &[1.0, 2.0], &[1.0, 0.0, -1.0], &mut scratch, &mut out);
        assert_eq!(out, [-2.0, -2.0]);
    }

    #[test]
    fn basket_put_payoff() {
        let p = Payoff::BasketPut { strike: 1.0 };
        assert!((p.eval(&[0.8, 0.9, 1.0]) - 0.3).abs() < 1e-12);
        assert_eq!(p.eval(&[2.0, 2.0]), 0.0);
        assert_eq!(Payoff::Forward { strike: 1.0 }.eval(&[0.5]), -0.5);
    }

    proptest! {
        #[test]
        fn driver_is_lipschitz_in_value(
            r in 0.0..0.2f64, lambda in 0.0..2.0f64, rec in 0.0..0.99f64,
            y1 in -10.0..10.0f64, y2 in -10.0..10.0f64, c in -1.0..1.0f64,
        ) {
            let claim = claim_with(CloseoutFunction::recovery(rec).unwrap(), r).with_cashflow(c);
            let h = HazardModel::constant(lambda).unwrap();
            let f1 = bsde_driver(&claim, &h, 0.0, &[1.0], y1).unwrap();
            let f2 = bsde_driver(&claim, &h, 0.0, &[1.0], y2).unwrap();
            prop_assert!((f2 - f1).abs() <= (r + 2.0 * lambda) * (y2 - y1).abs() + 1e-12);
        }

        #[test]
        fn driver_is_linear_for_nonnegative_values(
            r in 0.0..0.2f64, lambda in 0.0..2.0f64, rec in 0.0..0.99f64,
            y in 0.0..10.0f64, c in -1.0..1.0f64,
        ) {
            let claim = claim_with(CloseoutFunction::recovery(rec).unwrap(), r).with_cashflow(c);
            let h = HazardModel::constant(lambda).unwrap();
            let f = bsde_driver(&claim, &h, 0.0, &[1.0], y).unwrap();
            let lin = c - (r + (1.0 - rec) * lambda) * y;
            prop_assert!((f - lin).abs() <= 1e-12 * (1.0 + y));
        }
    }
}
