//! Run configuration: a TOML file with `[model]`, `[claim]` and `[solver]`
//! sections, overridable per key from the command line.
//!
//! ```toml
//! [model]
//! d = 5          # state dimension
//! mu = 0.05      # drift of every asset
//! sigma = 0.2    # volatility of every asset
//! x0 = 0.8       # initial value of every asset
//!
//! [claim]
//! payoff = "basket-put"   # basket-put | forward
//! K = 1.0
//! closeout = "recovery"   # recovery | identity
//! R = 0.4
//! Rprime = 0.3            # optional investor recovery
//! lambda = 0.1
//! lambdabar = 0.0
//! r = 0.03
//! T = 1.0
//!
//! [solver]
//! method = "dbsde"        # analytic | mc | pde | dbsde | dbsde-multifc
//! convention = "replacement"  # replacement | riskfree | none
//! N = 100
//! L = 64
//! J = 1000
//! Np = 1000
//! iters = 4000
//! lr = 0.005
//! lr_halve_every = 1000
//! early_stop = true
//! M = 5
//! seed = 1
//! tolerance = 1e-8
//! ```
//!
//! Every key is optional; unknown keys and sections are rejected.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;
use xva_core::analytic::ConstParams;
use xva_core::pde1d::{PdeGrid, PicardOptions};
use xva_core::{Claim, CloseoutFunction, CloseoutSide, Dynamics, HazardModel, Payoff};
use xva_deep::{AdamConfig, Architecture, DbsdeConfig, EarlyStop};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("config: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayoffKind {
    BasketPut,
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloseoutChoice {
    Recovery,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Analytic,
    Mc,
    Pde,
    Dbsde,
    DbsdeMultifc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Analytic => "analytic",
            Method::Mc => "mc",
            Method::Pde => "pde",
            Method::Dbsde => "dbsde",
            Method::DbsdeMultifc => "dbsde-multifc",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        Ok(match s {
            "analytic" => Method::Analytic,
            "mc" => Method::Mc,
            "pde" => Method::Pde,
            "dbsde" => Method::Dbsde,
            "dbsde-multifc" => Method::DbsdeMultifc,
            _ => return Err(invalid("solver.method", format!("unknown method {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    Replacement,
    Riskfree,
    /// No default: the risk-free value.
    None,
}

impl Convention {
    pub fn name(self) -> &'static str {
        match self {
            Convention::Replacement => "replacement",
            Convention::Riskfree => "riskfree",
            Convention::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        Ok(match s {
            "replacement" => Convention::Replacement,
            "riskfree" => Convention::Riskfree,
            "none" => Convention::None,
            _ => return Err(invalid("solver.convention", format!("unknown convention {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub mu: f64,
    pub sigma: f64,
    pub x0: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d: 1,
            mu: 0.05,
            sigma: 0.2,
            x0: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaimSection {
    pub payoff: PayoffKind,
    #[serde(rename = "K")]
    pub strike: f64,
    pub closeout: CloseoutChoice,
    #[serde(rename = "R")]
    pub recovery: f64,
    #[serde(rename = "Rprime")]
    pub investor_recovery: Option<f64>,
    pub lambda: f64,
    pub lambdabar: f64,
    pub r: f64,
    #[serde(rename = "T")]
    pub maturity: f64,
}

impl Default for ClaimSection {
    fn default() -> Self {
        Self {
            payoff: PayoffKind::BasketPut,
            strike: 1.0,
            closeout: CloseoutChoice::Recovery,
            recovery: 0.4,
            investor_recovery: None,
            lambda: 0.1,
            lambdabar: 0.0,
            r: 0.03,
            maturity: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub method: Method,
    pub convention: Convention,
    #[serde(rename = "N")]
    pub steps: usize,
    #[serde(rename = "L")]
    pub paths: usize,
    #[serde(rename = "J")]
    pub space_steps: usize,
    #[serde(rename = "Np")]
    pub time_steps: usize,
    pub iters: usize,
    pub lr: f64,
    /// Zero disables the schedule.
    pub lr_halve_every: usize,
    pub early_stop: bool,
    pub hidden: Option<usize>,
    #[serde(rename = "M")]
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            method: Method::Analytic,
            convention: Convention::Replacement,
            steps: 100,
            paths: 64,
            space_steps: 1000,
            time_steps: 1000,
            iters: 4000,
            lr: 5e-3,
            lr_halve_every: 1000,
            early_stop: true,
            hidden: None,
            trials: 5,
            seed: 1,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub claim: ClaimSection,
    pub solver: SolverSection,
}

/// Parses a `--section.key` value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Builds a configuration from optional file text, `XVA_SEED` and
    /// `section.key = value` overrides, in increasing precedence, then validates it.
    pub fn load(text: Option<&str>, env_seed: Option<&str>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| ConfigError::Parse(e.to_string()))?,
            None => toml::Table::new(),
        };
        if let Some(seed) = env_seed {
            let s: u64 = seed
                .trim()
                .parse()
                .map_err(|_| invalid("XVA_SEED", format!("{seed:?} is not an unsigned integer")))?;
            set(&mut table, "solver.seed", toml::Value::Integer(s as i64))?;
        }
        for (key, raw) in overrides {
            set(&mut table, key, parse_value(raw))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate_fields()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, env_seed: Option<&str>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::load(Some(&text), env_seed, overrides)
    }

    /// Range checks and method/model compatibility.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_fields()?;
        self.validate_method()
    }

    /// Per-field range checks only; commands that do not run a solver need no more.
    pub fn validate_fields(&self) -> Result<(), ConfigError> {
        let (m, c, s) = (&self.model, &self.claim, &self.solver);
        if m.d == 0 {
            return Err(invalid("model.d", "must be at least 1"));
        }
        if !(m.sigma > 0.0 && m.sigma.is_finite()) {
            return Err(invalid("model.sigma", "must be positive"));
        }
        if !(m.x0 > 0.0 && m.x0.is_finite()) {
            return Err(invalid("model.x0", "must be positive"));
        }
        if !m.mu.is_finite() {
            return Err(invalid("model.mu", "must be finite"));
        }
        if !(c.strike > 0.0 && c.strike.is_finite()) {
            return Err(invalid("claim.K", "must be positive"));
        }
        if !(0.0..1.0).contains(&c.recovery) {
            return Err(invalid("claim.R", "must lie in [0, 1)"));
        }
        if let Some(rp) = c.investor_recovery {
            if !(0.0..1.0).contains(&rp) {
                return Err(invalid("claim.Rprime", "must lie in [0, 1)"));
            }
        }
        if !(c.lambda >= 0.0 && c.lambda.is_finite()) {
            return Err(invalid("claim.lambda", "must be nonnegative"));
        }
        if !(c.lambdabar >= 0.0 && c.lambdabar.is_finite()) {
            return Err(invalid("claim.lambdabar", "must be nonnegative"));
        }
        if !c.r.is_finite() {
            return Err(invalid("claim.r", "must be finite"));
        }
        if !(c.maturity > 0.0 && c.maturity.is_finite()) {
            return Err(invalid("claim.T", "must be positive"));
        }
        if s.steps == 0 {
            return Err(invalid("solver.N", "must be at least 1"));
        }
        if s.paths < 2 {
            return Err(invalid("solver.L", "must be at least 2"));
        }
        if s.space_steps < 3 {
            return Err(invalid("solver.J", "must be at least 3"));
        }
        if s.time_steps == 0 {
            return Err(invalid("solver.Np", "must be at least 1"));
        }
        if s.iters == 0 {
            return Err(invalid("solver.iters", "must be at least 1"));
        }
        if !(s.lr > 0.0 && s.lr.is_finite()) {
            return Err(invalid("solver.lr", "must be positive"));
        }
        if s.trials == 0 {
            return Err(invalid("solver.M", "must be at least 1"));
        }
        if s.hidden == Some(0) {
            return Err(invalid("solver.hidden", "must be positive"));
        }
        if !(s.tolerance > 0.0) {
            return Err(invalid("solver.tolerance", "must be positive"));
        }
        Ok(())
    }

    /// Whether `solver.method` supports the model, claim and convention.
    pub fn validate_method(&self) -> Result<(), ConfigError> {
        let (m, c, s) = (&self.model, &self.claim, &self.solver);
        let one_dim = |what: &str| {
            if m.d != 1 {
                Err(invalid(
                    "model.d",
                    format!("solver.method = \"{what}\" requires model.d = 1, got {}", m.d),
                ))
            } else {
                Ok(())
            }
        };
        match s.method {
            Method::Pde => one_dim("pde")?,
            Method::Analytic => {
                one_dim("analytic")?;
                if c.payoff != PayoffKind::BasketPut || c.closeout != CloseoutChoice::Recovery {
                    return Err(invalid(
                        "claim.payoff",
                        "solver.method = \"analytic\" covers the put with recovery closeout only",
                    ));
                }
                if c.lambdabar != 0.0 {
                    return Err(invalid("claim.lambdabar", "the closed forms are unilateral"));
                }
            }
            Method::Mc => match s.convention {
                Convention::Replacement => {
                    return Err(invalid(
                        "solver.convention",
                        "Monte Carlo handles only linear valuations: use \"none\" or \"riskfree\"",
                    ))
                }
                Convention::Riskfree => {
                    one_dim("mc")?;
                    if c.payoff != PayoffKind::BasketPut {
                        return Err(invalid("claim.payoff", "the risk-free closeout by Monte Carlo needs the put"));
                    }
                }
                Convention::None => {}
            },
            Method::Dbsde | Method::DbsdeMultifc => {
                if c.lambdabar != 0.0 {
                    return Err(invalid("claim.lambdabar", "the deep solver is unilateral"));
                }
            }
        }
        Ok(())
    }

    pub fn dynamics(&self) -> Result<Dynamics, ConfigError> {
        let m = &self.model;
        Dynamics::gbm_uniform(m.d, m.mu, m.sigma, m.x0).map_err(|e| invalid("model", e.to_string()))
    }

    pub fn closeout(&self) -> Result<CloseoutFunction, ConfigError> {
        match self.claim.closeout {
            CloseoutChoice::Recovery => {
                CloseoutFunction::recovery(self.claim.recovery).map_err(|e| invalid("claim.R", e.to_string()))
            }
            CloseoutChoice::Identity => Ok(CloseoutFunction::identity(CloseoutSide::Counterparty)),
        }
    }

    pub fn claim(&self) -> Result<Claim, ConfigError> {
        let c = &self.claim;
        let payoff = match c.payoff {
            PayoffKind::BasketPut => Payoff::BasketPut { strike: c.strike },
            PayoffKind::Forward => Payoff::Forward { strike: c.strike },
        };
        let mut claim = Claim::new(payoff, c.maturity, self.closeout()?)
            .and_then(|cl| cl.with_discount(c.r))
            .map_err(|e| invalid("claim", e.to_string()))?;
        if let Some(rp) = c.investor_recovery {
            let f = CloseoutFunction::investor_recovery(rp).map_err(|e| invalid("claim.Rprime", e.to_string()))?;
            claim = claim.with_investor_closeout(f).map_err(|e| invalid("claim.Rprime", e.to_string()))?;
        }
        Ok(claim)
    }

    pub fn hazard(&self) -> Result<HazardModel, ConfigError> {
        let c = &self.claim;
        let mut h = HazardModel::constant(c.lambda).map_err(|e| invalid("claim.lambda", e.to_string()))?;
        if c.lambdabar > 0.0 {
            h = h
                .with_investor(c.lambdabar.into())
                .map_err(|e| invalid("claim.lambdabar", e.to_string()))?;
        }
        Ok(h)
    }

    pub fn const_params(&self) -> ConstParams {
        let (m, c) = (&self.model, &self.claim);
        ConstParams {
            r: c.r,
            mu: m.mu,
            sigma: m.sigma,
            lambda: c.lambda,
            recovery: c.recovery,
            strike: c.strike,
            x0: m.x0,
            maturity: c.maturity,
            dim: m.d,
        }
    }

    pub fn pde_grid(&self) -> Result<PdeGrid, ConfigError> {
        PdeGrid::for_gbm(self.solver.space_steps, self.solver.time_steps, &self.dynamics()?, self.claim.maturity)
            .map_err(|e| invalid("solver.J", e.to_string()))
    }

    pub fn picard_options(&self) -> PicardOptions {
        PicardOptions {
            tol: self.solver.tolerance,
            ..PicardOptions::default()
        }
    }

    pub fn dbsde_config(&self) -> DbsdeConfig {
        let s = &self.solver;
        DbsdeConfig {
            steps: s.steps,
            batch: s.paths,
            iterations: s.iters,
            adam: AdamConfig {
                lr: s.lr,
                halve_every: (s.lr_halve_every > 0).then_some(s.lr_halve_every),
                ..AdamConfig::default()
            },
            seed: s.seed,
            architecture: if s.method == Method::DbsdeMultifc {
                Architecture::MultiFc
            } else {
                Architecture::Lstm
            },
            hidden: s.hidden,
            early_stop: s.early_stop.then(EarlyStop::default),
            ..DbsdeConfig::default()
        }
    }
}

/// Sets `section.key` in the raw table.
fn set(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| invalid(key, "overrides take the form --section.key"))?;
    if !["model", "claim", "solver"].contains(&section) {
        return Err(invalid(key, format!("unknown section `{section}`")));
    }
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => Err(invalid(section, "must be a table")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(RunConfig::load(None, None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_take_precedence() {
        let text = "[solver]\nseed = 3\nmethod = \"mc\"\nconvention = \"none\"\n";
        let cfg = RunConfig::load(Some(text), Some("9"), &[]).unwrap();
        assert_eq!(cfg.solver.seed, 9);
        let cfg = RunConfig::load(Some(text), Some("9"), &[("solver.seed".into(), "11".into())]).unwrap();
        assert_eq!(cfg.solver.seed, 11);
        let cfg = RunConfig::load(Some(text), None, &[("model.d".into(), "4".into())]).unwrap();
        assert_eq!(cfg.model.d, 4);
    }

    #[test]
    fn bare_strings_accepted_in_overrides() {
        let cfg = RunConfig::load(None, None, &[("solver.method".into(), "pde".into())]).unwrap();
        assert_eq!(cfg.solver.method, Method::Pde);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::load(Some("[claim]\nstrike = 1.0\n"), None, &[]).unwrap_err();
        assert!(err.to_string().contains("strike"), "{err}");
        let err = RunConfig::load(Some("[extra]\na = 1\n"), None, &[]).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn pde_needs_one_dimension() {
        let cfg = RunConfig::load(None, None, &[("solver.method".into(), "pde".into()), ("model.d".into(), "5".into())])
            .unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("model.d"), "{err}");
        assert!(err.to_string().contains("pde"), "{err}");
    }

    #[test]
    fn bad_seed_rejected() {
        assert!(RunConfig::load(None, Some("abc"), &[]).is_err());
    }
}
