use xva_core::analytic::{self, ConstParams};
use xva_core::{Claim, CloseoutFunction, Dynamics, HazardModel, Payoff};
use xva_deep::{deep_bsde, DbsdeConfig, TrainState};

fn put_1d() -> (ConstParams, Claim, Dynamics, HazardModel) {
    let p = ConstParams::basket_put(1);
    let claim = Claim::new(
        Payoff::BasketPut { strike: p.strike },
        p.maturity,
        CloseoutFunction::recovery(p.recovery).unwrap(),
    )
    .unwrap()
    .with_discount(p.r)
    .unwrap();
    let dynamics = Dynamics::gbm_uniform(1, p.mu, p.sigma, p.x0).unwrap();
    (p, claim, dynamics, HazardModel::constant(p.lambda).unwrap())
}

fn small(seed: u64, iterations: usize) -> DbsdeConfig {
    DbsdeConfig {
        steps: 10,
        batch: 16,
        iterations,
        early_stop: None,
        seed,
        ..DbsdeConfig::default()
    }
}

fn histories(s: &TrainState) -> (Vec<u64>, Vec<u64>) {
    (
        s.loss_history.iter().map(|x| x.to_bits()).collect(),
        s.v_history.iter().map(|x| x.to_bits()).collect(),
    )
}

#[test]
fn same_seed_gives_bit_identical_history() {
    let (_, claim, dynamics, hazard) = put_1d();
    let a = deep_bsde::train(&claim, &dynamics, &hazard, &small(3, 40)).unwrap();
    let b = deep_bsde::train(&claim, &dynamics, &hazard, &small(3, 40)).unwrap();
    assert_eq!(histories(&a), histories(&b));
    assert_eq!(a.params, b.params);
    let c = deep_bsde::train(&claim, &dynamics, &hazard, &small(4, 40)).unwrap();
    assert_ne!(histories(&a), histories(&c));
}

#[test]
fn worker_count_does_not_change_trials() {
    let (_, claim, dynamics, hazard) = put_1d();
    let run = |workers| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
        pool.install(|| deep_bsde::value_replacement(&claim, &dynamics, &hazard, &small(5, 30), 3).unwrap())
    };
    let (one, three) = (run(1), run(3));
    for (a, b) in one.values.iter().zip(&three.values) {
        assert!((a - b).abs() <= 1e-6 * a.abs(), "{a} vs {b}");
    }
}

#[test]
fn zero_driver_recovers_mean_payoff() {
    // r = c = lambda = 0 and a linear payoff: the value is E[phi(X_T)].
    let claim = Claim::new(Payoff::Forward { strike: 1.0 }, 1.0, CloseoutFunction::recovery(0.4).unwrap()).unwrap();
    let (mu, sigma) = (0.05, 0.2);
    let dynamics = Dynamics::gbm_uniform(1, mu, sigma, 1.0).unwrap();
    let config = DbsdeConfig {
        steps: 20,
        batch: 64,
        iterations: 1500,
        seed: 11,
        ..DbsdeConfig::default()
    };
    let state = deep_bsde::train(&claim, &dynamics, &HazardModel::none(), &config).unwrap();
    let exact = mu.exp() - 1.0;
    // Three standard errors of a mean over 200 batches of 64 paths.
    let payoff_std = mu.exp() * ((sigma * sigma as f64).exp() - 1.0).sqrt();
    let tol = 3.0 * payoff_std / ((200 * 64) as f64).sqrt();
    assert!((state.v - exact).abs() < tol, "v {} vs {exact} (tol {tol})", state.v);
}

#[test]
fn one_dimensional_values_match_closed_forms() {
    let (p, claim, dynamics, hazard) = put_1d();
    let config = DbsdeConfig {
        steps: 50,
        seed: 21,
        ..DbsdeConfig::default()
    };
    let u = analytic::gbm_put_value(&p, 0.0, p.x0);
    let replacement = analytic::replacement_value_nonneg(&p, u, 0.0).unwrap();
    let riskfree_closeout = analytic::riskfree_closeout_value(&p, u, 0.0).unwrap();

    let v = deep_bsde::value_replacement(&claim, &dynamics, &hazard, &config, 1).unwrap();
    assert!((v.mean - replacement).abs() < 0.01 * replacement, "{} vs {replacement}", v.mean);

    let two_stage = deep_bsde::value_riskfree_closeout(&claim, &dynamics, &hazard, &config, 1).unwrap();
    let v0 = two_stage.value.mean;
    assert!((two_stage.riskfree.mean - u).abs() < 0.01 * u, "{} vs {u}", two_stage.riskfree.mean);
    assert!((v0 - riskfree_closeout).abs() < 0.01 * riskfree_closeout, "{v0} vs {riskfree_closeout}");
    // The replacement CVA dominates the risk-free-closeout CVA; the closed-form
    // gap is about 2% of U, well above the training noise.
    assert!(v.mean < v0, "{} vs {v0}", v.mean);
}

#[test]
fn zero_intensity_second_stage_reproduces_first() {
    let (_, claim, dynamics, _) = put_1d();
    let config = DbsdeConfig {
        steps: 20,
        iterations: 1200,
        seed: 31,
        ..DbsdeConfig::default()
    };
    let s = deep_bsde::value_riskfree_closeout(&claim, &dynamics, &HazardModel::none(), &config, 1).unwrap();
    let (a, b) = (s.riskfree.mean, s.value.mean);
    assert!((a - b).abs() < 0.01 * a, "{a} vs {b}");
}

#[test]
fn multifc_baseline_trains() {
    let (p, claim, dynamics, hazard) = put_1d();
    let config = DbsdeConfig {
        steps: 20,
        iterations: 1500,
        seed: 41,
        ..DbsdeConfig::default()
    };
    let s = deep_bsde::train_multifc_baseline(&claim, &dynamics, &hazard, &config, 2).unwrap();
    let u = analytic::gbm_put_value(&p, 0.0, p.x0);
    let exact = analytic::replacement_value_nonneg(&p, u, 0.0).unwrap();
    assert_eq!(s.values.len(), 2);
    // Twenty steps carry a small time-discretization bias; 2% covers it.
    assert!((s.mean - exact).abs() < 0.02 * exact, "{} vs {exact}", s.mean);
}

#[test]
fn invalid_configuration_is_rejected_before_training() {
    let (_, claim, dynamics, hazard) = put_1d();
    let config = DbsdeConfig {
        batch: 1,
        ..DbsdeConfig::default()
    };
    assert!(deep_bsde::train(&claim, &dynamics, &hazard, &config).is_err());
    assert!(deep_bsde::value_replacement(&claim, &dynamics, &hazard, &small(1, 5), 0).is_err());
}
