//! Central finite-difference checks of the reverse pass.
//!
//! The relative error of an entry is `|a - b| / max(|a|, |b|, FLOOR)`, where
//! `FLOOR` keeps entries whose gradient is tiny from being judged on
//! round-off alone.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xva_core::{Claim, CloseoutFunction, Dynamics, HazardModel, Payoff, Scheme, TimeGrid};

use crate::autodiff::{Tape, Tensor, Var};
use crate::deep_bsde::{network_gradient, rollout_loss, DbsdeError, RecoveryInput};
use crate::nn::{lstm_cell, LstmStack, Network};

pub const FLOOR: f64 = 1e-3;
pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-5;
pub const ROLLOUT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var, DbsdeError> + 'a;

/// Worst relative error between the reverse pass and central differences
/// over every entry of `params`.
pub fn check_function(params: &[Tensor], build: &Build<'_>) -> Result<(f64, usize), DbsdeError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |ps: &[Tensor]| -> Result<f64, DbsdeError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    let mut entries = 0;
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get(*v);
        for e in 0..params[k].len() {
            let x0 = params[k].data()[e];
            work[k].data_mut()[e] = x0 + STEP;
            let up = eval(&work)?;
            work[k].data_mut()[e] = x0 - STEP;
            let down = eval(&work)?;
            work[k].data_mut()[e] = x0;
            let fd = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(g.data()[e], fd));
            entries += 1;
        }
    }
    Ok((worst, entries))
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let d = Uniform::new(-1.0, 1.0);
    Tensor::from_fn(rows, cols, |_, _| d.sample(rng))
}

/// Uniform draws with `0.1 <= |y| <= 1`, away from the kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let d = Uniform::new(0.1, 1.0);
    let s = Uniform::new(0.0, 1.0);
    Tensor::from_fn(rows, cols, |_, _| {
        let v = d.sample(rng);
        if s.sample(rng) < 0.5 {
            -v
        } else {
            v
        }
    })
}

fn result(name: &str, r: Result<(f64, usize), DbsdeError>, tolerance: f64) -> Result<CheckResult, DbsdeError> {
    let (max_rel_error, entries) = r?;
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error,
        entries,
        tolerance,
    })
}

/// Weighted sum `sum(w * y)` with a fixed random weight, so every output
/// entry carries a distinct cotangent.
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, DbsdeError> {
    let (r, c) = tape.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, r, c));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// One check per primitive operation.
pub fn check_primitives(seed: u64) -> Result<Vec<CheckResult>, DbsdeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 3, 4);
    let c = random(&mut rng, 4, 2);
    let row = random(&mut rng, 1, 4);
    let side = random(&mut rng, 3, 2);
    let s = random(&mut rng, 1, 1);
    let kinked = away_from_zero(&mut rng, 3, 4);
    let ws = seed ^ 0x5eed;
    let mut out = Vec::new();
    let mut run = |name: &str, params: Vec<Tensor>, build: &Build<'_>| -> Result<(), DbsdeError> {
        out.push(result(name, check_function(&params, build), TOL)?);
        Ok(())
    };
    run("add", vec![a.clone(), b.clone()], &|t, p| {
        let y = t.add(p[0], p[1])?;
        weighted(t, y, ws)
    })?;
    run("sub", vec![a.clone(), b.clone()], &|t, p| {
        let y = t.sub(p[0], p[1])?;
        weighted(t, y, ws)
    })?;
    run("mul", vec![a.clone(), b.clone()], &|t, p| {
        let y = t.mul(p[0], p[1])?;
        weighted(t, y, ws)
    })?;
    run("scale", vec![a.clone()], &|t, p| {
        let y = t.scale(p[0], -1.7);
        weighted(t, y, ws)
    })?;
    run("add_row", vec![a.clone(), row.clone()], &|t, p| {
        let y = t.add_row(p[0], p[1])?;
        weighted(t, y, ws)
    })?;
    run("matmul", vec![a.clone(), c.clone()], &|t, p| {
        let y = t.matmul(p[0], p[1])?;
        weighted(t, y, ws)
    })?;
    run("tanh", vec![a.clone()], &|t, p| {
        let y = t.tanh(p[0]);
        weighted(t, y, ws)
    })?;
    run("sigmoid", vec![a.clone()], &|t, p| {
        let y = t.sigmoid(p[0]);
        weighted(t, y, ws)
    })?;
    run("pos_part", vec![kinked.clone()], &|t, p| {
        let y = t.pos_part(p[0]);
        weighted(t, y, ws)
    })?;
    run("neg_part", vec![kinked.clone()], &|t, p| {
        let y = t.neg_part(p[0]);
        weighted(t, y, ws)
    })?;
    run("broadcast", vec![s.clone()], &|t, p| {
        let y = t.broadcast(p[0], 3, 2)?;
        weighted(t, y, ws)
    })?;
    run("sum", vec![a.clone()], &|t, p| {
        let y = t.sum(p[0]);
        let y = t.square(y);
        Ok(t.sum(y))
    })?;
    run("mean", vec![a.clone()], &|t, p| {
        let y = t.mean(p[0]);
        let y = t.tanh(y);
        Ok(t.sum(y))
    })?;
    run("square", vec![a.clone()], &|t, p| {
        let y = t.square(p[0]);
        weighted(t, y, ws)
    })?;
    run("concat_cols", vec![a.clone(), side], &|t, p| {
        let y = t.concat_cols(&[p[0], p[1]])?;
        weighted(t, y, ws)
    })?;
    run("slice_cols", vec![a.clone()], &|t, p| {
        let y = t.slice_cols(p[0], 1, 3)?;
        weighted(t, y, ws)
    })?;
    run("row_sum", vec![a.clone()], &|t, p| {
        let y = t.row_sum(p[0]);
        weighted(t, y, ws)
    })?;
    run("map", vec![a.clone()], &|t, p| {
        let y = t.map(p[0], f64::sin, f64::cos);
        weighted(t, y, ws)
    })?;
    run("lstm_pointwise", vec![random(&mut rng, 3, 8), random(&mut rng, 3, 2)], &|t, p| {
        let y = t.lstm_pointwise(p[0], p[1])?;
        weighted(t, y, ws)
    })?;
    run("map_indexed", vec![a], &|t, p| {
        let y = t.map_indexed(p[0], |i, x| {
            let k = 1.0 + i as f64 * 0.1;
            ((k * x).exp(), k * (k * x).exp())
        });
        weighted(t, y, ws)
    })?;
    Ok(out)
}

/// All inputs of one LSTM cell perturbed at once.
pub fn check_lstm_cell(seed: u64) -> Result<CheckResult, DbsdeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, input, hidden) = (3, 4, 5);
    let params = vec![
        random(&mut rng, input + hidden, 4 * hidden),
        random(&mut rng, 1, 4 * hidden),
        random(&mut rng, batch, input),
        random(&mut rng, batch, hidden),
        random(&mut rng, batch, hidden),
    ];
    let ws = seed ^ 0xce11;
    let build = |t: &mut Tape, p: &[Var]| -> Result<Var, DbsdeError> {
        let (h, c) = lstm_cell(t, p[0], p[1], p[2], p[3], p[4], hidden)?;
        let a = weighted(t, h, ws)?;
        let b = weighted(t, c, ws + 1)?;
        Ok(t.add(a, b)?)
    };
    result("lstm_cell", check_function(&params, &build), TOL)
}

/// Mean-squared loss of a two-layer tanh network over `draws` random
/// parameter sets; reports the worst draw.
pub fn check_two_layer_mlp(seed: u64, draws: usize) -> Result<CheckResult, DbsdeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut entries = 0;
    for _ in 0..draws {
        let x = random(&mut rng, 8, 3);
        let y = random(&mut rng, 8, 1);
        let params = vec![
            random(&mut rng, 3, 6),
            random(&mut rng, 1, 6),
            random(&mut rng, 6, 1),
            random(&mut rng, 1, 1),
        ];
        let build = |t: &mut Tape, p: &[Var]| -> Result<Var, DbsdeError> {
            let xin = t.constant(x.clone());
            let a = t.matmul(xin, p[0])?;
            let a = t.add_row(a, p[1])?;
            let a = t.tanh(a);
            let a = t.matmul(a, p[2])?;
            let a = t.add_row(a, p[3])?;
            let target = t.constant(y.clone());
            let d = t.sub(a, target)?;
            let d = t.square(d);
            Ok(t.mean(d))
        };
        let (w, n) = check_function(&params, &build)?;
        worst = worst.max(w);
        entries += n;
    }
    Ok(CheckResult {
        name: "two_layer_mlp".into(),
        max_rel_error: worst,
        entries,
        tolerance: TOL,
    })
}

/// The full training loss on a miniature problem: one asset, four time
/// steps, two paths, replacement closeout, all network weights and `v`.
pub fn check_rollout(seed: u64) -> Result<CheckResult, DbsdeError> {
    let claim = Claim::new(Payoff::BasketPut { strike: 1.0 }, 1.0, CloseoutFunction::recovery(0.4)?)?.with_discount(0.03)?;
    let dynamics = Dynamics::gbm_uniform(1, 0.05, 0.2, 0.8)?;
    let hazard = HazardModel::constant(0.1)?;
    let grid = TimeGrid::new(4, 1.0)?;
    let paths = xva_core::simulate::simulate(&dynamics, &grid, 2, seed, Scheme::ExactGbm)?;
    let stack = LstmStack::for_dim(1);
    let network = Network::Lstm(stack);
    let mut params = stack.init(seed).tensors().to_vec();
    params.push(Tensor::scalar(0.2));
    let build = |t: &mut Tape, p: &[Var]| -> Result<Var, DbsdeError> {
        let (net, v) = p.split_at(p.len() - 1);
        let mut grad = network_gradient(t, &network, net, 2);
        let r = rollout_loss(t, &mut grad, v[0], &claim, &dynamics, &hazard, &paths, &grid, RecoveryInput::Replacement)?;
        Ok(r.loss)
    };
    result("rollout", check_function(&params, &build), ROLLOUT_TOL)
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>, DbsdeError> {
    let mut out = check_primitives(seed)?;
    out.push(check_lstm_cell(seed)?);
    out.push(check_two_layer_mlp(seed, 100)?);
    out.push(check_rollout(seed)?);
    Ok(out)
}
