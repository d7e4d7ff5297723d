//! Gradient networks, initialization, Adam and parameter checkpoints.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{0}")]
    Shape(String),
    #[error("checkpoint line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

const CHECKPOINT_MAGIC: &str = "xva-params 1";

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor as a trainable leaf.
    pub fn record(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Records every tensor as a constant.
    pub fn record_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Text checkpoint: a magic line, then per tensor a `name rows cols`
    /// header followed by one line of values in `{:.16e}` format, which
    /// round-trips every finite `f64` exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(CHECKPOINT_MAGIC);
        s.push('\n');
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let _ = writeln!(s, "{name} {} {}", t.rows(), t.cols());
            let mut first = true;
            for v in t.data() {
                if !first {
                    s.push(' ');
                }
                first = false;
                let _ = write!(s, "{v:.16e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, NnError> {
        let err = |line: usize, reason: String| NnError::Checkpoint { line, reason };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == CHECKPOINT_MAGIC => {}
            Some((_, l)) => return Err(err(1, format!("unsupported header {l:?}"))),
            None => return Err(err(1, "empty file".into())),
        }
        let mut out = ParamSet::new();
        while let Some((i, header)) = lines.next() {
            if header.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = header.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(err(i + 1, format!("expected `name rows cols`, got {header:?}")));
            }
            let rows: usize = fields[1].parse().map_err(|e| err(i + 1, format!("rows: {e}")))?;
            let cols: usize = fields[2].parse().map_err(|e| err(i + 1, format!("cols: {e}")))?;
            let (j, body) = lines.next().ok_or_else(|| err(i + 2, "missing values".into()))?;
            let data = body
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(j + 1, e.to_string()))?;
            let t = Tensor::new(rows, cols, data).map_err(|e| err(j + 1, e.to_string()))?;
            out.push(fields[0], t);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Uniform Glorot bound for a `rows x cols` weight matrix.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = glorot_bound(rows, cols);
    let dist = Uniform::new_inclusive(-a, a);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("consistent shape")
}

/// Stacked LSTM mapping `(t/T, x)` to an `m`-vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmStack {
    pub state_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

/// Hidden and cell states of every layer.
#[derive(Debug, Clone)]
pub struct LstmCarry {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl LstmStack {
    /// Three layers of width `d + 10`.
    pub fn for_dim(d: usize) -> Self {
        Self {
            state_dim: d,
            hidden: d + 10,
            layers: 3,
        }
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.state_dim + 1
        } else {
            self.hidden
        }
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        (0..self.layers).map(|l| 4 * (self.layer_input(l) + h + 1) * h).sum::<usize>() + (h + 1) * self.state_dim
    }

    /// Layer `l` has `lstm.l.w` of shape `(in + h) x 4h` with gate blocks
    /// `[input, forget, candidate, output]` and `lstm.l.b` of shape `1 x 4h`.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = self.hidden;
        let mut p = ParamSet::new();
        for l in 0..self.layers {
            p.push(format!("lstm.{l}.w"), glorot(&mut rng, self.layer_input(l) + h, 4 * h));
            p.push(format!("lstm.{l}.b"), Tensor::from_fn(1, 4 * h, |_, j| if (h..2 * h).contains(&j) { 1.0 } else { 0.0 }));
        }
        p.push("head.w", glorot(&mut rng, h, self.state_dim));
        p.push("head.b", Tensor::zeros(1, self.state_dim));
        p
    }

    pub fn zero_carry(&self, tape: &mut Tape, batch: usize) -> LstmCarry {
        let zeros = tape.constant(Tensor::zeros(batch, self.hidden));
        LstmCarry {
            h: vec![zeros; self.layers],
            c: vec![zeros; self.layers],
        }
    }

    /// One time step for a batch: `t_scaled` in `[0, 1]`, `x` of shape `L x m`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        t_scaled: f64,
        x: Var,
        carry: &mut LstmCarry,
    ) -> Result<Var, NnError> {
        let (batch, m) = tape.value(x).shape();
        if m != self.state_dim {
            return Err(NnError::Shape(format!("state has {m} columns, network expects {}", self.state_dim)));
        }
        if params.len() != 2 * self.layers + 2 || carry.h.len() != self.layers || carry.c.len() != self.layers {
            return Err(NnError::Shape("parameter or carry layout does not match the stack".into()));
        }
        let h = self.hidden;
        let t = tape.constant(Tensor::filled(batch, 1, t_scaled));
        let mut input = tape.concat_cols(&[t, x])?;
        for l in 0..self.layers {
            let (hn, cn) = lstm_cell(tape, params[2 * l], params[2 * l + 1], input, carry.h[l], carry.c[l], h)?;
            carry.h[l] = hn;
            carry.c[l] = cn;
            input = hn;
        }
        let out = tape.matmul(input, params[2 * self.layers])?;
        Ok(tape.add_row(out, params[2 * self.layers + 1])?)
    }
}

/// A single LSTM cell with sigmoid gates and tanh candidate/cell activations.
pub fn lstm_cell(
    tape: &mut Tape,
    w: Var,
    b: Var,
    input: Var,
    h_prev: Var,
    c_prev: Var,
    hidden: usize,
) -> Result<(Var, Var), NnError> {
    let z = tape.concat_cols(&[input, h_prev])?;
    let z = tape.matmul(z, w)?;
    let z = tape.add_row(z, b)?;
    let hc = tape.lstm_pointwise(z, c_prev)?;
    let h = tape.slice_cols(hc, 0, hidden)?;
    let c = tape.slice_cols(hc, hidden, 2 * hidden)?;
    Ok((h, c))
}

/// One independent `m -> h -> h -> m` tanh network per time node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FcSubnetworks {
    pub state_dim: usize,
    pub hidden: usize,
    pub nodes: usize,
}

impl FcSubnetworks {
    pub fn for_dim(d: usize, nodes: usize) -> Self {
        Self {
            state_dim: d,
            hidden: d + 10,
            nodes,
        }
    }

    pub fn param_count(&self) -> usize {
        let (m, h) = (self.state_dim, self.hidden);
        self.nodes * ((m + 1) * h + (h + 1) * h + (h + 1) * m)
    }

    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, h) = (self.state_dim, self.hidden);
        let mut p = ParamSet::new();
        for i in 0..self.nodes {
            p.push(format!("fc.{i}.w1"), glorot(&mut rng, m, h));
            p.push(format!("fc.{i}.b1"), Tensor::zeros(1, h));
            p.push(format!("fc.{i}.w2"), glorot(&mut rng, h, h));
            p.push(format!("fc.{i}.b2"), Tensor::zeros(1, h));
            p.push(format!("fc.{i}.w3"), glorot(&mut rng, h, m));
            p.push(format!("fc.{i}.b3"), Tensor::zeros(1, m));
        }
        p
    }

    /// The network attached to time node `node`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], node: usize, x: Var) -> Result<Var, NnError> {
        if node >= self.nodes || params.len() != 6 * self.nodes {
            return Err(NnError::Shape(format!("time node {node} outside 0..{}", self.nodes)));
        }
        let p = &params[6 * node..6 * node + 6];
        let a = tape.matmul(x, p[0])?;
        let a = tape.add_row(a, p[1])?;
        let a = tape.tanh(a);
        let a = tape.matmul(a, p[2])?;
        let a = tape.add_row(a, p[3])?;
        let a = tape.tanh(a);
        let a = tape.matmul(a, p[4])?;
        Ok(tape.add_row(a, p[5])?)
    }
}

/// Gradient network choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Network {
    Lstm(LstmStack),
    MultiFc(FcSubnetworks),
}

/// Recurrent state threaded through a rollout.
#[derive(Debug, Clone)]
pub enum Carry {
    Lstm(LstmCarry),
    None,
}

impl Network {
    pub fn init(&self, seed: u64) -> ParamSet {
        match self {
            Network::Lstm(n) => n.init(seed),
            Network::MultiFc(n) => n.init(seed),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Network::Lstm(n) => n.param_count(),
            Network::MultiFc(n) => n.param_count(),
        }
    }

    pub fn begin(&self, tape: &mut Tape, batch: usize) -> Carry {
        match self {
            Network::Lstm(n) => Carry::Lstm(n.zero_carry(tape, batch)),
            Network::MultiFc(_) => Carry::None,
        }
    }

    /// Gradient estimate at time node `node` (time `t_scaled = t_node / T`).
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &[Var],
        node: usize,
        t_scaled: f64,
        x: Var,
        carry: &mut Carry,
    ) -> Result<Var, NnError> {
        match (self, carry) {
            (Network::Lstm(n), Carry::Lstm(c)) => n.forward(tape, params, t_scaled, x, c),
            (Network::MultiFc(n), _) => n.forward(tape, params, node, x),
            (Network::Lstm(_), Carry::None) => Err(NnError::Shape("LSTM step without carry".into())),
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Halve the learning rate every this many iterations.
    pub halve_every: Option<usize>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            halve_every: Some(1000),
        }
    }
}

impl AdamConfig {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr,
            halve_every: None,
            ..Self::default()
        }
    }

    /// Learning rate in use at iteration `iter` (zero-based).
    pub fn lr_at(&self, iter: usize) -> f64 {
        match self.halve_every {
            Some(k) if k > 0 => self.lr * 0.5f64.powi((iter / k) as i32),
            _ => self.lr,
        }
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    applied: u64,
    calls: usize,
    skipped: usize,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            applied: 0,
            calls: 0,
            skipped: 0,
        }
    }

    pub fn applied(&self) -> u64 {
        self.applied
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Records an iteration that produced no usable gradient.
    pub fn skip(&mut self) {
        self.calls += 1;
        self.skipped += 1;
    }

    /// Applies one update; returns `false` (and counts a skip) when any
    /// gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<bool, NnError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(NnError::Shape(format!(
                    "tensor {i}: parameter {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            self.skip();
            return Ok(false);
        }
        let lr = self.config.lr_at(self.calls);
        self.calls += 1;
        self.applied += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.applied as i32);
        let c2 = 1.0 - beta2.powi(self.applied as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_formula() {
        for (d, h) in [(1, 11), (5, 15), (10, 20)] {
            let net = LstmStack::for_dim(d);
            assert_eq!(net.hidden, h);
            let expected = 4 * (d + 1 + h + 1) * h + 2 * 4 * (2 * h + 1) * h + (h + 1) * d;
            assert_eq!(net.param_count(), expected);
            assert_eq!(net.init(3).count(), expected);
        }
    }

    #[test]
    fn same_seed_same_init() {
        let net = LstmStack::for_dim(5);
        assert_eq!(net.init(42), net.init(42));
        assert_ne!(net.init(42), net.init(43));
    }

    #[test]
    fn forget_bias_is_one() {
        let net = LstmStack::for_dim(5);
        let p = net.init(1);
        let h = net.hidden;
        for l in 0..3 {
            let b = p.get(&format!("lstm.{l}.b")).unwrap();
            for j in 0..4 * h {
                let want = if (h..2 * h).contains(&j) { 1.0 } else { 0.0 };
                assert_eq!(b.get(0, j), want);
            }
        }
    }

    #[test]
    fn glorot_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (rows, cols) = (200, 300);
        let w = glorot(&mut rng, rows, cols);
        let a = glorot_bound(rows, cols);
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let want = a * a / 3.0;
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
        assert!(w.data().iter().all(|x| x.abs() <= a));
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let net = LstmStack::for_dim(2);
        let mut p = net.init(0);
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let vars = p.record(&mut tape);
        let mut carry = net.zero_carry(&mut tape, 3);
        let x = tape.constant(Tensor::from_fn(3, 2, |i, j| (i + j) as f64));
        let y = net.forward(&mut tape, &vars, 0.5, x, &mut carry).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(3, 2));
    }

    #[test]
    fn batch_rows_are_independent() {
        let net = LstmStack::for_dim(3);
        let p = net.init(5);
        let run = |rows: &[[f64; 3]]| {
            let mut tape = Tape::new();
            let vars = p.record(&mut tape);
            let mut carry = net.zero_carry(&mut tape, rows.len());
            let mut out = Vec::new();
            for step in 0..3 {
                let x = tape.constant(Tensor::from_fn(rows.len(), 3, |i, j| rows[i][j] + step as f64 * 0.1));
                let y = net.forward(&mut tape, &vars, step as f64 / 3.0, x, &mut carry).unwrap();
                out.push(tape.value(y).clone());
            }
            out
        };
        let a = run(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]]);
        let b = run(&[[1.0, -1.0, 0.5], [0.1, 0.2, 0.3]]);
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.row(0), tb.row(1));
            assert_eq!(ta.row(1), tb.row(0));
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = LstmStack::for_dim(3);
        let p = net.init(5);
        let mut tape = Tape::new();
        let vars = p.record(&mut tape);
        let mut carry = net.zero_carry(&mut tape, 2);
        let x = tape.constant(Tensor::zeros(2, 4));
        assert!(net.forward(&mut tape, &vars, 0.0, x, &mut carry).is_err());
    }

    #[test]
    fn multifc_layout() {
        let net = FcSubnetworks::for_dim(5, 4);
        let p = net.init(2);
        assert_eq!(p.count(), net.param_count());
        assert_eq!(p.len(), 24);
        assert_ne!(p.get("fc.0.w1"), p.get("fc.1.w1"));
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut params = vec![Tensor::new(1, 3, vec![1.0, 1.0, 1.0]).unwrap()];
        let grads = vec![Tensor::new(1, 3, vec![1e-3, -2.0, 50.0]).unwrap()];
        let mut adam = AdamState::new(AdamConfig::constant(0.01), &params);
        assert!(adam.step(&mut params, &grads).unwrap());
        let moved: Vec<f64> = params[0].data().iter().map(|p| p - 1.0).collect();
        assert!((moved[0] + 0.01).abs() < 1e-7);
        assert!((moved[1] - 0.01).abs() < 1e-9);
        assert!((moved[2] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut params = vec![Tensor::filled(2, 2, 0.7)];
        let before = params.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..10 {
            adam.step(&mut params, &[Tensor::zeros(2, 2)]).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut params = vec![Tensor::new(1, 2, vec![0.6, 0.8]).unwrap()];
        let mut adam = AdamState::new(AdamConfig::constant(0.01), &params);
        for _ in 0..5000 {
            let g = params[0].clone();
            adam.step(&mut params, &[g]).unwrap();
        }
        let norm = params[0].data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-4, "{norm}");
    }

    #[test]
    fn non_finite_gradient_skipped() {
        let mut params = vec![Tensor::filled(1, 2, 1.0)];
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let bad = Tensor::new(1, 2, vec![f64::NAN, 1.0]).unwrap();
        assert!(!adam.step(&mut params, &[bad]).unwrap());
        assert_eq!(adam.skipped(), 1);
        assert_eq!(adam.applied(), 0);
        assert_eq!(params[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn learning_rate_halves() {
        let c = AdamConfig::default();
        assert_eq!(c.lr_at(0), 5e-3);
        assert_eq!(c.lr_at(999), 5e-3);
        assert_eq!(c.lr_at(1000), 2.5e-3);
        assert_eq!(c.lr_at(3500), 6.25e-4);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = LstmStack::for_dim(2);
        let mut p = net.init(11);
        p.push("v", Tensor::scalar(-0.1 + 1e-17));
        p.get_mut("head.b").unwrap().data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        let back = ParamSet::from_text(&p.to_text()).unwrap();
        assert_eq!(back.names(), p.names());
        for (a, b) in back.tensors().iter().zip(p.tensors()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(ParamSet::from_text("xva-params 2\n").is_err());
        let err = ParamSet::from_text("xva-params 1\nw 1 2\n1.0\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
