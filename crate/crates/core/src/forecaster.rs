//! QLSTM: stacked LSTM quantile forecaster on an interpolated series.
//!
//! Each quantile level owns a full network (cells plus affine head). The
//! median network is trained first; the other levels sit behind `Ψ` with the
//! median's forecast for the same window as `f_constant`.

use std::io::Write;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluation::kfold_indices;
use crate::dataset::{mean, variance};
use crate::error::{config, domain, Error, Result};
use crate::nn::{init_weights, validation_split, TrainConfig, TrainReport};
use crate::quantile::{self, check_loss_grad, check_loss_unchecked, find_tau, is_median, psi, psi_grad, sigmoid};

/// Gate parameters of one LSTM layer. Every matrix is `hidden × (hidden + input)`
/// acting on `[m_prev, x_t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    /// Forget gate.
    pub w_a: Array2<f64>,
    /// Input gate.
    pub w_b: Array2<f64>,
    /// Candidate.
    pub w_c: Array2<f64>,
    /// Output gate.
    pub w_o: Array2<f64>,
    pub b_a: Array1<f64>,
    pub b_b: Array1<f64>,
    pub b_c: Array1<f64>,
    pub b_o: Array1<f64>,
}

impl LstmCellParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = Array2::zeros((hidden, hidden + input));
        let b = Array1::zeros(hidden);
        Self {
            w_a: w.clone(),
            w_b: w.clone(),
            w_c: w.clone(),
            w_o: w,
            b_a: b.clone(),
            b_b: b.clone(),
            b_c: b.clone(),
            b_o: b,
        }
    }

    /// `N(0, 1 / fan_in)` weights, zero biases except a unit forget bias.
    pub fn init(hidden: usize, input: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || input == 0 {
            return Err(config("LSTM hidden and input sizes must be positive"));
        }
        let cols = hidden + input;
        let w = |k: u64| init_weights(hidden, cols, seed.wrapping_add(k)).mapv(|v| v * std::f64::consts::FRAC_1_SQRT_2);
        Ok(Self {
            w_a: w(0),
            w_b: w(1),
            w_c: w(2),
            w_o: w(3),
            b_a: Array1::ones(hidden),
            b_b: Array1::zeros(hidden),
            b_c: Array1::zeros(hidden),
            b_o: Array1::zeros(hidden),
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_a.ncols() - self.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.w_a.dim();
        if shape.0 == 0 || shape.1 <= shape.0 {
            return Err(config("LSTM cell needs hidden > 0 and input > 0"));
        }
        for (context, w) in [("LSTM w_b", &self.w_b), ("LSTM w_c", &self.w_c), ("LSTM w_o", &self.w_o)] {
            if w.dim() != shape {
                return Err(Error::Shape {
                    context,
                    expected: shape.0 * shape.1,
                    found: w.len(),
                });
            }
        }
        for b in [&self.b_a, &self.b_b, &self.b_c, &self.b_o] {
            if b.len() != shape.0 {
                return Err(Error::Shape {
                    context: "LSTM bias",
                    expected: shape.0,
                    found: b.len(),
                });
            }
        }
        Ok(())
    }

    fn tensors(&self) -> [&Array2<f64>; 4] {
        [&self.w_a, &self.w_b, &self.w_c, &self.w_o]
    }

    fn biases(&self) -> [&Array1<f64>; 4] {
        [&self.b_a, &self.b_b, &self.b_c, &self.b_o]
    }

    fn slices_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut v: Vec<(&mut [f64], bool)> = Vec::with_capacity(8);
        for w in [&mut self.w_a, &mut self.w_b, &mut self.w_c, &mut self.w_o] {
            v.push((w.as_slice_mut().expect("standard layout"), true));
        }
        for b in [&mut self.b_a, &mut self.b_b, &mut self.b_c, &mut self.b_o] {
            v.push((b.as_slice_mut().expect("standard layout"), false));
        }
        v
    }
}

/// Values kept from one cell step for the backward pass.
#[derive(Debug, Clone)]
struct CellTape {
    z: Array1<f64>,
    a: Array1<f64>,
    b: Array1<f64>,
    c: Array1<f64>,
    o: Array1<f64>,
    c_prev: Array1<f64>,
    tanh_c: Array1<f64>,
}

fn cell_step(x: &[f64], m_prev: &Array1<f64>, c_prev: &Array1<f64>, p: &LstmCellParams) -> (Array1<f64>, Array1<f64>, CellTape) {
    let h = p.hidden();
    let mut z = Array1::zeros(h + x.len());
    z.slice_mut(ndarray::s![..h]).assign(m_prev);
    for (k, &v) in x.iter().enumerate() {
        z[h + k] = v;
    }
    let a = (p.w_a.dot(&z) + &p.b_a).mapv(sigmoid);
    let b = (p.w_b.dot(&z) + &p.b_b).mapv(sigmoid);
    let c = (p.w_c.dot(&z) + &p.b_c).mapv(f64::tanh);
    let o = (p.w_o.dot(&z) + &p.b_o).mapv(sigmoid);
    let c_t = &a * c_prev + &b * &c;
    let tanh_c = c_t.mapv(f64::tanh);
    let m_t = &o * &tanh_c;
    let tape = CellTape {
        z,
        a,
        b,
        c,
        o,
        c_prev: c_prev.clone(),
        tanh_c,
    };
    (m_t, c_t, tape)
}

/// One LSTM step: returns `(m_t, C_t)`.
pub fn lstm_cell(x_t: &[f64], m_prev: &[f64], c_prev: &[f64], params: &LstmCellParams) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    let h = params.hidden();
    if x_t.len() != params.input_dim() {
        return Err(Error::Shape {
            context: "LSTM input",
            expected: params.input_dim(),
            found: x_t.len(),
        });
    }
    for (context, v) in [("LSTM hidden state", m_prev), ("LSTM cell state", c_prev)] {
        if v.len() != h {
            return Err(Error::Shape {
                context,
                expected: h,
                found: v.len(),
            });
        }
    }
    let (m, c, _) = cell_step(x_t, &Array1::from(m_prev.to_vec()), &Array1::from(c_prev.to_vec()), params);
    Ok((m.to_vec(), c.to_vec()))
}

/// Backward through one step. `dm`, `dc` are the incoming gradients on
/// `m_t` and `C_t`; returns `(dz, dC_prev)` and accumulates into `g`.
fn cell_backward(p: &LstmCellParams, t: &CellTape, dm: &Array1<f64>, dc: &Array1<f64>, g: &mut LstmCellParams) -> (Array1<f64>, Array1<f64>) {
    let d_o = dm * &t.tanh_c;
    let dc_total = dc + &(dm * &t.o * &t.tanh_c.mapv(|v| 1.0 - v * v));
    let d_a = &dc_total * &t.c_prev;
    let d_b = &dc_total * &t.c;
    let d_c = &dc_total * &t.b;
    let dc_prev = &dc_total * &t.a;
    let pre_a = &d_a * &t.a.mapv(|v| v * (1.0 - v));
    let pre_b = &d_b * &t.b.mapv(|v| v * (1.0 - v));
    let pre_c = &d_c * &t.c.mapv(|v| 1.0 - v * v);
    let pre_o = &d_o * &t.o.mapv(|v| v * (1.0 - v));
    let mut dz = Array1::zeros(t.z.len());
    let zrow = t.z.view().insert_axis(ndarray::Axis(0));
    for (pre, w, gw, gb) in [
        (&pre_a, &p.w_a, &mut g.w_a, &mut g.b_a),
        (&pre_b, &p.w_b, &mut g.w_b, &mut g.b_b),
        (&pre_c, &p.w_c, &mut g.w_c, &mut g.b_c),
        (&pre_o, &p.w_o, &mut g.w_o, &mut g.b_o),
    ] {
        let col = pre.view().insert_axis(ndarray::Axis(1));
        *gw += &col.dot(&zrow);
        *gb += pre;
        dz += &w.t().dot(pre);
    }
    (dz, dc_prev)
}

/// Stacked LSTM plus an affine head on the last hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmNet {
    pub cells: Vec<LstmCellParams>,
    pub head_w: Array1<f64>,
    pub head_b: Array1<f64>,
}

impl LstmNet {
    pub fn new(input: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if hidden.is_empty() {
            return Err(config("LSTM stack needs at least one layer"));
        }
        let mut cells = Vec::with_capacity(hidden.len());
        let mut fan_in = input;
        for (l, &h) in hidden.iter().enumerate() {
            cells.push(LstmCellParams::init(h, fan_in, seed.wrapping_add(16 * l as u64))?);
            fan_in = h;
        }
        let head_w = init_weights(1, fan_in, seed.wrapping_add(1_000_003)).row(0).to_owned();
        Ok(Self {
            cells,
            head_w,
            head_b: Array1::zeros(1),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.cells[0].input_dim()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.cells.iter().map(LstmCellParams::hidden).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut fan_in = self.input_dim();
        for cell in &self.cells {
            cell.validate()?;
            if cell.input_dim() != fan_in {
                return Err(Error::Shape {
                    context: "stacked LSTM input",
                    expected: fan_in,
                    found: cell.input_dim(),
                });
            }
            fan_in = cell.hidden();
        }
        if self.head_w.len() != fan_in || self.head_b.len() != 1 {
            return Err(Error::Shape {
                context: "LSTM head",
                expected: fan_in,
                found: self.head_w.len(),
            });
        }
        Ok(())
    }

    fn check_window(&self, window: &[Vec<f64>]) -> Result<()> {
        if window.is_empty() {
            return Err(domain("empty input window"));
        }
        for x in window {
            if x.len() != self.input_dim() {
                return Err(Error::Shape {
                    context: "LSTM input",
                    expected: self.input_dim(),
                    found: x.len(),
                });
            }
        }
        Ok(())
    }

    fn run(&self, window: &[Vec<f64>], keep: bool) -> (f64, Vec<Vec<CellTape>>) {
        let mut tapes: Vec<Vec<CellTape>> = vec![Vec::new(); if keep { self.cells.len() } else { 0 }];
        let mut m: Vec<Array1<f64>> = self.cells.iter().map(|c| Array1::zeros(c.hidden())).collect();
        let mut cs = m.clone();
        for x in window {
            let mut input = x.clone();
            for (l, cell) in self.cells.iter().enumerate() {
                let (m_t, c_t, tape) = cell_step(&input, &m[l], &cs[l], cell);
                if keep {
                    tapes[l].push(tape);
                }
                input = m_t.to_vec();
                m[l] = m_t;
                cs[l] = c_t;
            }
        }
        let top = m.last().expect("non-empty stack");
        (self.head_w.dot(top) + self.head_b[0], tapes)
    }

    /// Head output before any `Ψ` transform.
    pub fn raw_output(&self, window: &[Vec<f64>]) -> Result<f64> {
        self.check_window(window)?;
        Ok(self.run(window, false).0)
    }

    /// BPTT through the whole window for a scalar `d_out = ∂L/∂raw`.
    /// Returns the raw output and the parameter gradient.
    pub fn backprop(&self, window: &[Vec<f64>], d_out: impl FnOnce(f64) -> f64) -> Result<(f64, LstmNet)> {
        self.check_window(window)?;
        let (raw, tapes) = self.run(window, true);
        let d = d_out(raw);
        let mut g = self.zeros_like();
        let n_layers = self.cells.len();
        let top_h = self.cells[n_layers - 1].hidden();
        let last = &tapes[n_layers - 1][window.len() - 1];
        let top_m = &last.o * &last.tanh_c;
        g.head_w = top_m * d;
        g.head_b[0] = d;

        let mut dm_rec: Vec<Array1<f64>> = self.cells.iter().map(|c| Array1::zeros(c.hidden())).collect();
        let mut dc_rec = dm_rec.clone();
        dm_rec[n_layers - 1] = &self.head_w * d;
        debug_assert_eq!(dm_rec[n_layers - 1].len(), top_h);
        for t in (0..window.len()).rev() {
            let mut from_above: Option<Array1<f64>> = None;
            for l in (0..n_layers).rev() {
                let mut dm = dm_rec[l].clone();
                if let Some(a) = from_above.take() {
                    dm += &a;
                }
                let h = self.cells[l].hidden();
                let (dz, dc_prev) = cell_backward(&self.cells[l], &tapes[l][t], &dm, &dc_rec[l], &mut g.cells[l]);
                dm_rec[l] = dz.slice(ndarray::s![..h]).to_owned();
                dc_rec[l] = dc_prev;
                if l > 0 {
                    from_above = Some(dz.slice(ndarray::s![h..]).to_owned());
                }
            }
        }
        Ok((raw, g))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cells: self
                .cells
                .iter()
                .map(|c| LstmCellParams::zeros(c.hidden(), c.input_dim()))
                .collect(),
            head_w: Array1::zeros(self.head_w.len()),
            head_b: Array1::zeros(1),
        }
    }

    fn slices_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut v = Vec::new();
        for c in &mut self.cells {
            v.extend(c.slices_mut());
        }
        v.push((self.head_w.as_slice_mut().expect("standard layout"), true));
        v.push((self.head_b.as_slice_mut().expect("standard layout"), false));
        v
    }

    /// All parameters in a fixed order (cells, then head).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.cells {
            for w in c.tensors() {
                out.extend(w.iter());
            }
            for b in c.biases() {
                out.extend(b.iter());
            }
        }
        out.extend(self.head_w.iter());
        out.extend(self.head_b.iter());
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let n = self.n_params();
        if values.len() != n {
            return Err(Error::Shape {
                context: "flat LSTM parameters",
                expected: n,
                found: values.len(),
            });
        }
        let mut k = 0;
        for (s, _) in self.slices_mut() {
            s.copy_from_slice(&values[k..k + s.len()]);
            k += s.len();
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.flat_params().len()
    }
}

/// Interface the shared sequence trainer needs from a recurrent network.
pub(crate) trait SequenceNet: Clone + Send + Sync {
    type Input: Sync + Clone;
    fn raw(&self, x: &Self::Input) -> Result<f64>;
    fn grad(&self, x: &Self::Input, d_out: &mut dyn FnMut(f64) -> f64) -> Result<(f64, Self)>;
    fn zero(&self) -> Self;
    fn add_assign(&mut self, other: &Self);
    /// `p -= lr (g + 2 l2 p + l1 sign p)` on weights, `p -= lr g` on biases.
    fn descend(&mut self, g: &Self, lr: f64, l1: f64, l2: f64);
}

pub(crate) fn zip_descend(params: Vec<(&mut [f64], bool)>, grads: Vec<(&mut [f64], bool)>, lr: f64, l1: f64, l2: f64) {
    for ((p, is_w), (g, _)) in params.into_iter().zip(grads) {
        for (pv, &gv) in p.iter_mut().zip(g.iter()) {
            let mut step = gv;
            if is_w {
                step += 2.0 * l2 * *pv + l1 * pv.signum() * f64::from(*pv != 0.0);
            }
            *pv -= lr * step;
        }
    }
}

pub(crate) fn zip_add(params: Vec<(&mut [f64], bool)>, grads: Vec<(&mut [f64], bool)>) {
    for ((p, _), (g, _)) in params.into_iter().zip(grads) {
        for (pv, gv) in p.iter_mut().zip(g.iter()) {
            *pv += gv;
        }
    }
}

impl SequenceNet for LstmNet {
    type Input = Vec<Vec<f64>>;

    fn raw(&self, x: &Self::Input) -> Result<f64> {
        self.raw_output(x)
    }

    fn grad(&self, x: &Self::Input, d_out: &mut dyn FnMut(f64) -> f64) -> Result<(f64, Self)> {
        self.backprop(x, d_out)
    }

    fn zero(&self) -> Self {
        self.zeros_like()
    }

    fn add_assign(&mut self, other: &Self) {
        let mut o = other.clone();
        zip_add(self.slices_mut(), o.slices_mut());
    }

    fn descend(&mut self, g: &Self, lr: f64, l1: f64, l2: f64) {
        let mut g = g.clone();
        zip_descend(self.slices_mut(), g.slices_mut(), lr, l1, l2);
    }
}

/// Output transform of one level during training: identity at the median,
/// otherwise `Ψ(τ, raw, f, λ)` with the per-sample median `f`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Level {
    pub tau: f64,
    pub lambda: f64,
}

impl Level {
    fn output(self, raw: f64, f: Option<f64>) -> f64 {
        match f {
            Some(f) if !is_median(self.tau) => psi(self.tau, raw, f, self.lambda),
            _ => raw,
        }
    }

    fn output_grad(self, raw: f64, f: Option<f64>) -> f64 {
        match f {
            Some(_) if !is_median(self.tau) => psi_grad(self.tau, raw, self.lambda),
            _ => 1.0,
        }
    }
}

/// Minibatch SGD on the check loss at `level.tau`, with the same validation
/// split and early-stopping rule as the dense trainer.
pub(crate) fn train_sequence<N: SequenceNet>(
    net: &mut N,
    inputs: &[N::Input],
    targets: &[f64],
    f_constant: Option<&[f64]>,
    level: Level,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if inputs.len() != targets.len() {
        return Err(Error::Shape {
            context: "sequence targets",
            expected: inputs.len(),
            found: targets.len(),
        });
    }
    let tau = level.tau;
    let (train_idx, val_idx) = validation_split(inputs.len(), cfg.validation_fraction, cfg.seed);
    cfg.validate(train_idx.len())?;
    let f_at = |i: usize| f_constant.map(|f| f[i]);
    let eval = |net: &N, idx: &[usize]| -> Result<f64> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        for &i in idx {
            let p = level.output(net.raw(&inputs[i])?, f_at(i));
            total += check_loss_unchecked(targets[i] - p, tau);
        }
        Ok(total / idx.len() as f64)
    };

    let initial_loss = eval(net, &train_idx)?;
    let use_val = !val_idx.is_empty();
    let mut best_val = if use_val { eval(net, &val_idx)? } else { f64::INFINITY };
    let mut best_net = net.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = train_idx.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut validation_losses = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = net.zero();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let f = f_at(i);
                let mut loss = 0.0;
                let (_, g) = net.grad(&inputs[i], &mut |raw| {
                    let r = targets[i] - level.output(raw, f);
                    loss = check_loss_unchecked(r, tau);
                    -check_loss_grad(r, tau) * level.output_grad(raw, f) * scale
                })?;
                total += loss;
                acc.add_assign(&g);
            }
            net.descend(&acc, cfg.learning_rate, cfg.l1, cfg.l2);
        }
        let epoch_loss = total / train_idx.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, tau });
        }
        epoch_losses.push(epoch_loss);
        if use_val {
            let v = eval(net, &val_idx)?;
            if !v.is_finite() {
                return Err(Error::TrainingDiverged { epoch, tau });
            }
            validation_losses.push(v);
            if v < best_val {
                best_val = v;
                best_net = net.clone();
                best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        } else {
            best_epoch = epoch;
        }
    }
    if use_val {
        *net = best_net;
    }
    let final_loss = eval(net, &train_idx)?;
    Ok(TrainReport {
        initial_loss,
        final_loss,
        epoch_losses,
        validation_losses,
        best_epoch,
    })
}

/// Contiguous stride-1 windows: `(series[k-j..k], series[k])` for `k = j..len`.
pub fn make_windows(series: &[f64], j: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    if j == 0 {
        return Err(domain("window length must be positive"));
    }
    if series.len() <= j {
        return Err(domain(format!(
            "series of length {} is too short for window {j}",
            series.len()
        )));
    }
    Ok((j..series.len()).map(|k| (series[k - j..k].to_vec(), series[k])).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QlstmConfig {
    /// Hidden size per stacked layer; `P` is the length.
    pub hidden: Vec<usize>,
    /// Window length `j`.
    pub window: usize,
    pub taus: Vec<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    /// With `k >= 2`, the non-median levels are fitted around out-of-fold
    /// medians from `k` extra median fits; 0 keeps the in-sample median.
    #[serde(default)]
    pub cross_fit_folds: usize,
    pub train: TrainConfig,
}

impl Default for QlstmConfig {
    fn default() -> Self {
        Self {
            hidden: vec![50],
            window: 12,
            taus: vec![0.05, 0.5, 0.95],
            lambda: None,
            cross_fit_folds: 0,
            train: TrainConfig {
                learning_rate: 0.05,
                batch_size: 16,
                epochs: 300,
                l1l2_layers: Vec::new(),
                ..TrainConfig::default()
            },
        }
    }
}

/// Mean/std standardization of a training series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesScale {
    pub mean: f64,
    pub std: f64,
}

impl SeriesScale {
    pub fn fit(series: &[f64]) -> Self {
        let sd = variance(series).sqrt();
        Self {
            mean: mean(series),
            std: if sd > 0.0 { sd } else { 1.0 },
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, u: f64) -> f64 {
        self.mean + self.std * u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QlstmModel {
    pub window: usize,
    pub median: LstmNet,
    /// Non-median levels, ascending.
    pub quantiles: Vec<(f64, LstmNet)>,
    /// `λ` on the original scale.
    pub lambda: f64,
    pub scale: SeriesScale,
    pub config: QlstmConfig,
}

/// Forecasts for `u` steps ahead; `values[k]` belongs to `taus[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub taus: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl Forecast {
    pub fn horizon(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn level(&self, tau: f64) -> Result<&[f64]> {
        self.taus
            .iter()
            .position(|&t| (t - tau).abs() < quantile::TAU_EPS)
            .map(|k| self.values[k].as_slice())
            .ok_or(Error::MissingQuantile(tau))
    }

    pub fn median(&self) -> &[f64] {
        self.level(0.5).expect("forecasts always carry the median")
    }
}

pub(crate) fn level_seed(base: u64, k: usize) -> u64 {
    base.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(31 * k as u64 + 7)
}

pub(crate) fn resolve_lambda(series: &[f64], lambda: Option<f64>) -> Result<f64> {
    match lambda {
        Some(l) if l > 0.0 => Ok(l),
        Some(l) => Err(config(format!("lambda must be positive, got {l}"))),
        None => Ok(2.0 * quantile::default_lambda(series)),
    }
}

/// Trains the median net, then every other level in parallel against the
/// frozen median. `make` builds an untrained net from a seed. All levels
/// share one validation split, so early stopping for a quantile level is
/// judged on windows the median never trained on.
pub(crate) fn fit_levels<N: SequenceNet>(
    inputs: &[N::Input],
    targets: &[f64],
    taus: &[f64],
    lambda_std: f64,
    train: &TrainConfig,
    cross_fit_folds: usize,
    make: impl Fn(u64) -> Result<N> + Sync,
) -> Result<(N, Vec<(f64, N)>)> {
    let median_level = Level { tau: 0.5, lambda: lambda_std };
    let mut median = make(level_seed(train.seed, 0))?;
    train_sequence(&mut median, inputs, targets, None, median_level, train)?;
    let f: Vec<f64> = if cross_fit_folds >= 2 {
        let folds = kfold_indices(inputs.len(), cross_fit_folds, train.seed ^ 0xc0f0_1d)?;
        let parts: Vec<Result<(Vec<usize>, Vec<f64>)>> = folds
            .par_iter()
            .enumerate()
            .map(|(k, (tr, te))| {
                let mut net = make(level_seed(train.seed, 1000 + k))?;
                let xs: Vec<N::Input> = tr.iter().map(|&i| inputs[i].clone()).collect();
                let ys: Vec<f64> = tr.iter().map(|&i| targets[i]).collect();
                train_sequence(&mut net, &xs, &ys, None, median_level, train)?;
                let p = te.iter().map(|&i| net.raw(&inputs[i])).collect::<Result<Vec<_>>>()?;
                Ok((te.clone(), p))
            })
            .collect();
        let mut f = vec![0.0; inputs.len()];
        for part in parts {
            let (te, p) = part?;
            for (i, v) in te.into_iter().zip(p) {
                f[i] = v;
            }
        }
        f
    } else {
        inputs.iter().map(|x| median.raw(x)).collect::<Result<_>>()?
    };
    let others: Vec<(usize, f64)> = taus.iter().copied().enumerate().filter(|(_, t)| !is_median(*t)).collect();
    let fitted: Vec<Result<(f64, N)>> = others
        .par_iter()
        .map(|&(k, tau)| {
            let mut net = make(level_seed(train.seed, k + 1))?;
            train_sequence(&mut net, inputs, targets, Some(&f), Level { tau, lambda: lambda_std }, train)?;
            Ok((tau, net))
        })
        .collect();
    let quantiles = fitted.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((median, quantiles))
}

pub fn fit_qlstm(series: &[f64], cfg: &QlstmConfig) -> Result<QlstmModel> {
    if series.iter().any(|v| !v.is_finite()) {
        return Err(domain("series contains non-finite values"));
    }
    let taus = quantile::normalize_taus(cfg.taus.clone())?;
    let scale = SeriesScale::fit(series);
    let lambda = resolve_lambda(series, cfg.lambda)?;
    let std_series: Vec<f64> = series.iter().map(|&v| scale.apply(v)).collect();
    let windows = make_windows(&std_series, cfg.window)?;
    let inputs: Vec<Vec<Vec<f64>>> = windows.iter().map(|(w, _)| w.iter().map(|&v| vec![v]).collect()).collect();
    let targets: Vec<f64> = windows.iter().map(|(_, y)| *y).collect();
    let (median, quantiles) = fit_levels(&inputs, &targets, &taus, lambda / scale.std, &cfg.train, cfg.cross_fit_folds, |seed| {
        LstmNet::new(1, &cfg.hidden, seed)
    })?;
    Ok(QlstmModel {
        window: cfg.window,
        median,
        quantiles,
        lambda,
        scale,
        config: QlstmConfig { taus, ..cfg.clone() },
    })
}

/// Independent per-location fits, run concurrently.
pub fn fit_qlstm_many(series: &[Vec<f64>], cfg: &QlstmConfig) -> Result<Vec<QlstmModel>> {
    series.par_iter().map(|s| fit_qlstm(s, cfg)).collect()
}

impl QlstmModel {
    pub fn taus(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.quantiles.iter().map(|(t, _)| *t).collect();
        t.push(0.5);
        t.sort_by(f64::total_cmp);
        t
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.median.validate()?;
        for (_, n) in &m.quantiles {
            n.validate()?;
        }
        Ok(m)
    }
}

/// Recursive multi-step forecasting shared by both forecasters: `step`
/// returns the standardized median and `(τ, raw)` pairs for the current
/// state, `advance` feeds the median back.
pub(crate) fn recurse(
    u: usize,
    taus: &[f64],
    lambda: f64,
    scale: SeriesScale,
    mut step: impl FnMut() -> Result<(f64, Vec<(f64, f64)>)>,
    mut advance: impl FnMut(f64),
) -> Result<Forecast> {
    if u == 0 {
        return Err(domain("forecast horizon must be positive"));
    }
    let mut values = vec![Vec::with_capacity(u); taus.len()];
    for _ in 0..u {
        let (med_std, raws) = step()?;
        let med = scale.invert(med_std);
        for (k, &tau) in taus.iter().enumerate() {
            let v = if is_median(tau) {
                med
            } else {
                let raw = find_tau(&raws, tau).ok_or(Error::MissingQuantile(tau))?;
                psi(tau, *raw, med, lambda)
            };
            values[k].push(v);
        }
        advance(med_std);
    }
    Ok(Forecast {
        taus: taus.to_vec(),
        values,
    })
}

/// `u`-step forecasts from the last `j` values of `series`.
pub fn forecast(model: &QlstmModel, series: &[f64], u: usize) -> Result<Forecast> {
    let j = model.window;
    if series.len() < j {
        return Err(domain(format!("need at least {j} values to forecast, got {}", series.len())));
    }
    let mut window: Vec<Vec<f64>> = series[series.len() - j..].iter().map(|&v| vec![model.scale.apply(v)]).collect();
    let taus = model.taus();
    let cell = std::cell::RefCell::new(&mut window);
    recurse(
        u,
        &taus,
        model.lambda,
        model.scale,
        || {
            let w = cell.borrow();
            let med = model.median.raw_output(&w)?;
            let raws = model
                .quantiles
                .iter()
                .map(|(t, n)| Ok((*t, n.raw_output(&w)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok((med, raws))
        },
        |med| {
            let mut w = cell.borrow_mut();
            w.remove(0);
            w.push(vec![med]);
        },
    )
}

/// Writes `location_id,horizon,tau,value` rows, horizons counted from 1.
pub fn write_forecast_csv<W: Write>(writer: W, forecasts: &[(String, Forecast)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["location_id", "horizon", "tau", "value"])?;
    for (id, f) in forecasts {
        for h in 0..f.horizon() {
            for (k, tau) in f.taus.iter().enumerate() {
                w.write_record([id.clone(), (h + 1).to_string(), tau.to_string(), f.values[k][h].to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
