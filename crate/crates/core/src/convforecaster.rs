//! QConvLSTM: quantile forecasting from `r × r` interpolated neighbourhoods.
//!
//! Inputs are convolved with valid 3×3 kernels; the recurrent path uses a
//! 1×1 convolution so the state keeps the `(r-2) × (r-2)` extent of the
//! first layer's output. The head flattens the top state maps to a scalar
//! forecast of the centre cell.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::forecaster::{self, fit_levels, recurse, resolve_lambda, zip_add, zip_descend, Forecast, SeriesScale, SequenceNet};
use crate::interpolator::DeepKrigingModel;
use crate::nn::{init_weights, TrainConfig};
use crate::quantile::{self, sigmoid};

/// Time-ordered `r × r` frames around `center`, cell `[a, b]` sitting at
/// `center + ((a - c) δ, (b - c) δ)` with `c = r / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSeries {
    pub frames: Vec<Array2<f64>>,
    pub times: Vec<f64>,
    pub center: [f64; 2],
    pub delta: f64,
}

impl NeighborhoodSeries {
    pub fn new(frames: Vec<Array2<f64>>, times: Vec<f64>, center: [f64; 2], delta: f64) -> Result<Self> {
        let n = Self {
            frames,
            times,
            center,
            delta,
        };
        n.validate()?;
        Ok(n)
    }

    pub fn r(&self) -> usize {
        self.frames.first().map_or(0, |f| f.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.r();
        if r < 3 || r % 2 == 0 {
            return Err(Error::Shape {
                context: "neighbourhood side (odd, at least 3)",
                expected: 3,
                found: r,
            });
        }
        for f in &self.frames {
            if f.dim() != (r, r) {
                return Err(Error::Shape {
                    context: "neighbourhood frame",
                    expected: r * r,
                    found: f.len(),
                });
            }
        }
        if self.times.len() != self.frames.len() {
            return Err(Error::Shape {
                context: "frame times",
                expected: self.frames.len(),
                found: self.times.len(),
            });
        }
        Ok(())
    }

    pub fn center_series(&self) -> Vec<f64> {
        let c = self.r() / 2;
        self.frames.iter().map(|f| f[[c, c]]).collect()
    }

    pub fn cell_location(&self, a: usize, b: usize) -> [f64; 2] {
        let c = (self.r() / 2) as f64;
        [
            self.center[0] + (a as f64 - c) * self.delta,
            self.center[1] + (b as f64 - c) * self.delta,
        ]
    }

    /// One CSV per frame, `frame_0000.csv` onwards, columns `a,b,s1,s2,t,value`.
    pub fn write_frames(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (k, (frame, t)) in self.frames.iter().zip(&self.times).enumerate() {
            let mut w = csv::Writer::from_path(dir.join(format!("frame_{k:04}.csv")))?;
            w.write_record(["a", "b", "s1", "s2", "t", "value"])?;
            for ((a, b), v) in frame.indexed_iter() {
                let s = self.cell_location(a, b);
                w.write_record([a.to_string(), b.to_string(), s[0].to_string(), s[1].to_string(), t.to_string(), v.to_string()])?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Median distance from each station to its nearest other station.
pub fn median_nn_distance(stations: &[[f64; 2]]) -> Result<f64> {
    if stations.len() < 2 {
        return Err(domain("need at least two stations for a nearest-neighbour spacing"));
    }
    let mut d: Vec<f64> = stations
        .iter()
        .enumerate()
        .map(|(i, a)| {
            stations
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    Ok(if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) })
}

/// Median interpolation on the `r × r` lattice around `s0` at each time.
pub fn grid_neighborhood(model: &DeepKrigingModel, s0: [f64; 2], times: &[f64], r: usize, delta: f64) -> Result<NeighborhoodSeries> {
    if r < 3 || r % 2 == 0 {
        return Err(Error::Shape {
            context: "neighbourhood side (odd, at least 3)",
            expected: 3,
            found: r,
        });
    }
    if !(delta > 0.0) {
        return Err(domain(format!("lattice spacing must be positive, got {delta}")));
    }
    let c = (r / 2) as f64;
    let cells: Vec<[f64; 2]> = (0..r * r)
        .map(|k| [s0[0] + ((k / r) as f64 - c) * delta, s0[1] + ((k % r) as f64 - c) * delta])
        .collect();
    let t_any = times.first().copied().unwrap_or(0.0);
    if cells.iter().any(|&s| model.embedding.rescale.is_extrapolation(s, t_any)) {
        log::warn!("neighbourhood lattice around {s0:?} with spacing {delta} leaves the training domain");
    }
    let points: Vec<([f64; 2], f64)> = times.iter().flat_map(|&t| cells.iter().map(move |&s| (s, t))).collect();
    let values = model.predict_points(&points, 0.5)?;
    let frames = values
        .chunks(r * r)
        .map(|chunk| Array2::from_shape_vec((r, r), chunk.to_vec()).expect("r*r values"))
        .collect();
    NeighborhoodSeries::new(frames, times.to_vec(), s0, delta)
}

/// A bank of 3×3 filters over `C` input channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerParams {
    /// `filters × channels × 3 × 3`.
    pub kernels: Array4<f64>,
    pub bias: Array1<f64>,
}

fn check_conv_input(frame: &Array3<f64>, kernels: &Array4<f64>) -> Result<()> {
    let (c, n1, n2) = frame.dim();
    if n1 < 3 || n2 < 3 {
        return Err(Error::Shape {
            context: "convolution input side",
            expected: 3,
            found: n1.min(n2),
        });
    }
    if kernels.dim().1 != c || kernels.dim().2 != 3 || kernels.dim().3 != 3 {
        return Err(Error::Shape {
            context: "convolution channels",
            expected: c,
            found: kernels.dim().1,
        });
    }
    Ok(())
}

/// Valid cross-correlation: `out[f, i, j] = b[f] + Σ_c Σ_k x[c, i+k1, j+k2] w[f, c, k1, k2]`.
pub fn conv_forward(frame: &Array3<f64>, params: &ConvLayerParams) -> Result<Array3<f64>> {
    check_conv_input(frame, &params.kernels)?;
    if params.bias.len() != params.kernels.dim().0 {
        return Err(Error::Shape {
            context: "convolution bias",
            expected: params.kernels.dim().0,
            found: params.bias.len(),
        });
    }
    let mut out = conv_valid(frame, &params.kernels);
    for (f, mut map) in out.outer_iter_mut().enumerate() {
        map += params.bias[f];
    }
    Ok(out)
}

fn conv_valid(x: &Array3<f64>, w: &Array4<f64>) -> Array3<f64> {
    let (nc, n1, n2) = x.dim();
    let nf = w.dim().0;
    let (o1, o2) = (n1 - 2, n2 - 2);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let ws = w.as_standard_layout();
    let ws = ws.as_slice().expect("standard layout");
    let mut out = vec![0.0; nf * o1 * o2];
    for f in 0..nf {
        for c in 0..nc {
            let wb = (f * nc + c) * 9;
            let xb = c * n1 * n2;
            for i in 0..o1 {
                for j in 0..o2 {
                    let mut acc = 0.0;
                    for k1 in 0..3 {
                        let row = xb + (i + k1) * n2 + j;
                        acc += ws[wb + k1 * 3] * xs[row] + ws[wb + k1 * 3 + 1] * xs[row + 1] + ws[wb + k1 * 3 + 2] * xs[row + 2];
                    }
                    out[(f * o1 + i) * o2 + j] += acc;
                }
            }
        }
    }
    Array3::from_shape_vec((nf, o1, o2), out).expect("sized above")
}

/// Adds into `gw` and `dx` the gradients of `conv_valid(x, w)` given `dout`.
fn conv_valid_backward(x: &Array3<f64>, w: &Array4<f64>, dout: &Array3<f64>, gw: &mut Array4<f64>, dx: Option<&mut Array3<f64>>) {
    let (nc, _, _) = x.dim();
    let (nf, o1, o2) = dout.dim();
    for f in 0..nf {
        for c in 0..nc {
            for k1 in 0..3 {
                for k2 in 0..3 {
                    let mut acc = 0.0;
                    for i in 0..o1 {
                        for j in 0..o2 {
                            acc += dout[[f, i, j]] * x[[c, i + k1, j + k2]];
                        }
                    }
                    gw[[f, c, k1, k2]] += acc;
                }
            }
        }
    }
    if let Some(dx) = dx {
        for f in 0..nf {
            for c in 0..nc {
                for k1 in 0..3 {
                    for k2 in 0..3 {
                        let wv = w[[f, c, k1, k2]];
                        for i in 0..o1 {
                            for j in 0..o2 {
                                dx[[c, i + k1, j + k2]] += wv * dout[[f, i, j]];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[f, i, j] = Σ_ν w[f, ν] m[ν, i, j]`.
fn pointwise(w: &Array2<f64>, m: &Array3<f64>) -> Array3<f64> {
    let (nv, o1, o2) = m.dim();
    let flat = m.view().into_shape_with_order((nv, o1 * o2)).expect("contiguous state");
    w.dot(&flat).into_shape_with_order((w.nrows(), o1, o2)).expect("sized")
}

/// One gate: valid 3×3 convolution on the input plus 1×1 on the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvGate {
    /// `filters × channels × 3 × 3`.
    pub wx: Array4<f64>,
    /// `filters × filters`.
    pub wh: Array2<f64>,
    pub b: Array1<f64>,
}

impl ConvGate {
    fn zeros(filters: usize, channels: usize) -> Self {
        Self {
            wx: Array4::zeros((filters, channels, 3, 3)),
            wh: Array2::zeros((filters, filters)),
            b: Array1::zeros(filters),
        }
    }

    fn pre(&self, x: &Array3<f64>, m_prev: &Array3<f64>) -> Array3<f64> {
        let mut out = conv_valid(x, &self.wx) + pointwise(&self.wh, m_prev);
        for (f, mut map) in out.outer_iter_mut().enumerate() {
            map += self.b[f];
        }
        out
    }

    fn slices_mut(&mut self) -> [(&mut [f64], bool); 3] {
        [
            (self.wx.as_slice_mut().expect("standard layout"), true),
            (self.wh.as_slice_mut().expect("standard layout"), true),
            (self.b.as_slice_mut().expect("standard layout"), false),
        ]
    }
}

/// Gates in the order forget, input, candidate, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLstmCellParams {
    pub gates: Vec<ConvGate>,
}

impl ConvLstmCellParams {
    pub fn zeros(filters: usize, channels: usize) -> Self {
        Self {
            gates: (0..4).map(|_| ConvGate::zeros(filters, channels)).collect(),
        }
    }

    pub fn init(filters: usize, channels: usize, seed: u64) -> Result<Self> {
        if filters == 0 || channels == 0 {
            return Err(config("ConvLSTM filters and channels must be positive"));
        }
        // rescale both blocks to N(0, 1 / fan_in) over the concatenated inputs
        let fan_in = (channels * 9 + filters) as f64;
        let sx = (channels as f64 * 9.0 / (2.0 * fan_in)).sqrt();
        let sh = (filters as f64 / (2.0 * fan_in)).sqrt();
        let gates = (0..4u64)
            .map(|g| {
                let wx = init_weights(filters, channels * 9, seed.wrapping_add(3 * g)).mapv(|v| v * sx);
                let wh = init_weights(filters, filters, seed.wrapping_add(3 * g + 1)).mapv(|v| v * sh);
                ConvGate {
                    wx: wx.into_shape_with_order((filters, channels, 3, 3)).expect("sized"),
                    wh,
                    b: if g == 0 { Array1::ones(filters) } else { Array1::zeros(filters) },
                }
            })
            .collect();
        Ok(Self { gates })
    }

    pub fn filters(&self) -> usize {
        self.gates[0].wx.dim().0
    }

    pub fn channels(&self) -> usize {
        self.gates[0].wx.dim().1
    }

    pub fn validate(&self) -> Result<()> {
        if self.gates.len() != 4 {
            return Err(Error::Shape {
                context: "ConvLSTM gates",
                expected: 4,
                found: self.gates.len(),
            });
        }
        let (f, c) = (self.filters(), self.channels());
        for g in &self.gates {
            if g.wx.dim() != (f, c, 3, 3) || g.wh.dim() != (f, f) || g.b.len() != f {
                return Err(Error::Shape {
                    context: "ConvLSTM gate parameters",
                    expected: f,
                    found: g.b.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvTape {
    x: Array3<f64>,
    m_prev: Array3<f64>,
    c_prev: Array3<f64>,
    acts: [Array3<f64>; 4],
    tanh_c: Array3<f64>,
}

fn conv_cell_step(x: &Array3<f64>, m_prev: &Array3<f64>, c_prev: &Array3<f64>, p: &ConvLstmCellParams) -> (Array3<f64>, Array3<f64>, ConvTape) {
    let a = p.gates[0].pre(x, m_prev).mapv(sigmoid);
    let b = p.gates[1].pre(x, m_prev).mapv(sigmoid);
    let c = p.gates[2].pre(x, m_prev).mapv(f64::tanh);
    let o = p.gates[3].pre(x, m_prev).mapv(sigmoid);
    let c_t = &a * c_prev + &b * &c;
    let tanh_c = c_t.mapv(f64::tanh);
    let m_t = &o * &tanh_c;
    let tape = ConvTape {
        x: x.clone(),
        m_prev: m_prev.clone(),
        c_prev: c_prev.clone(),
        acts: [a, b, c, o],
        tanh_c,
    };
    (m_t, c_t, tape)
}

/// One ConvLSTM step on a `channels × n × n` input; states are
/// `filters × (n-2) × (n-2)`.
pub fn convlstm_cell(frame: &Array3<f64>, m_prev: &Array3<f64>, c_prev: &Array3<f64>, params: &ConvLstmCellParams) -> Result<(Array3<f64>, Array3<f64>)> {
    params.validate()?;
    check_conv_input(frame, &params.gates[0].wx)?;
    let (_, n1, n2) = frame.dim();
    let state = (params.filters(), n1 - 2, n2 - 2);
    for (context, s) in [("ConvLSTM hidden state", m_prev), ("ConvLSTM cell state", c_prev)] {
        if s.dim() != state {
            return Err(Error::Shape {
                context,
                expected: state.0 * state.1 * state.2,
                found: s.len(),
            });
        }
    }
    let (m, c, _) = conv_cell_step(frame, m_prev, c_prev, params);
    Ok((m, c))
}

/// Returns `(dx, dm_prev, dc_prev)` and accumulates parameter gradients.
fn conv_cell_backward(
    p: &ConvLstmCellParams,
    t: &ConvTape,
    dm: &Array3<f64>,
    dc: &Array3<f64>,
    g: &mut ConvLstmCellParams,
    want_dx: bool,
) -> (Option<Array3<f64>>, Array3<f64>, Array3<f64>) {
    let [a, b, c, o] = &t.acts;
    let d_o = dm * &t.tanh_c;
    let dc_total = dc + &(dm * o * &t.tanh_c.mapv(|v| 1.0 - v * v));
    let pre = [
        &(&dc_total * &t.c_prev) * &a.mapv(|v| v * (1.0 - v)),
        &(&dc_total * c) * &b.mapv(|v| v * (1.0 - v)),
        &(&dc_total * b) * &c.mapv(|v| 1.0 - v * v),
        &d_o * &o.mapv(|v| v * (1.0 - v)),
    ];
    let dc_prev = &dc_total * a;
    let mut dx = want_dx.then(|| Array3::zeros(t.x.dim()));
    let mut dm_prev = Array3::zeros(t.m_prev.dim());
    let (nv, o1, o2) = t.m_prev.dim();
    let m_flat = t.m_prev.view().into_shape_with_order((nv, o1 * o2)).expect("contiguous");
    for (k, dpre) in pre.iter().enumerate() {
        let gate = &p.gates[k];
        let gg = &mut g.gates[k];
        for (f, map) in dpre.outer_iter().enumerate() {
            gg.b[f] += map.sum();
        }
        conv_valid_backward(&t.x, &gate.wx, dpre, &mut gg.wx, dx.as_mut());
        let d_flat = dpre.view().into_shape_with_order((dpre.dim().0, o1 * o2)).expect("contiguous");
        gg.wh += &d_flat.dot(&m_flat.t());
        let back = gate.wh.t().dot(&d_flat).into_shape_with_order((nv, o1, o2)).expect("sized");
        dm_prev += &back;
    }
    (dx, dm_prev, dc_prev)
}

/// Stacked ConvLSTM; the head flattens the last layer's final hidden maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLstmNet {
    pub cells: Vec<ConvLstmCellParams>,
    /// Side of the input frames.
    pub frame_side: usize,
    pub head_w: Array1<f64>,
    pub head_b: Array1<f64>,
}

impl ConvLstmNet {
    pub fn new(frame_side: usize, channels: usize, filters: &[usize], seed: u64) -> Result<Self> {
        if filters.is_empty() {
            return Err(config("ConvLSTM stack needs at least one layer"));
        }
        let mut side = frame_side;
        let mut ch = channels;
        let mut cells = Vec::new();
        for (l, &f) in filters.iter().enumerate() {
            if side < 3 {
                return Err(Error::Shape {
                    context: "ConvLSTM layer input side",
                    expected: 3,
                    found: side,
                });
            }
            cells.push(ConvLstmCellParams::init(f, ch, seed.wrapping_add(64 * l as u64))?);
            side -= 2;
            ch = f;
        }
        let flat = ch * side * side;
        let head_w = init_weights(1, flat, seed.wrapping_add(7_000_001)).row(0).to_owned();
        Ok(Self {
            cells,
            frame_side,
            head_w,
            head_b: Array1::zeros(1),
        })
    }

    fn state_dims(&self) -> Vec<(usize, usize, usize)> {
        let mut side = self.frame_side;
        self.cells
            .iter()
            .map(|c| {
                side -= 2;
                (c.filters(), side, side)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut side = self.frame_side;
        let mut ch = self.cells.first().map_or(0, ConvLstmCellParams::channels);
        for cell in &self.cells {
            cell.validate()?;
            if cell.channels() != ch || side < 3 {
                return Err(Error::Shape {
                    context: "stacked ConvLSTM input",
                    expected: ch,
                    found: cell.channels(),
                });
            }
            side -= 2;
            ch = cell.filters();
        }
        if self.head_w.len() != ch * side * side || self.head_b.len() != 1 {
            return Err(Error::Shape {
                context: "ConvLSTM head",
                expected: ch * side * side,
                found: self.head_w.len(),
            });
        }
        Ok(())
    }

    fn check_window(&self, window: &[Array3<f64>]) -> Result<()> {
        if window.is_empty() {
            return Err(domain("empty input window"));
        }
        let want = (self.cells[0].channels(), self.frame_side, self.frame_side);
        for x in window {
            if x.dim() != want {
                return Err(Error::Shape {
                    context: "ConvLSTM frame",
                    expected: want.0 * want.1 * want.2,
                    found: x.len(),
                });
            }
        }
        Ok(())
    }

    fn run(&self, window: &[Array3<f64>], keep: bool) -> (f64, Vec<Vec<ConvTape>>, Array3<f64>) {
        let dims = self.state_dims();
        let mut m: Vec<Array3<f64>> = dims.iter().map(|&d| Array3::zeros(d)).collect();
        let mut cs = m.clone();
        let mut tapes = vec![Vec::new(); if keep { self.cells.len() } else { 0 }];
        for x in window {
            let mut input = x.clone();
            for (l, cell) in self.cells.iter().enumerate() {
                let (m_t, c_t, tape) = conv_cell_step(&input, &m[l], &cs[l], cell);
                if keep {
                    tapes[l].push(tape);
                }
                input = m_t.clone();
                m[l] = m_t;
                cs[l] = c_t;
            }
        }
        let top = m.pop().expect("non-empty stack");
        let raw = self.head_w.iter().zip(top.iter()).map(|(w, v)| w * v).sum::<f64>() + self.head_b[0];
        (raw, tapes, top)
    }

    pub fn raw_output(&self, window: &[Array3<f64>]) -> Result<f64> {
        self.check_window(window)?;
        Ok(self.run(window, false).0)
    }

    /// BPTT through the window for a scalar `d_out = ∂L/∂raw`.
    pub fn backprop(&self, window: &[Array3<f64>], d_out: impl FnOnce(f64) -> f64) -> Result<(f64, ConvLstmNet)> {
        self.check_window(window)?;
        let (raw, tapes, top) = self.run(window, true);
        let d = d_out(raw);
        let mut g = self.zeros_like();
        g.head_w = Array1::from_iter(top.iter().map(|v| v * d));
        g.head_b[0] = d;
        let dims = self.state_dims();
        let n_layers = self.cells.len();
        let mut dm_rec: Vec<Array3<f64>> = dims.iter().map(|&dd| Array3::zeros(dd)).collect();
        let mut dc_rec = dm_rec.clone();
        dm_rec[n_layers - 1] = Array3::from_shape_vec(dims[n_layers - 1], self.head_w.iter().map(|w| w * d).collect()).expect("head matches state");
        for t in (0..window.len()).rev() {
            let mut from_above: Option<Array3<f64>> = None;
            for l in (0..n_layers).rev() {
                let mut dm = dm_rec[l].clone();
                if let Some(a) = from_above.take() {
                    dm += &a;
                }
                let (dx, dm_prev, dc_prev) = conv_cell_backward(&self.cells[l], &tapes[l][t], &dm, &dc_rec[l], &mut g.cells[l], l > 0);
                dm_rec[l] = dm_prev;
                dc_rec[l] = dc_prev;
                from_above = dx;
            }
        }
        Ok((raw, g))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cells: self.cells.iter().map(|c| ConvLstmCellParams::zeros(c.filters(), c.channels())).collect(),
            frame_side: self.frame_side,
            head_w: Array1::zeros(self.head_w.len()),
            head_b: Array1::zeros(1),
        }
    }

    fn slices_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut v = Vec::new();
        for c in &mut self.cells {
            for g in &mut c.gates {
                v.extend(g.slices_mut());
            }
        }
        v.push((self.head_w.as_slice_mut().expect("standard layout"), true));
        v.push((self.head_b.as_slice_mut().expect("standard layout"), false));
        v
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut me = self.clone();
        me.slices_mut().into_iter().flat_map(|(s, _)| s.to_vec()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let n = self.flat_params().len();
        if values.len() != n {
            return Err(Error::Shape {
                context: "flat ConvLSTM parameters",
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
}

impl SequenceNet for ConvLstmNet {
    type Input = Vec<Array3<f64>>;

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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QConvLstmConfig {
    /// Filters per stacked layer.
    pub filters: Vec<usize>,
    /// Neighbourhood side `r` (odd).
    pub r: usize,
    /// Lattice spacing; defaults to the median nearest-station distance.
    #[serde(default)]
    pub delta: Option<f64>,
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

impl Default for QConvLstmConfig {
    fn default() -> Self {
        let lstm = forecaster::QlstmConfig::default();
        Self {
            filters: vec![16],
            r: 5,
            delta: None,
            window: lstm.window,
            taus: lstm.taus,
            lambda: None,
            cross_fit_folds: lstm.cross_fit_folds,
            train: lstm.train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QConvLstmModel {
    pub window: usize,
    pub r: usize,
    pub median: ConvLstmNet,
    pub quantiles: Vec<(f64, ConvLstmNet)>,
    pub lambda: f64,
    pub scale: SeriesScale,
    pub config: QConvLstmConfig,
}

impl QConvLstmModel {
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

fn frame_tensor(frame: &Array2<f64>, scale: SeriesScale) -> Array3<f64> {
    let (r1, r2) = frame.dim();
    frame.mapv(|v| scale.apply(v)).into_shape_with_order((1, r1, r2)).expect("single channel")
}

pub fn fit_qconvlstm(neigh: &NeighborhoodSeries, cfg: &QConvLstmConfig) -> Result<QConvLstmModel> {
    neigh.validate()?;
    let r = neigh.r();
    if r != cfg.r {
        return Err(Error::Shape {
            context: "neighbourhood side",
            expected: cfg.r,
            found: r,
        });
    }
    let j = cfg.window;
    if j == 0 || neigh.frames.len() <= j {
        return Err(domain(format!(
            "{} frames are too few for window {j}",
            neigh.frames.len()
        )));
    }
    let center = neigh.center_series();
    if neigh.frames.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
        return Err(domain("frames contain non-finite values"));
    }
    let taus = quantile::normalize_taus(cfg.taus.clone())?;
    let scale = SeriesScale::fit(&center);
    let lambda = resolve_lambda(&center, cfg.lambda)?;
    let tensors: Vec<Array3<f64>> = neigh.frames.iter().map(|f| frame_tensor(f, scale)).collect();
    let inputs: Vec<Vec<Array3<f64>>> = (j..tensors.len()).map(|k| tensors[k - j..k].to_vec()).collect();
    let targets: Vec<f64> = (j..tensors.len()).map(|k| scale.apply(center[k])).collect();
    let (median, quantiles) = fit_levels(&inputs, &targets, &taus, lambda / scale.std, &cfg.train, cfg.cross_fit_folds, |seed| {
        ConvLstmNet::new(r, 1, &cfg.filters, seed)
    })?;
    Ok(QConvLstmModel {
        window: j,
        r,
        median,
        quantiles,
        lambda,
        scale,
        config: QConvLstmConfig { taus, ..cfg.clone() },
    })
}

/// `u`-step centre-cell forecasts. Each next frame repeats the last one
/// with its centre replaced by the median forecast.
pub fn forecast_conv(model: &QConvLstmModel, neigh: &NeighborhoodSeries, u: usize) -> Result<Forecast> {
    neigh.validate()?;
    let j = model.window;
    if neigh.frames.len() < j {
        return Err(domain(format!("need at least {j} frames to forecast, got {}", neigh.frames.len())));
    }
    let c = model.r / 2;
    let window: Vec<Array3<f64>> = neigh.frames[neigh.frames.len() - j..].iter().map(|f| frame_tensor(f, model.scale)).collect();
    let cell = std::cell::RefCell::new(window);
    let taus = model.taus();
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
            let mut next = w.last().expect("non-empty window").clone();
            next[[0, c, c]] = med;
            w.remove(0);
            w.push(next);
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_conv(x: &Array3<f64>, p: &ConvLayerParams) -> Array3<f64> {
        let (nc, n1, n2) = x.dim();
        let nf = p.kernels.dim().0;
        Array3::from_shape_fn((nf, n1 - 2, n2 - 2), |(f, i, j)| {
            let mut s = p.bias[f];
            for c in 0..nc {
                for k1 in 0..3 {
                    for k2 in 0..3 {
                        s += x[[c, i + k1, j + k2]] * p.kernels[[f, c, k1, k2]];
                    }
                }
            }
            s
        })
    }

    fn random_params(rng: &mut ChaCha8Rng, nf: usize, nc: usize) -> ConvLayerParams {
        ConvLayerParams {
            kernels: Array4::from_shape_simple_fn((nf, nc, 3, 3), || rng.random_range(-1.0..1.0)),
            bias: Array1::from_shape_simple_fn(nf, || rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn conv_examples() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f64);
        let mut id = ConvLayerParams {
            kernels: Array4::zeros((1, 1, 3, 3)),
            bias: Array1::zeros(1),
        };
        id.kernels[[0, 0, 1, 1]] = 1.0;
        let out = conv_forward(&x, &id).unwrap();
        assert_eq!(out.dim(), (1, 2, 2));
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(out[[0, i, j]], x[[0, i + 1, j + 1]]);
            }
        }
        let ones = ConvLayerParams {
            kernels: Array4::ones((1, 1, 3, 3)),
            bias: Array1::zeros(1),
        };
        let out = conv_forward(&Array3::ones((1, 3, 3)), &ones).unwrap();
        assert_eq!(out.dim(), (1, 1, 1));
        assert_eq!(out[[0, 0, 0]], 9.0);
        assert!(matches!(conv_forward(&Array3::ones((1, 2, 5)), &ones), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_matches_brute_force_and_translates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let n = rng.random_range(3..8);
            let nc = rng.random_range(1..3);
            let nf = rng.random_range(1..4);
            let x = Array3::from_shape_simple_fn((nc, n, n), || rng.random_range(-2.0..2.0));
            let p = random_params(&mut rng, nf, nc);
            let a = conv_forward(&x, &p).unwrap();
            let b = brute_conv(&x, &p);
            assert!(a.iter().zip(b.iter()).all(|(u, v)| (u - v).abs() < 1e-10));
        }
        let x = Array3::from_shape_fn((1, 6, 6), |(_, i, j)| ((i * 7 + j * 3) % 5) as f64);
        let shifted = Array3::from_shape_fn((1, 6, 6), |(_, i, j)| if j == 0 { 0.0 } else { x[[0, i, j - 1]] });
        let mut id = ConvLayerParams {
            kernels: Array4::zeros((1, 1, 3, 3)),
            bias: Array1::zeros(1),
        };
        id.kernels[[0, 0, 1, 1]] = 1.0;
        let (a, b) = (conv_forward(&x, &id).unwrap(), conv_forward(&shifted, &id).unwrap());
        for i in 0..4 {
            for j in 1..4 {
                assert_eq!(b[[0, i, j]], a[[0, i, j - 1]]);
            }
        }
    }

    #[test]
    fn zero_cell_and_uniform_symmetry() {
        let p = ConvLstmCellParams::zeros(2, 1);
        let x = Array3::from_elem((1, 5, 5), 3.0);
        let z = Array3::zeros((2, 3, 3));
        let (m, _) = convlstm_cell(&x, &z, &z, &p).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));

        let mut p = ConvLstmCellParams::zeros(2, 1);
        for (k, g) in p.gates.iter_mut().enumerate() {
            g.wx.fill(0.1 * (k + 1) as f64);
            g.wh.fill(-0.05);
            g.b.fill(0.2);
        }
        let mut m = Array3::zeros((2, 3, 3));
        let mut c = Array3::zeros((2, 3, 3));
        for _ in 0..3 {
            let (m2, c2) = convlstm_cell(&x, &m, &c, &p).unwrap();
            m = m2;
            c = c2;
        }
        for f in 0..2 {
            let v = m[[f, 0, 0]];
            assert!(m.index_axis(ndarray::Axis(0), f).iter().all(|&u| (u - v).abs() < 1e-15));
        }
        assert!(matches!(convlstm_cell(&x, &Array3::zeros((2, 2, 2)), &c, &p), Err(Error::Shape { .. })));
    }

    fn fd_check(net: &ConvLstmNet, window: &[Array3<f64>], target: f64) -> f64 {
        let loss = |n: &ConvLstmNet| 0.5 * (n.raw_output(window).unwrap() - target).powi(2);
        let (_, g) = net.backprop(window, |raw| raw - target).unwrap();
        let an = g.flat_params();
        let base = net.flat_params();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += eps;
            let mut plus = net.clone();
            plus.set_flat_params(&p).unwrap();
            p[k] -= 2.0 * eps;
            let mut minus = net.clone();
            minus.set_flat_params(&p).unwrap();
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            worst = worst.max((an[k] - fd).abs() / (an[k].abs() + fd.abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (side, filters, j) in [(4usize, vec![2usize], 2usize), (5, vec![2], 3), (5, vec![2, 3], 2)] {
            let net = ConvLstmNet::new(side, 1, &filters, 17).unwrap();
            let window: Vec<Array3<f64>> = (0..j).map(|_| Array3::from_shape_simple_fn((1, side, side), || rng.random_range(-1.0..1.0))).collect();
            let worst = fd_check(&net, &window, 0.3);
            assert!(worst < 1e-4, "{side}/{filters:?}: {worst}");
        }
    }

    fn constant_neigh(c: f64, n: usize) -> NeighborhoodSeries {
        NeighborhoodSeries::new(vec![Array2::from_elem((5, 5), c); n], (0..n).map(|k| k as f64).collect(), [0.5, 0.5], 0.1).unwrap()
    }

    #[test]
    fn constant_frames_forecast_constant() {
        let c = 2.5;
        let neigh = constant_neigh(c, 30);
        let cfg = QConvLstmConfig {
            filters: vec![2],
            window: 4,
            train: TrainConfig {
                learning_rate: 0.1,
                batch_size: 8,
                epochs: 200,
                validation_fraction: 0.0,
                l1l2_layers: Vec::new(),
                ..TrainConfig::default()
            },
            ..QConvLstmConfig::default()
        };
        let model = fit_qconvlstm(&neigh, &cfg).unwrap();
        let f = forecast_conv(&model, &neigh, 5).unwrap();
        let (lo, med, hi) = (f.level(0.05).unwrap(), f.median(), f.level(0.95).unwrap());
        for h in 0..5 {
            assert!((med[h] - c).abs() < 1e-2 * c + 1e-3, "{}", med[h]);
            assert!(lo[h] < med[h] && med[h] < hi[h]);
        }
        let back = QConvLstmModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(forecast_conv(&back, &neigh, 5).unwrap(), f);
    }

    #[test]
    fn neighbourhood_validation_and_dump() {
        assert!(NeighborhoodSeries::new(vec![Array2::zeros((4, 4))], vec![0.0], [0.0, 0.0], 1.0).is_err());
        let neigh = constant_neigh(1.0, 3);
        assert_eq!(neigh.center_series(), vec![1.0; 3]);
        assert_eq!(neigh.cell_location(0, 4), [0.3, 0.7]);
        let dir = tempfile::tempdir().unwrap();
        neigh.write_frames(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("frame_0002.csv")).unwrap();
        assert_eq!(text.lines().count(), 26);
        assert!(text.starts_with("a,b,s1,s2,t,value\n"));
        assert_eq!(median_nn_distance(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]).unwrap(), 1.0);
    }
}
