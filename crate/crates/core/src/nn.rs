//! A small dense-network engine: batched forward pass, exact reverse-mode
//! gradients, minibatch SGD with L1/L2 penalties, and JSON checkpoints.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::quantile::{check_loss_grad, check_loss_unchecked, psi, psi_grad, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
    /// Non-crossing quantile output; needs a per-row `f_constant`.
    Psi { tau: f64, lambda: f64 },
}

impl Activation {
    #[inline]
    fn apply(self, z: f64, f_constant: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
            Activation::Psi { tau, lambda } => psi(tau, z, f_constant, lambda),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Identity => 1.0,
            Activation::Psi { tau, lambda } => psi_grad(tau, z, lambda),
        }
    }
}

/// `a = activation(W x + b)` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// `N(0, 2 / cols)` entries, reproducible from `seed`.
pub fn init_weights(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (2.0 / cols.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
}

/// Activations recorded by [`Mlp::forward`] for one backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    version: u64,
}

/// Per-layer `(∂L/∂W, ∂L/∂b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|&g| g == 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub l1: f64,
    #[serde(default)]
    pub l2: f64,
    /// Zero-based indices of the layers that receive the L1/L2 penalty.
    #[serde(default)]
    pub l1l2_layers: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of rows held out for early stopping; 0 disables.
    #[serde(default)]
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_patience() -> usize {
    20
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            epochs: 200,
            l1: 0.0,
            l2: 0.0,
            l1l2_layers: vec![0, 1],
            seed: 0,
            validation_fraction: 0.1,
            patience: default_patience(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(config(format!(
                "batch_size must be in 1..={n}, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(config("epochs must be positive"));
        }
        if self.l1 < 0.0 || self.l2 < 0.0 {
            return Err(config("l1 and l2 must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(config("validation_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Feed-forward network. `version` changes on every parameter update so a
/// cache from an older forward pass is rejected by [`Mlp::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    version: u64,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`; `hidden` applies to all but the last layer.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(config(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| DenseLayer {
                weights: init_weights(sizes[l + 1], sizes[l], seed.wrapping_add(l as u64)),
                bias: Array1::zeros(sizes[l + 1]),
                activation: if l + 1 == n { output } else { hidden },
            })
            .collect();
        Ok(Self { layers, version: 0 })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(config("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(Error::Shape {
                    context: "layer chain",
                    expected: pair[0].output_dim(),
                    found: pair[1].input_dim(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Shape {
                    context: "layer bias",
                    expected: l.output_dim(),
                    found: l.bias.len(),
                });
            }
        }
        Ok(Self { layers, version: 0 })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn set_output_activation(&mut self, activation: Activation) {
        self.version += 1;
        self.layers.last_mut().expect("nonempty").activation = activation;
    }

    fn needs_offset(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.activation, Activation::Psi { .. }))
    }

    fn run(
        &self,
        x: ArrayView2<'_, f64>,
        f_constant: Option<ArrayView1<'_, f64>>,
        mut cache: Option<&mut ForwardCache>,
        raw_output: bool,
    ) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        if let Some(f) = f_constant {
            if f.len() != x.nrows() {
                return Err(Error::Shape {
                    context: "f_constant rows",
                    expected: x.nrows(),
                    found: f.len(),
                });
            }
        } else if self.needs_offset() && !raw_output {
            return Err(config("psi output layer requires f_constant"));
        }
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights.t());
            z += &layer.bias;
            if raw_output && l == last {
                return Ok(z);
            }
            let mut out = z.clone();
            match (layer.activation, f_constant) {
                (Activation::Psi { .. }, Some(f)) => {
                    for (mut row, &fc) in out.rows_mut().into_iter().zip(f.iter()) {
                        row.mapv_inplace(|v| layer.activation.apply(v, fc));
                    }
                }
                (act, _) => out.mapv_inplace(|v| act.apply(v, 0.0)),
            }
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(std::mem::replace(&mut a, out));
                c.pre_activations.push(z);
            } else {
                a = out;
            }
        }
        Ok(a)
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        f_constant: Option<ArrayView1<'_, f64>>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
            version: self.version,
        };
        let out = self.run(x, f_constant, Some(&mut cache), false)?;
        Ok((out, cache))
    }

    pub fn predict(
        &self,
        x: ArrayView2<'_, f64>,
        f_constant: Option<ArrayView1<'_, f64>>,
    ) -> Result<Array2<f64>> {
        self.run(x, f_constant, None, false)
    }

    /// Output-layer pre-activations, i.e. the `x` fed to `Ψ(τ, x)`.
    pub fn predict_raw(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.run(x, None, None, true)
    }

    /// Single-sample convenience wrapper.
    pub fn forward_vec(&self, x: &[f64], f_constant: Option<f64>) -> Result<Vec<f64>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("contiguous");
        let f = f_constant.map(|v| Array1::from_elem(1, v));
        let out = self.predict(xv, f.as_ref().map(|a| a.view()))?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Gradients of a loss whose derivative w.r.t. the outputs is `grad_out`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<'_, f64>) -> Result<Gradients> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache {
                cache: cache.version,
                network: self.version,
            });
        }
        let mut delta = grad_out.to_owned();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[l];
            if delta.dim() != z.dim() {
                return Err(Error::Shape {
                    context: "output gradient",
                    expected: z.len(),
                    found: delta.len(),
                });
            }
            let act = layer.activation;
            delta.zip_mut_with(z, |d, &zv| *d *= act.derivative(zv));
            let gw = delta.t().dot(&cache.inputs[l]);
            let gb = delta.sum_axis(Axis(0));
            if l > 0 {
                delta = delta.dot(&layer.weights);
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// `W ← W - lr (g + 2 l2 W + l1 sign W)` on penalized layers, plain SGD elsewhere.
    pub fn sgd_step(&mut self, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Shape {
                context: "gradient layers",
                expected: self.layers.len(),
                found: grads.layers.len(),
            });
        }
        let lr = cfg.learning_rate;
        for (l, (layer, (gw, gb))) in self.layers.iter_mut().zip(&grads.layers).enumerate() {
            if gw.dim() != layer.weights.dim() || gb.len() != layer.bias.len() {
                return Err(Error::Shape {
                    context: "gradient shape",
                    expected: layer.weights.len(),
                    found: gw.len(),
                });
            }
            let penalized = cfg.l1l2_layers.contains(&l) && (cfg.l1 > 0.0 || cfg.l2 > 0.0);
            if penalized {
                let (l1, l2) = (cfg.l1, cfg.l2);
                ndarray::Zip::from(&mut layer.weights).and(gw).for_each(|w, &g| {
                    let sign = if *w > 0.0 {
                        1.0
                    } else if *w < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *w -= lr * (g + 2.0 * l2 * *w + l1 * sign);
                });
            } else {
                layer.weights.scaled_add(-lr, gw);
            }
            layer.bias.scaled_add(-lr, gb);
        }
        self.version += 1;
        Ok(())
    }

    /// `l1 Σ|W| + l2 Σ W²` over penalized layers.
    pub fn penalty(&self, cfg: &TrainConfig) -> f64 {
        self.layers
            .iter()
            .enumerate()
            .filter(|(l, _)| cfg.l1l2_layers.contains(l))
            .map(|(_, layer)| {
                layer
                    .weights
                    .iter()
                    .map(|w| cfg.l1 * w.abs() + cfg.l2 * w * w)
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Per-sample training objective on a scalar output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    Check { tau: f64 },
    Mse,
}

impl Loss {
    #[inline]
    pub fn value(self, pred: f64, target: f64) -> f64 {
        match self {
            Loss::Check { tau } => check_loss_unchecked(target - pred, tau),
            Loss::Mse => (pred - target).powi(2),
        }
    }

    #[inline]
    pub fn grad(self, pred: f64, target: f64) -> f64 {
        match self {
            Loss::Check { tau } => -check_loss_grad(target - pred, tau),
            Loss::Mse => 2.0 * (pred - target),
        }
    }

    fn tau(self) -> f64 {
        match self {
            Loss::Check { tau } => tau,
            Loss::Mse => 0.5,
        }
    }

    /// Mean loss over paired slices.
    pub fn mean(self, preds: &[f64], targets: &[f64]) -> f64 {
        let total: f64 = preds.iter().zip(targets).map(|(&p, &y)| self.value(p, y)).sum();
        total / preds.len().max(1) as f64
    }
}

/// Per-epoch trace of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss before the first update.
    pub initial_loss: f64,
    /// Mean training loss at the retained parameters.
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    /// Epoch index (1-based) whose parameters were retained; 0 = initial.
    pub best_epoch: usize,
}

/// Splits `0..n` into (train, validation) with a seeded shuffle.
pub(crate) fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((n as f64) * fraction).floor() as usize;
    if n_val == 0 || n - n_val == 0 {
        return ((0..n).collect(), Vec::new());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn select_rows(x: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Minibatch SGD on a scalar-output network.
///
/// `f_constant` is the per-row median used by a `Psi` output layer. Batches
/// are reshuffled each epoch from `cfg.seed`; with a validation split the
/// best-validation parameters are restored at the end.
pub fn train(
    net: &mut Mlp,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    f_constant: Option<ArrayView1<'_, f64>>,
    loss: Loss,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if net.output_dim() != 1 {
        return Err(Error::Shape {
            context: "trainer output",
            expected: 1,
            found: net.output_dim(),
        });
    }
    if y.len() != x.nrows() {
        return Err(Error::Shape {
            context: "training targets",
            expected: x.nrows(),
            found: y.len(),
        });
    }
    let (train_idx, val_idx) = validation_split(x.nrows(), cfg.validation_fraction, cfg.seed);
    cfg.validate(train_idx.len())?;

    let xt = select_rows(x, &train_idx);
    let yt: Array1<f64> = train_idx.iter().map(|&i| y[i]).collect();
    let ft: Option<Array1<f64>> = f_constant.map(|f| train_idx.iter().map(|&i| f[i]).collect());
    let xv = select_rows(x, &val_idx);
    let yv: Array1<f64> = val_idx.iter().map(|&i| y[i]).collect();
    let fv: Option<Array1<f64>> = f_constant.map(|f| val_idx.iter().map(|&i| f[i]).collect());

    let eval = |net: &Mlp, xs: &Array2<f64>, ys: &Array1<f64>, fs: &Option<Array1<f64>>| -> Result<f64> {
        if xs.nrows() == 0 {
            return Ok(f64::NAN);
        }
        let out = net.predict(xs.view(), fs.as_ref().map(|f| f.view()))?;
        let preds = out.column(0).to_vec();
        Ok(loss.mean(&preds, ys.as_slice().expect("contiguous")))
    };

    let initial_loss = eval(net, &xt, &yt, &ft)?;
    let use_val = !val_idx.is_empty();
    let mut best_val = if use_val { eval(net, &xv, &yv, &fv)? } else { f64::INFINITY };
    let mut best_net = net.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xt.nrows()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut validation_losses = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = xt.select(Axis(0), chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| yt[i]).collect();
            let fb: Option<Array1<f64>> = ft.as_ref().map(|f| chunk.iter().map(|&i| f[i]).collect());
            let (out, cache) = net.forward(xb.view(), fb.as_ref().map(|f| f.view()))?;
            let scale = 1.0 / chunk.len() as f64;
            let mut g = Array2::zeros((chunk.len(), 1));
            for (k, &target) in yb.iter().enumerate() {
                let p = out[[k, 0]];
                total += loss.value(p, target);
                g[[k, 0]] = loss.grad(p, target) * scale;
            }
            let grads = net.backward(&cache, g.view())?;
            net.sgd_step(&grads, cfg)?;
        }
        let epoch_loss = total / xt.nrows() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                tau: loss.tau(),
            });
        }
        epoch_losses.push(epoch_loss);

        if use_val {
            let v = eval(net, &xv, &yv, &fv)?;
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
    let final_loss = eval(net, &xt, &yt, &ft)?;
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: best_epoch,
            tau: loss.tau(),
        });
    }
    Ok(TrainReport {
        initial_loss,
        final_loss,
        epoch_losses,
        validation_losses,
        best_epoch,
    })
}

pub const CHECKPOINT_FORMAT: &str = "stdk-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    activation: Activation,
    /// Row-major `rows × cols`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    layers: Vec<LayerDoc>,
}

impl Mlp {
    pub fn to_json(&self) -> Result<String> {
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDoc {
                    rows: l.output_dim(),
                    cols: l.input_dim(),
                    activation: l.activation,
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint {} v{} (expected {} v{})",
                doc.format, doc.version, CHECKPOINT_FORMAT, CHECKPOINT_VERSION
            )));
        }
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                let weights = Array2::from_shape_vec((l.rows, l.cols), l.weights)
                    .map_err(|e| Error::Schema(format!("checkpoint weights: {e}")))?;
                Ok(DenseLayer {
                    weights,
                    bias: Array1::from(l.bias),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }
}
