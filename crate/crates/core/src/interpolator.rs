//! Space-time DeepKriging interpolation: quantile feed-forward networks on
//! the stacked basis embedding.
//!
//! The median network is fitted first on standardized targets. Every other
//! level is then fitted with a `Ψ` output layer whose `f_constant` is the
//! frozen median prediction at the same point, which makes crossing
//! quantiles impossible by construction.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisCounts, EmbeddingConfig};
use crate::dataset::{mean, variance, SpaceTimeDataset};
use crate::error::{config, Error, Result};
use crate::evaluation::kfold_indices;
use crate::nn::{self, Activation, Loss, Mlp, TrainConfig, TrainReport};
use crate::quantile::{self, find_tau, is_median, psi};

/// Objective for the median network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianObjective {
    /// Check loss at `τ = 0.5`.
    #[default]
    Check,
    /// Squared error; gives a mean rather than a median head.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolatorConfig {
    #[serde(default)]
    pub basis: BasisCounts,
    /// Hidden layer widths; a scalar output layer is appended.
    pub hidden_layers: Vec<usize>,
    pub train: TrainConfig,
    pub taus: Vec<f64>,
    /// Overrides the default `λ = (max Z - min Z) / 2`.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub median_objective: MedianObjective,
    /// With `k >= 2`, the non-median levels are fitted around out-of-fold
    /// medians from `k` extra median fits; 0 keeps the in-sample median.
    #[serde(default)]
    pub cross_fit_folds: usize,
}

/// Hidden widths `100 × 8, 50 × 4` (13 layers with the scalar output).
pub fn competition_architecture() -> Vec<usize> {
    let mut v = vec![100; 8];
    v.extend([50; 4]);
    v
}

impl Default for InterpolatorConfig {
    fn default() -> Self {
        Self {
            basis: BasisCounts::default(),
            hidden_layers: competition_architecture(),
            train: TrainConfig::default(),
            taus: vec![0.05, 0.5, 0.95],
            lambda: None,
            median_objective: MedianObjective::Check,
            cross_fit_folds: 0,
        }
    }
}

/// Fitted interpolator.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepKrigingModel {
    pub embedding: EmbeddingConfig,
    pub median: Mlp,
    /// Non-median levels, ascending.
    pub quantiles: Vec<(f64, Mlp)>,
    pub lambda: f64,
    pub sigma_range: f64,
    pub target_mean: f64,
    pub target_std: f64,
    /// Final empirical check-loss risk per level, on the original scale.
    pub training_risk: Vec<(f64, f64)>,
    /// Distinct training time stamps, ascending.
    pub train_times: Vec<f64>,
    /// Distinct training stations in first-appearance order.
    pub train_stations: Vec<[f64; 2]>,
    pub config: InterpolatorConfig,
}

/// Training traces kept apart from the model so persistence stays small.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub reports: Vec<(f64, TrainReport)>,
}

fn seed_for(base: u64, level: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(level as u64 * 7919 + 1)
}

fn layer_sizes(input: usize, hidden: &[usize]) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    sizes
}

/// Median predictions at each row from a net that never saw that row.
fn out_of_fold_median(x: &Array2<f64>, y: &Array1<f64>, sizes: &[usize], loss: Loss, cfg: &InterpolatorConfig) -> Result<Array1<f64>> {
    let folds = kfold_indices(x.nrows(), cfg.cross_fit_folds, cfg.train.seed ^ 0xc0f0_1d)?;
    let parts: Vec<Result<(Vec<usize>, Vec<f64>)>> = folds
        .par_iter()
        .enumerate()
        .map(|(k, (train, test))| {
            let mut net = Mlp::new(sizes, Activation::Relu, Activation::Identity, seed_for(cfg.train.seed, 1000 + k))?;
            let xt = x.select(Axis(0), train);
            let yt = y.select(Axis(0), train);
            nn::train(&mut net, xt.view(), yt.view(), None, loss, &cfg.train)?;
            let p = net.predict(x.select(Axis(0), test).view(), None)?;
            Ok((test.clone(), p.column(0).to_vec()))
        })
        .collect();
    let mut f = Array1::zeros(x.nrows());
    for part in parts {
        let (test, p) = part?;
        for (i, v) in test.into_iter().zip(p) {
            f[i] = v;
        }
    }
    Ok(f)
}

impl DeepKrigingModel {
    pub fn fit(ds: &SpaceTimeDataset, cfg: &InterpolatorConfig) -> Result<Self> {
        Self::fit_with_report(ds, cfg).map(|(m, _)| m)
    }

    pub fn fit_with_report(ds: &SpaceTimeDataset, cfg: &InterpolatorConfig) -> Result<(Self, FitReport)> {
        if ds.is_empty() {
            return Err(crate::error::domain("cannot fit an empty dataset"));
        }
        ds.validate()?;
        let taus = quantile::normalize_taus(cfg.taus.clone())?;
        let embedding = EmbeddingConfig::from_dataset(ds, &cfg.basis)?;
        let x = embedding.embed_dataset(ds)?;
        let z = ds.z();
        let target_mean = mean(&z);
        let sd = variance(&z).sqrt();
        let target_std = if sd > 0.0 { sd } else { 1.0 };
        let y: Array1<f64> = z.iter().map(|v| (v - target_mean) / target_std).collect();
        let sigma_range = quantile::data_range(&z);
        let lambda = match cfg.lambda {
            Some(l) if l > 0.0 => l,
            Some(l) => return Err(config(format!("lambda must be positive, got {l}"))),
            None => quantile::default_lambda(&z),
        };

        let sizes = layer_sizes(embedding.dim(), &cfg.hidden_layers);
        let mut median = Mlp::new(&sizes, Activation::Relu, Activation::Identity, seed_for(cfg.train.seed, 0))?;
        let median_loss = match cfg.median_objective {
            MedianObjective::Check => Loss::Check { tau: 0.5 },
            MedianObjective::Mse => Loss::Mse,
        };
        let median_report = nn::train(&mut median, x.view(), y.view(), None, median_loss, &cfg.train)?;
        let f_std: Array1<f64> = if cfg.cross_fit_folds >= 2 {
            out_of_fold_median(&x, &y, &sizes, median_loss, cfg)?
        } else {
            median.predict(x.view(), None)?.column(0).to_owned()
        };

        let others: Vec<(usize, f64)> = taus.iter().copied().enumerate().filter(|(_, t)| !is_median(*t)).collect();
        let lambda_std = lambda / target_std;
        // same split and batch order as the median; only the init differs
        let fitted: Vec<Result<(f64, Mlp, TrainReport)>> = others
            .par_iter()
            .map(|&(k, tau)| {
                let out = Activation::Psi { tau, lambda: lambda_std };
                let mut net = Mlp::new(&sizes, Activation::Relu, out, seed_for(cfg.train.seed, k + 1))?;
                let report = nn::train(&mut net, x.view(), y.view(), Some(f_std.view()), Loss::Check { tau }, &cfg.train)
                    .map_err(|e| match e {
                        Error::TrainingDiverged { epoch, .. } => Error::TrainingDiverged { epoch, tau },
                        other => other,
                    })?;
                Ok((tau, net, report))
            })
            .collect();

        let mut quantiles = Vec::new();
        let mut reports = vec![(0.5, median_report)];
        for r in fitted {
            let (tau, net, report) = r?;
            quantiles.push((tau, net));
            reports.push((tau, report));
        }
        let mut model = Self {
            embedding,
            median,
            quantiles,
            lambda,
            sigma_range,
            target_mean,
            target_std,
            training_risk: Vec::new(),
            train_times: ds.times(),
            train_stations: ds.stations(),
            config: InterpolatorConfig {
                taus: taus.clone(),
                ..cfg.clone()
            },
        };
        for &tau in &taus {
            let pred = model.predict_embedded(&x, tau)?;
            model.training_risk.push((tau, quantile::empirical_risk(&pred, &z, tau)?));
        }
        Ok((model, FitReport { reports }))
    }

    pub fn taus(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.quantiles.iter().map(|(t, _)| *t).collect();
        t.push(0.5);
        t.sort_by(f64::total_cmp);
        t
    }

    fn median_original(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        let out = self.median.predict(x.view(), None)?;
        Ok(out.column(0).iter().map(|v| self.target_mean + self.target_std * v).collect())
    }

    /// Predictions at level `tau` for pre-embedded rows.
    pub fn predict_embedded(&self, x: &Array2<f64>, tau: f64) -> Result<Vec<f64>> {
        let med = self.median_original(x)?;
        if is_median(tau) {
            return Ok(med);
        }
        let net = find_tau(&self.quantiles, tau).ok_or(Error::MissingQuantile(tau))?;
        let raw = net.predict_raw(x.view())?;
        Ok(raw
            .column(0)
            .iter()
            .zip(&med)
            .map(|(&r, &f)| psi(tau, r, f, self.lambda))
            .collect())
    }

    pub fn predict_points(&self, points: &[([f64; 2], f64)], tau: f64) -> Result<Vec<f64>> {
        self.predict_at(points, None, tau)
    }

    /// Predictions at raw coordinates with optional per-point covariates.
    pub fn predict_at(&self, points: &[([f64; 2], f64)], covariates: Option<&[Vec<f64>]>, tau: f64) -> Result<Vec<f64>> {
        if covariates.is_none() && self.embedding.n_covariates > 0 {
            return Err(Error::Shape {
                context: "query covariates",
                expected: self.embedding.n_covariates,
                found: 0,
            });
        }
        let x = self.embedding.embed_points(points, covariates)?;
        self.predict_embedded(&x, tau)
    }

    /// Predictions at every row of `ds`, using its covariates.
    pub fn predict_dataset(&self, ds: &SpaceTimeDataset, tau: f64) -> Result<Vec<f64>> {
        let x = self.embedding.embed_dataset(ds)?;
        self.predict_embedded(&x, tau)
    }

    pub fn predict(&self, s: [f64; 2], t: f64, tau: f64) -> Result<f64> {
        Ok(self.predict_points(&[(s, t)], tau)?[0])
    }

    /// `100(1-α)%` interval from the `α/2` and `1-α/2` networks.
    pub fn interval(&self, s: [f64; 2], t: f64, alpha: f64) -> Result<(f64, f64)> {
        let (lo, hi) = self.intervals(&[(s, t)], alpha)?;
        Ok((lo[0], hi[0]))
    }

    pub fn intervals(&self, points: &[([f64; 2], f64)], alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (tl, tu) = quantile::interval_levels(alpha)?;
        for t in [tl, tu] {
            if find_tau(&self.quantiles, t).is_none() {
                return Err(Error::MissingQuantile(t));
            }
        }
        Ok((self.predict_points(points, tl)?, self.predict_points(points, tu)?))
    }

    /// Median interpolation at `s0` for each of `times`.
    pub fn interpolate_series(&self, s0: [f64; 2], times: &[f64]) -> Result<Vec<f64>> {
        let pts: Vec<_> = times.iter().map(|&t| (s0, t)).collect();
        self.predict_points(&pts, 0.5)
    }
}

pub const MODEL_FORMAT: &str = "stdk-interpolator";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    taus: Vec<f64>,
    lambda: f64,
    sigma_range: f64,
    target_mean: f64,
    target_std: f64,
    rescale: crate::basis::Rescale,
    training_risk: Vec<(f64, f64)>,
    seed: u64,
    train_times: Vec<f64>,
    #[serde(default)]
    train_stations: Vec<[f64; 2]>,
    config: InterpolatorConfig,
    checkpoints: Vec<(f64, String)>,
}

fn checkpoint_name(tau: f64) -> String {
    format!("net_tau_{tau}.json")
}

impl DeepKrigingModel {
    /// Writes `embedding.json`, `manifest.json` and one checkpoint per level.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("embedding.json"), serde_json::to_string_pretty(&self.embedding)?)?;
        let mut checkpoints = vec![(0.5, checkpoint_name(0.5))];
        std::fs::write(dir.join(checkpoint_name(0.5)), self.median.to_json()?)?;
        for (tau, net) in &self.quantiles {
            std::fs::write(dir.join(checkpoint_name(*tau)), net.to_json()?)?;
            checkpoints.push((*tau, checkpoint_name(*tau)));
        }
        let manifest = Manifest {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            taus: self.taus(),
            lambda: self.lambda,
            sigma_range: self.sigma_range,
            target_mean: self.target_mean,
            target_std: self.target_std,
            rescale: self.embedding.rescale,
            training_risk: self.training_risk.clone(),
            seed: self.config.train.seed,
            train_times: self.train_times.clone(),
            train_stations: self.train_stations.clone(),
            config: self.config.clone(),
            checkpoints,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::NotFound(manifest_path));
        }
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        if manifest.format != MODEL_FORMAT || manifest.version != MODEL_VERSION {
            return Err(Error::Schema(format!(
                "unsupported model {} v{}",
                manifest.format, manifest.version
            )));
        }
        let embedding: EmbeddingConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("embedding.json"))?)?;
        let mut median = None;
        let mut quantiles = Vec::new();
        for (tau, file) in &manifest.checkpoints {
            let path = dir.join(file);
            if !path.exists() {
                return Err(Error::NotFound(path));
            }
            let net = Mlp::from_json(&std::fs::read_to_string(&path)?)?;
            if net.input_dim() != embedding.dim() {
                return Err(Error::Shape {
                    context: "checkpoint input",
                    expected: embedding.dim(),
                    found: net.input_dim(),
                });
            }
            if is_median(*tau) {
                median = Some(net);
            } else {
                quantiles.push((*tau, net));
            }
        }
        quantiles.sort_by(|a, b| a.0.total_cmp(&b.0));
        let median = median.ok_or(Error::MissingQuantile(0.5))?;
        Ok(Self {
            embedding,
            median,
            quantiles,
            lambda: manifest.lambda,
            sigma_range: manifest.sigma_range,
            target_mean: manifest.target_mean,
            target_std: manifest.target_std,
            training_risk: manifest.training_risk,
            train_times: manifest.train_times,
            train_stations: manifest.train_stations,
            config: manifest.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Observation;
    use crate::simulator::{simulate_spec, SimulationSpec};

    fn quick_config(taus: Vec<f64>) -> InterpolatorConfig {
        InterpolatorConfig {
            basis: BasisCounts {
                spatial: vec![16, 36],
                temporal: vec![5, 9],
            },
            hidden_layers: vec![32, 32],
            train: TrainConfig {
                learning_rate: 0.05,
                batch_size: 32,
                epochs: 150,
                validation_fraction: 0.1,
                seed: 3,
                ..TrainConfig::default()
            },
            taus,
            lambda: None,
            median_objective: MedianObjective::Check,
            cross_fit_folds: 0,
        }
    }

    fn field(n_st: usize, n_t: usize, f: impl Fn([f64; 2], f64) -> f64) -> SpaceTimeDataset {
        let spec = SimulationSpec::stationary(n_st, n_t, 11);
        let locs = spec.locations();
        let times = spec.times();
        let rows = times
            .iter()
            .flat_map(|&t| locs.iter().map(move |&s| (s, t)))
            .map(|(s, t)| Observation::new(s, t, f(s, t)))
            .collect();
        SpaceTimeDataset::new(rows)
    }

    #[test]
    fn default_architecture_shape() {
        let arch = competition_architecture();
        assert_eq!(arch.len() + 1, 13);
        assert_eq!(&arch[..8], &[100; 8]);
        assert_eq!(&arch[8..], &[50; 4]);
    }

    #[test]
    fn constant_field_is_recovered() {
        let c = 4.2;
        let ds = field(20, 10, |_, _| c);
        let model = DeepKrigingModel::fit(&ds, &quick_config(vec![0.5])).unwrap();
        for r in ds.rows.iter().take(50) {
            let p = model.predict(r.s, r.t, 0.5).unwrap();
            assert!((p - c).abs() < c.abs() * 1e-2 + 1e-3, "{p}");
        }
    }

    #[test]
    fn smooth_field_generalizes() {
        let f = |s: [f64; 2], t: f64| (2.0 * std::f64::consts::PI * s[0]).sin() * (2.0 * std::f64::consts::PI * t).cos();
        let ds = field(100, 25, f);
        let (train, test) = crate::simulator::make_scenario(&ds, crate::simulator::Scenario::Cells, 0.2, 1).unwrap();
        let mut cfg = quick_config(vec![0.5]);
        cfg.train.epochs = 300;
        cfg.median_objective = MedianObjective::Check;
        let model = DeepKrigingModel::fit(&train, &cfg).unwrap();
        let pred = model.predict_dataset(&test, 0.5).unwrap();
        let (m, _) = crate::evaluation::mspe(&pred, &test.z()).unwrap();
        let var = test.variance();
        assert!(m < 0.05 * var, "mspe {m} var {var}");
    }

    #[test]
    fn quantiles_never_cross_and_respect_width_bound() {
        let spec = SimulationSpec::stationary(30, 10, 2);
        let ds = simulate_spec(&spec).unwrap();
        let model = DeepKrigingModel::fit(&ds, &quick_config(vec![0.05, 0.5, 0.95])).unwrap();
        let queries: Vec<_> = (0..200)
            .map(|i| ([(i % 20) as f64 / 19.0, (i / 20) as f64 / 9.0], (i % 7) as f64 / 6.0))
            .collect();
        let lo = model.predict_points(&queries, 0.05).unwrap();
        let med = model.predict_points(&queries, 0.5).unwrap();
        let hi = model.predict_points(&queries, 0.95).unwrap();
        for i in 0..queries.len() {
            assert!(lo[i] < med[i] && med[i] < hi[i]);
            assert!(hi[i] - lo[i] <= model.lambda * 0.9 + 1e-12);
        }
        let (l, h) = model.interval(queries[3].0, queries[3].1, 0.1).unwrap();
        assert_eq!((l, h), (lo[3], hi[3]));
        assert!(matches!(model.predict(queries[0].0, 0.0, 0.25), Err(Error::MissingQuantile(_))));
        assert!(matches!(model.interval(queries[0].0, 0.0, 0.2), Err(Error::MissingQuantile(_))));
        // continuity in t: a small step in time is a small step in prediction
        let s = [0.4, 0.6];
        let a = model.predict(s, 0.5, 0.5).unwrap();
        let b = model.predict(s, 0.5 + 1e-6, 0.5).unwrap();
        assert!((a - b).abs() < 1e-3);
    }

    #[test]
    fn series_matches_pointwise_predictions() {
        let spec = SimulationSpec::stationary(15, 8, 4);
        let ds = simulate_spec(&spec).unwrap();
        let model = DeepKrigingModel::fit(&ds, &quick_config(vec![0.5])).unwrap();
        let times = ds.times();
        let s0 = ds.stations()[0];
        let series = model.interpolate_series(s0, &times).unwrap();
        assert_eq!(series.len(), times.len());
        for (k, &t) in times.iter().enumerate() {
            assert_eq!(series[k], model.predict(s0, t, 0.5).unwrap());
        }
    }

    #[test]
    fn cross_fitted_levels_keep_the_median_and_widen() {
        let ds = simulate_spec(&SimulationSpec::stationary(30, 10, 6)).unwrap();
        let plain = DeepKrigingModel::fit(&ds, &quick_config(vec![0.05, 0.5, 0.95])).unwrap();
        let mut cfg = quick_config(vec![0.05, 0.5, 0.95]);
        cfg.cross_fit_folds = 4;
        let crossed = DeepKrigingModel::fit(&ds, &cfg).unwrap();
        assert_eq!(plain.predict_dataset(&ds, 0.5).unwrap(), crossed.predict_dataset(&ds, 0.5).unwrap());
        let width = |m: &DeepKrigingModel| {
            let (lo, hi) = m.intervals(&ds.rows.iter().map(|r| (r.s, r.t)).collect::<Vec<_>>(), 0.1).unwrap();
            lo.iter().zip(&hi).map(|(l, h)| h - l).sum::<f64>() / lo.len() as f64
        };
        assert!(width(&crossed) > width(&plain), "{} vs {}", width(&crossed), width(&plain));
        let again = DeepKrigingModel::fit(&ds, &cfg).unwrap();
        assert_eq!(crossed.predict_dataset(&ds, 0.95).unwrap(), again.predict_dataset(&ds, 0.95).unwrap());
    }

    #[test]
    fn median_is_required() {
        let ds = field(5, 3, |_, _| 1.0);
        assert!(DeepKrigingModel::fit(&ds, &quick_config(vec![0.05, 0.95])).is_err());
    }

    #[test]
    fn save_load_reproduces_predictions_bitwise() {
        let spec = SimulationSpec::stationary(12, 6, 8);
        let ds = simulate_spec(&spec).unwrap();
        let mut cfg = quick_config(vec![0.05, 0.5, 0.95]);
        cfg.train.epochs = 20;
        let model = DeepKrigingModel::fit(&ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = DeepKrigingModel::load(dir.path()).unwrap();
        for tau in [0.05, 0.5, 0.95] {
            let a = model.predict_dataset(&ds, tau).unwrap();
            let b = back.predict_dataset(&ds, tau).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(matches!(
            DeepKrigingModel::load(dir.path().join("missing")),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn refit_is_bitwise_reproducible() {
        let spec = SimulationSpec::stationary(10, 5, 1);
        let ds = simulate_spec(&spec).unwrap();
        let mut cfg = quick_config(vec![0.05, 0.5, 0.95]);
        cfg.train.epochs = 10;
        let a = DeepKrigingModel::fit(&ds, &cfg).unwrap();
        let b = DeepKrigingModel::fit(&ds, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
