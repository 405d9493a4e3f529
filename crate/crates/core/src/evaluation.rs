//! Prediction metrics, k-fold splits and an inverse-distance-weighting baseline.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::Rescale;
use crate::dataset::SpaceTimeDataset;
use crate::error::{domain, Error, Result};

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean squared prediction error and the standard error of the per-point squared errors.
pub fn mspe(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(domain(format!(
            "mspe needs equal nonempty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let sq: Vec<f64> = pred.iter().zip(truth).map(|(p, y)| (p - y).powi(2)).collect();
    Ok(mean_and_se(&sq))
}

/// Mean interval width and the fraction of `truth` inside `[lo, hi]`.
pub fn mpiw_cov(lo: &[f64], hi: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    let (m, _, c) = interval_stats(lo, hi, truth)?;
    Ok((m, c))
}

/// `(mpiw, mpiw standard error, coverage)`.
pub fn interval_stats(lo: &[f64], hi: &[f64], truth: &[f64]) -> Result<(f64, f64, f64)> {
    if lo.is_empty() || lo.len() != hi.len() || lo.len() != truth.len() {
        return Err(domain("interval metrics need equal nonempty inputs"));
    }
    if let Some(i) = lo.iter().zip(hi).position(|(l, h)| l > h) {
        return Err(Error::InvariantViolation(format!(
            "crossing interval at index {i}: lo {} > hi {}",
            lo[i], hi[i]
        )));
    }
    let widths: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| h - l).collect();
    let (mpiw, se) = mean_and_se(&widths);
    let covered = lo
        .iter()
        .zip(hi)
        .zip(truth)
        .filter(|((l, h), y)| *l <= *y && *y <= *h)
        .count();
    Ok((mpiw, se, covered as f64 / truth.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_test: usize,
    pub mspe: f64,
    pub mpiw: Option<f64>,
    pub coverage: Option<f64>,
}

/// Pooled metrics over all test points plus a per-fold breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mspe: f64,
    /// Standard error over per-point squared errors.
    pub mspe_se: f64,
    /// Standard error of the per-fold MSPE values (0 with a single fold).
    pub mspe_fold_se: f64,
    pub mpiw: Option<f64>,
    pub mpiw_se: Option<f64>,
    pub coverage: Option<f64>,
    pub n_test: usize,
    pub folds: Vec<FoldReport>,
}

/// Predictions for one fold; `interval` holds `(lo, hi)` when available.
#[derive(Debug, Clone, Default)]
pub struct FoldPredictions {
    pub point: Vec<f64>,
    pub interval: Option<(Vec<f64>, Vec<f64>)>,
    pub truth: Vec<f64>,
}

impl EvalReport {
    pub fn from_folds(folds: &[FoldPredictions]) -> Result<Self> {
        if folds.is_empty() {
            return Err(domain("no folds to evaluate"));
        }
        let mut point = Vec::new();
        let mut truth = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let with_intervals = folds.iter().all(|f| f.interval.is_some());
        let mut fold_reports = Vec::new();
        for (k, f) in folds.iter().enumerate() {
            let (fm, _) = mspe(&f.point, &f.truth)?;
            let (mpiw, coverage) = match &f.interval {
                Some((l, h)) if with_intervals => {
                    let (m, c) = mpiw_cov(l, h, &f.truth)?;
                    lo.extend_from_slice(l);
                    hi.extend_from_slice(h);
                    (Some(m), Some(c))
                }
                _ => (None, None),
            };
            point.extend_from_slice(&f.point);
            truth.extend_from_slice(&f.truth);
            fold_reports.push(FoldReport {
                fold: k,
                n_test: f.truth.len(),
                mspe: fm,
                mpiw,
                coverage,
            });
        }
        let (m, se) = mspe(&point, &truth)?;
        let fold_mspes: Vec<f64> = fold_reports.iter().map(|f| f.mspe).collect();
        let (_, fold_se) = mean_and_se(&fold_mspes);
        let (mpiw, mpiw_se, coverage) = if with_intervals {
            let (a, b, c) = interval_stats(&lo, &hi, &truth)?;
            (Some(a), Some(b), Some(c))
        } else {
            (None, None, None)
        };
        Ok(Self {
            mspe: m,
            mspe_se: se,
            mspe_fold_se: fold_se,
            mpiw,
            mpiw_se,
            coverage,
            n_test: truth.len(),
            folds: fold_reports,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One header row and one value row; missing interval metrics are empty cells.
    pub fn write_csv_row(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["mspe", "mspe_se", "mspe_fold_se", "mpiw", "mpiw_se", "coverage", "n_test"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            self.mspe.to_string(),
            self.mspe_se.to_string(),
            self.mspe_fold_se.to_string(),
            opt(self.mpiw),
            opt(self.mpiw_se),
            opt(self.coverage),
            self.n_test.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// `k` disjoint test folds covering `0..n`, seeded shuffle; sizes differ by at most one.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(domain(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(domain(format!("k = {k} exceeds sample size {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let test: Vec<usize> = idx[start..start + size].to_vec();
        let train: Vec<usize> = idx[..start].iter().chain(&idx[start + size..]).copied().collect();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}

pub fn kfold(ds: &SpaceTimeDataset, k: usize, seed: u64) -> Result<Vec<(SpaceTimeDataset, SpaceTimeDataset)>> {
    Ok(kfold_indices(ds.len(), k, seed)?
        .into_iter()
        .map(|(train, test)| (ds.subset(&train), ds.subset(&test)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdwConfig {
    pub power: f64,
    pub k_neighbors: usize,
    /// Multiplier on the rescaled time difference.
    pub time_scale: f64,
}

impl Default for IdwConfig {
    fn default() -> Self {
        Self {
            power: 2.0,
            k_neighbors: 10,
            time_scale: 1.0,
        }
    }
}

/// Inverse-distance weighting in rescaled space-time coordinates.
#[derive(Debug, Clone)]
pub struct Idw {
    rescale: Rescale,
    points: Vec<[f64; 3]>,
    values: Vec<f64>,
    config: IdwConfig,
}

impl Idw {
    pub fn new(train: &SpaceTimeDataset, config: IdwConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(domain("IDW needs a nonempty training set"));
        }
        if config.k_neighbors == 0 {
            return Err(domain("IDW needs k_neighbors >= 1"));
        }
        let rescale = Rescale::fit(train);
        let points = train
            .rows
            .iter()
            .map(|r| {
                let (u, v) = rescale.apply(r.s, r.t);
                [u[0], u[1], v * config.time_scale]
            })
            .collect();
        Ok(Self {
            rescale,
            points,
            values: train.z(),
            config,
        })
    }

    pub fn predict(&self, s: [f64; 2], t: f64) -> f64 {
        let (u, v) = self.rescale.apply(s, t);
        let q = [u[0], u[1], v * self.config.time_scale];
        let mut d2: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), i))
            .collect();
        let exact: Vec<f64> = d2.iter().filter(|(d, _)| *d == 0.0).map(|&(_, i)| self.values[i]).collect();
        if !exact.is_empty() {
            return exact.iter().sum::<f64>() / exact.len() as f64;
        }
        let k = self.config.k_neighbors.min(d2.len());
        if k < d2.len() {
            d2.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
        }
        let half_power = self.config.power / 2.0;
        let (num, den) = d2[..k].iter().fold((0.0, 0.0), |(n, d), &(dist2, i)| {
            let w = dist2.powf(-half_power);
            (n + w * self.values[i], d + w)
        });
        num / den
    }
}

pub fn idw_predict(train: &SpaceTimeDataset, s: [f64; 2], t: f64, config: IdwConfig) -> Result<f64> {
    Ok(Idw::new(train, config)?.predict(s, t))
}
