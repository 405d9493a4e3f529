//! Gaussian space-time fields with a nonseparable Matérn covariance,
//! optional nonstationary temporal mean, nugget noise, and hold-out
//! scenarios.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Observation, SpaceTimeDataset};
use crate::error::{config, domain, Error, Result};

/// Upper bound on `N·K` for exact Cholesky sampling.
pub const DEFAULT_CHOLESKY_CAP: usize = 5000;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Modified Bessel function of the second kind `K_ν(x)`, `ν ≥ 0`, `x > 0`.
///
/// Temme's series for `x < 2`, Steed's continued fraction otherwise, then
/// forward recurrence from `|μ| ≤ 1/2` up to `ν`.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    debug_assert!(nu >= 0.0 && x > 0.0);
    const EPS: f64 = 1e-16;
    const MAX_ITER: usize = 10_000;
    let nl = (nu + 0.5).floor() as usize;
    let mu = nu - nl as f64;
    let mu2 = mu * mu;
    let xi2 = 2.0 / x;

    let (mut k_mu, mut k_mu1) = if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = PI * mu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let gampl = 1.0 / statrs::function::gamma::gamma(1.0 + mu);
        let gammi = 1.0 / statrs::function::gamma::gamma(1.0 - mu);
        let gam1 = if mu.abs() < 1e-4 {
            // odd part of the 1/Γ(1+x) Taylor series
            -(EULER_GAMMA - 0.042_002_635_034_095_2 * mu2)
        } else {
            (gammi - gampl) / (2.0 * mu)
        };
        let gam2 = (gammi + gampl) / 2.0;
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        for i in 1..MAX_ITER {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu2);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        (sum, sum1 * xi2)
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut delh = d;
        let mut h = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..MAX_ITER {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh = (b * d - 1.0) * delh;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h *= a1;
        let k = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        (k, k * (mu + x + 0.5 - h) / x)
    };
    for i in 1..=nl {
        let next = (mu + i as f64) * xi2 * k_mu1 + k_mu;
        k_mu = k_mu1;
        k_mu1 = next;
    }
    k_mu
}

/// Matérn correlation `M_ν(d)` with the `√(2ν)` scaling, so that
/// `M_{1/2}(d) = e^{-d}` and `M_{3/2}(d) = (1 + √3 d) e^{-√3 d}`.
pub fn matern_correlation(d: f64, nu: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(domain(format!("Matérn smoothness must be > 0, got {nu}")));
    }
    if d.is_nan() || d < 0.0 {
        return Err(domain(format!("distance must be >= 0, got {d}")));
    }
    Ok(matern_unchecked(d, nu))
}

fn matern_unchecked(d: f64, nu: f64) -> f64 {
    if d == 0.0 {
        return 1.0;
    }
    if (nu - 0.5).abs() < 1e-12 {
        return (-d).exp();
    }
    if (nu - 1.5).abs() < 1e-12 {
        let r = 3f64.sqrt() * d;
        return (1.0 + r) * (-r).exp();
    }
    if (nu - 2.5).abs() < 1e-12 {
        let r = 5f64.sqrt() * d;
        return (1.0 + r + r * r / 3.0) * (-r).exp();
    }
    matern_bessel(d, nu)
}

/// General-`ν` route through `K_ν`; exposed so tests can check it against the closed forms.
pub fn matern_bessel(d: f64, nu: f64) -> f64 {
    if d == 0.0 {
        return 1.0;
    }
    let x = (2.0 * nu).sqrt() * d;
    if x > 700.0 {
        return 0.0;
    }
    let log_pref = (1.0 - nu) * 2f64.ln() - statrs::function::gamma::ln_gamma(nu);
    let v = (log_pref + nu * x.ln()).exp() * bessel_k(nu, x);
    v.clamp(0.0, 1.0)
}

/// How time stamps are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeLayout {
    /// `n` equispaced stamps on `[0, 1]`.
    Unit,
    /// Integer stamps `stride, 2·stride, …` as in the nonstationary-mean study.
    Index { stride: usize },
}

/// Parameters of the simulated field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub sigma2: f64,
    pub nu: f64,
    pub alpha: f64,
    pub a_s: f64,
    pub a_t: f64,
    pub beta: f64,
    #[serde(default)]
    pub nugget_var: f64,
    #[serde(default)]
    pub nonstationary_mean: bool,
    pub n_locations: usize,
    pub n_times: usize,
    #[serde(default = "default_layout")]
    pub time_layout: TimeLayout,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub cholesky_cap: usize,
}

fn default_layout() -> TimeLayout {
    TimeLayout::Unit
}

fn default_cap() -> usize {
    DEFAULT_CHOLESKY_CAP
}

impl SimulationSpec {
    /// Stationary field on `[0,1]² × [0,1]`.
    pub fn stationary(n_locations: usize, n_times: usize, seed: u64) -> Self {
        Self {
            sigma2: 1.0,
            nu: 1.5,
            alpha: 0.5,
            a_s: 0.2,
            a_t: 5.0,
            beta: 0.5,
            nugget_var: 0.01,
            nonstationary_mean: false,
            n_locations,
            n_times,
            time_layout: TimeLayout::Unit,
            seed,
            cholesky_cap: DEFAULT_CHOLESKY_CAP,
        }
    }

    /// 100 stations × 500 integer times with the nonstationary mean. Fields of
    /// this size exceed the exact-Cholesky cap; see [`SimulationSpec::desk_scale`].
    pub fn nonstationary_full(seed: u64) -> Self {
        Self {
            a_t: 0.25,
            nonstationary_mean: true,
            n_locations: 100,
            n_times: 500,
            time_layout: TimeLayout::Index { stride: 1 },
            cholesky_cap: 50_000,
            ..Self::stationary(100, 500, seed)
        }
    }

    /// 100 stations × 50 times sampled every 10th stamp of `1..=500`.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            n_times: 50,
            time_layout: TimeLayout::Index { stride: 10 },
            cholesky_cap: DEFAULT_CHOLESKY_CAP,
            ..Self::nonstationary_full(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(config(format!("{field}: {msg}")));
        if !(self.sigma2 > 0.0) {
            return bad("sigma2", "must be > 0");
        }
        if !(self.nu > 0.0) {
            return bad("nu", "must be > 0");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha", "must lie in (0, 1]");
        }
        if !(self.a_s > 0.0) {
            return bad("a_s", "must be > 0");
        }
        if !(self.a_t > 0.0) {
            return bad("a_t", "must be > 0");
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta", "must lie in (0, 1]");
        }
        if !(self.nugget_var >= 0.0) {
            return bad("nugget_var", "must be >= 0");
        }
        if self.n_locations == 0 || self.n_times == 0 {
            return bad("n_locations/n_times", "must be positive");
        }
        if let TimeLayout::Index { stride: 0 } = self.time_layout {
            return bad("time_layout.stride", "must be positive");
        }
        Ok(())
    }

    /// Time stamps implied by the layout.
    pub fn times(&self) -> Vec<f64> {
        match self.time_layout {
            TimeLayout::Unit if self.n_times == 1 => vec![0.0],
            TimeLayout::Unit => (0..self.n_times)
                .map(|k| k as f64 / (self.n_times - 1) as f64)
                .collect(),
            TimeLayout::Index { stride } => (1..=self.n_times).map(|k| (k * stride) as f64).collect(),
        }
    }

    /// Uniform random stations in `[0, 1]²`, reproducible from the seed.
    pub fn locations(&self) -> Vec<[f64; 2]> {
        let mut rng = stream(self.seed, 1);
        (0..self.n_locations)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
            .collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `C(h, v) = σ² / (a_t|v|^{2α} + 1) · M_ν( (h/a_s) / (a_t|v|^{2α} + 1)^{β/2} )`.
pub fn st_covariance(h: f64, v: f64, spec: &SimulationSpec) -> f64 {
    let psi = spec.a_t * v.abs().powf(2.0 * spec.alpha) + 1.0;
    let arg = (h.abs() / spec.a_s) / psi.powf(spec.beta / 2.0);
    spec.sigma2 / psi * matern_unchecked(arg, spec.nu)
}

/// `μ(t) = 2 sin[15(t/1000 − 0.9)] cos[−37(t/1000 − 0.9)⁴] + (t/1000 − 0.9)/2`.
pub fn nonstationary_mean(t: f64) -> f64 {
    let u = t / 1000.0 - 0.9;
    2.0 * (15.0 * u).sin() * (-37.0 * u.powi(4)).cos() + u / 2.0
}

/// Dense covariance over `points` (time-major rows of `(s, t)`).
pub fn covariance_matrix(points: &[([f64; 2], f64)], spec: &SimulationSpec) -> DMatrix<f64> {
    let n = points.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    let (si, ti) = points[i];
                    let (sj, tj) = points[j];
                    let h = ((si[0] - sj[0]).powi(2) + (si[1] - sj[1]).powi(2)).sqrt();
                    st_covariance(h, ti - tj, spec)
                })
                .collect()
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

/// Cholesky with jitter `1e-10·σ²`, ×10 up to `1e-6·σ²`.
pub fn jittered_cholesky(mut cov: DMatrix<f64>, sigma2: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = cov.nrows();
    if let Some(l) = cov.clone().cholesky() {
        return Ok((l.unpack(), 0.0));
    }
    let mut added = 0.0;
    let mut jitter = 1e-10 * sigma2;
    while jitter <= 1e-6 * sigma2 * (1.0 + 1e-9) {
        for i in 0..n {
            cov[(i, i)] += jitter - added;
        }
        added = jitter;
        if let Some(l) = cov.clone().cholesky() {
            return Ok((l.unpack(), jitter));
        }
        jitter *= 10.0;
    }
    let diag_min = (0..n).map(|i| cov[(i, i)]).fold(f64::INFINITY, f64::min);
    let diag_max = (0..n).map(|i| cov[(i, i)]).fold(f64::NEG_INFINITY, f64::max);
    Err(Error::Numerical(format!(
        "{n}×{n} covariance is not positive definite after jitter {:e} (diagonal range [{diag_min:e}, {diag_max:e}])",
        1e-6 * sigma2
    )))
}

/// Draws one field at every `(location, time)` pair, time-major.
pub fn simulate(spec: &SimulationSpec, locations: &[[f64; 2]], times: &[f64]) -> Result<SpaceTimeDataset> {
    spec.validate()?;
    let n = locations.len() * times.len();
    if n == 0 {
        return Err(domain("simulation needs at least one location and one time"));
    }
    if n > spec.cholesky_cap {
        return Err(config(format!(
            "field size {n} exceeds the exact-Cholesky cap {}",
            spec.cholesky_cap
        )));
    }
    let points: Vec<([f64; 2], f64)> = times
        .iter()
        .flat_map(|&t| locations.iter().map(move |&s| (s, t)))
        .collect();
    let cov = covariance_matrix(&points, spec);
    let (chol, jitter) = jittered_cholesky(cov, spec.sigma2)?;
    if jitter > 0.0 {
        log::debug!("covariance needed jitter {jitter:e}");
    }
    let mut field_rng = stream(spec.seed, 2);
    let w = DVector::from_fn(n, |_, _| field_rng.sample::<f64, _>(StandardNormal));
    let field = &chol * w;
    let mut noise_rng = stream(spec.seed, 3);
    let nugget_sd = spec.nugget_var.sqrt();
    let rows = points
        .iter()
        .zip(field.iter())
        .map(|(&(s, t), &y)| {
            let mean = if spec.nonstationary_mean { nonstationary_mean(t) } else { 0.0 };
            let eps: f64 = if nugget_sd > 0.0 {
                nugget_sd * noise_rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            Observation::new(s, t, mean + y + eps)
        })
        .collect();
    Ok(SpaceTimeDataset::new(rows))
}

/// [`simulate`] on the spec's own seeded locations and time layout.
pub fn simulate_spec(spec: &SimulationSpec) -> Result<SpaceTimeDataset> {
    spec.validate()?;
    simulate(spec, &spec.locations(), &spec.times())
}

/// Hold-out patterns for interpolation experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Random stations with all their times held out.
    Stations = 1,
    /// Random `(s, t)` cells held out.
    Cells = 2,
    /// Every station at the last 10 time stamps held out.
    LastTimes = 3,
}

impl TryFrom<u8> for Scenario {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Scenario::Stations),
            2 => Ok(Scenario::Cells),
            3 => Ok(Scenario::LastTimes),
            _ => Err(domain(format!("scenario must be 1, 2 or 3, got {v}"))),
        }
    }
}

/// Number of trailing time stamps removed by [`Scenario::LastTimes`].
pub const LAST_TIMES_HELD_OUT: usize = 10;

/// Partitions `ds` into `(train, test)`.
pub fn make_scenario(
    ds: &SpaceTimeDataset,
    scenario: Scenario,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(SpaceTimeDataset, SpaceTimeDataset)> {
    let mut rng = stream(seed, 4);
    let test_mask: Vec<bool> = match scenario {
        Scenario::Stations | Scenario::Cells => {
            if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
                return Err(domain(format!(
                    "holdout fraction must lie in (0, 1), got {holdout_fraction}"
                )));
            }
            if scenario == Scenario::Stations {
                let mut stations = ds.stations();
                let n_out = (stations.len() as f64 * holdout_fraction).round() as usize;
                stations.shuffle(&mut rng);
                let held: std::collections::HashSet<(u64, u64)> = stations[..n_out]
                    .iter()
                    .map(|s| (s[0].to_bits(), s[1].to_bits()))
                    .collect();
                ds.rows
                    .iter()
                    .map(|r| held.contains(&(r.s[0].to_bits(), r.s[1].to_bits())))
                    .collect()
            } else {
                let n_out = (ds.len() as f64 * holdout_fraction).round() as usize;
                let mut idx: Vec<usize> = (0..ds.len()).collect();
                idx.shuffle(&mut rng);
                let mut mask = vec![false; ds.len()];
                for &i in &idx[..n_out] {
                    mask[i] = true;
                }
                mask
            }
        }
        Scenario::LastTimes => {
            let times = ds.times();
            let cut = times.len().saturating_sub(LAST_TIMES_HELD_OUT);
            let threshold = times.get(cut).copied().unwrap_or(f64::INFINITY);
            ds.rows.iter().map(|r| r.t >= threshold).collect()
        }
    };
    let (test, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| test_mask[i]);
    if train.is_empty() {
        return Err(domain("hold-out leaves an empty training set"));
    }
    Ok((ds.subset(&train), ds.subset(&test)))
}
