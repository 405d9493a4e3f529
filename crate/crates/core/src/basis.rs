//! Multi-resolution basis embedding of space-time coordinates.
//!
//! Spatial features are compactly supported Wendland functions centred on
//! square anchor grids; temporal features are Gaussian kernels on
//! equispaced anchors. The two families are stacked, so the embedding
//! length is `ΣG_r + ΣH_r` (plus any covariates), not their product.
//!
//! All anchors live in the unit square / unit interval. Raw coordinates are
//! mapped there by [`Rescale`], which is stored with every trained model.

use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::SpaceTimeDataset;
use crate::error::{config, domain, Error, Result};

/// Bandwidth multiplier applied to the anchor spacing.
pub const BANDWIDTH_FACTOR: f64 = 2.5;

/// Fraction of the training range a query may lie outside before a warning.
pub const EXTRAPOLATION_MARGIN: f64 = 0.05;

/// Wendland `B_1(d) = (1-d)^6/3 (35d² + 18d + 3)` on `[0, 1]`, zero beyond.
pub fn wendland(d: f64) -> Result<f64> {
    if d.is_nan() || d < 0.0 {
        return Err(domain(format!("wendland distance must be >= 0, got {d}")));
    }
    Ok(wendland_unchecked(d))
}

#[inline]
fn wendland_unchecked(d: f64) -> f64 {
    if d > 1.0 {
        return 0.0;
    }
    let one_minus = 1.0 - d;
    one_minus.powi(6) / 3.0 * (35.0 * d * d + 18.0 * d + 3.0)
}

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainBounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl DomainBounds {
    pub const UNIT: DomainBounds = DomainBounds {
        min: [0.0, 0.0],
        max: [1.0, 1.0],
    };
}

/// One resolution of spatial anchors: a `g × g` grid and its bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialResolution {
    pub grid_side: usize,
    pub anchors: Vec<[f64; 2]>,
    pub theta: f64,
}

impl SpatialResolution {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn eval_into(&self, s: [f64; 2], out: &mut [f64]) {
        for (o, u) in out.iter_mut().zip(&self.anchors) {
            let dx = s[0] - u[0];
            let dy = s[1] - u[1];
            *o = wendland_unchecked((dx * dx + dy * dy).sqrt() / self.theta);
        }
    }

    /// `φ_i(s)` for every anchor of this resolution.
    pub fn eval(&self, s: [f64; 2]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(s, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAnchorSet {
    pub resolutions: Vec<SpatialResolution>,
}

impl SpatialAnchorSet {
    pub fn len(&self) -> usize {
        self.resolutions.iter().map(SpatialResolution::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect()
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

fn grid_resolution(bounds: &DomainBounds, side: usize) -> SpatialResolution {
    let xs = linspace(bounds.min[0], bounds.max[0], side);
    let ys = linspace(bounds.min[1], bounds.max[1], side);
    let mut anchors = Vec::with_capacity(side * side);
    for &y in &ys {
        for &x in &xs {
            anchors.push([x, y]);
        }
    }
    let dx = (bounds.max[0] - bounds.min[0]) / (side - 1) as f64;
    let dy = (bounds.max[1] - bounds.min[1]) / (side - 1) as f64;
    SpatialResolution {
        grid_side: side,
        anchors,
        theta: BANDWIDTH_FACTOR * dx.max(dy),
    }
}

/// Builds one square anchor grid per entry of `counts` (each a perfect square ≥ 4).
///
/// Grids are corner-inclusive and the bandwidth is 2.5 × the anchor spacing.
/// On a non-square domain the larger axis spacing is used.
pub fn make_spatial_anchors(bounds: &DomainBounds, counts: &[usize]) -> Result<SpatialAnchorSet> {
    if !(bounds.max[0] > bounds.min[0] && bounds.max[1] > bounds.min[1]) {
        return Err(config(format!("degenerate spatial bounds {bounds:?}")));
    }
    let resolutions = counts
        .iter()
        .map(|&g| match exact_sqrt(g) {
            Some(side) if side >= 2 => Ok(grid_resolution(bounds, side)),
            _ => Err(config(format!(
                "spatial anchor count {g} is not a perfect square >= 4"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpatialAnchorSet { resolutions })
}

/// Equispaced temporal anchors with Gaussian scale `κ = |v_1 - v_2|`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAnchorSet {
    pub anchors: Vec<f64>,
    pub kappa: f64,
}

impl TemporalAnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn eval_into(&self, t: f64, out: &mut [f64]) {
        let inv = 1.0 / (self.kappa * self.kappa);
        for (o, v) in out.iter_mut().zip(&self.anchors) {
            let d = t - v;
            *o = (-0.5 * d * d * inv).exp();
        }
    }
}

/// `h ≥ 2` equispaced anchors over `[lo, hi]`.
pub fn make_temporal_anchors(lo: f64, hi: f64, h: usize) -> Result<TemporalAnchorSet> {
    if h < 2 {
        return Err(config(format!("temporal anchor count must be >= 2, got {h}")));
    }
    if !(hi > lo) {
        return Err(config(format!("degenerate temporal range [{lo}, {hi}]")));
    }
    let anchors = linspace(lo, hi, h);
    let kappa = (anchors[1] - anchors[0]).abs();
    Ok(TemporalAnchorSet { anchors, kappa })
}

/// `ψ_j(t) = exp(-0.5 (t - v_j)² / κ²)` for every anchor.
pub fn temporal_basis(t: f64, anchors: &TemporalAnchorSet) -> Vec<f64> {
    let mut out = vec![0.0; anchors.len()];
    anchors.eval_into(t, &mut out);
    out
}

/// Stacked basis features (and covariates) for one space-time point.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn embed_into(
    s: [f64; 2],
    t: f64,
    spatial: &SpatialAnchorSet,
    temporal: &[TemporalAnchorSet],
    covariates: &[f64],
    out: &mut [f64],
) {
    let mut offset = 0;
    for res in &spatial.resolutions {
        res.eval_into(s, &mut out[offset..offset + res.len()]);
        offset += res.len();
    }
    for res in temporal {
        res.eval_into(t, &mut out[offset..offset + res.len()]);
        offset += res.len();
    }
    out[offset..].copy_from_slice(covariates);
}

/// Embeds an already-rescaled point: spatial blocks coarse→fine, then
/// temporal blocks, then covariates.
pub fn embed(
    s: [f64; 2],
    t: f64,
    spatial: &SpatialAnchorSet,
    temporal: &[TemporalAnchorSet],
    covariates: Option<&[f64]>,
    expected_covariates: usize,
) -> Result<EmbeddingVector> {
    let cov = covariates.unwrap_or(&[]);
    if cov.len() != expected_covariates {
        return Err(Error::Shape {
            context: "embedding covariates",
            expected: expected_covariates,
            found: cov.len(),
        });
    }
    let h: usize = temporal.iter().map(TemporalAnchorSet::len).sum();
    let mut out = vec![0.0; spatial.len() + h + cov.len()];
    embed_into(s, t, spatial, temporal, cov, &mut out);
    Ok(EmbeddingVector(out))
}

/// Affine map of one axis onto `[0, 1]`. A zero-width range maps to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisScale {
    pub min: f64,
    pub max: f64,
}

impl AxisScale {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let (min, max) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        Self { min, max }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.max > self.min)
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            (x - self.min) / (self.max - self.min)
        }
    }

    pub fn invert(&self, u: f64) -> f64 {
        self.min + u * (self.max - self.min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rescale {
    pub s1: AxisScale,
    pub s2: AxisScale,
    pub t: AxisScale,
}

impl Rescale {
    pub const IDENTITY: Rescale = Rescale {
        s1: AxisScale { min: 0.0, max: 1.0 },
        s2: AxisScale { min: 0.0, max: 1.0 },
        t: AxisScale { min: 0.0, max: 1.0 },
    };

    pub fn fit(ds: &SpaceTimeDataset) -> Self {
        Self {
            s1: AxisScale::fit(ds.rows.iter().map(|r| r.s[0])),
            s2: AxisScale::fit(ds.rows.iter().map(|r| r.s[1])),
            t: AxisScale::fit(ds.rows.iter().map(|r| r.t)),
        }
    }

    pub fn apply(&self, s: [f64; 2], t: f64) -> ([f64; 2], f64) {
        ([self.s1.apply(s[0]), self.s2.apply(s[1])], self.t.apply(t))
    }

    /// True when a rescaled coordinate lies more than 5% outside `[0, 1]`.
    pub fn is_extrapolation(&self, s: [f64; 2], t: f64) -> bool {
        let (u, v) = self.apply(s, t);
        let out = |x: f64| !(-EXTRAPOLATION_MARGIN..=1.0 + EXTRAPOLATION_MARGIN).contains(&x);
        out(u[0]) || out(u[1]) || out(v)
    }
}

static EXTRAPOLATION_WARNED: AtomicBool = AtomicBool::new(false);

/// Resolution counts used to build an [`EmbeddingConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisCounts {
    /// `G_r` per spatial resolution; each a perfect square.
    pub spatial: Vec<usize>,
    /// `H_r` per temporal resolution.
    pub temporal: Vec<usize>,
}

impl Default for BasisCounts {
    fn default() -> Self {
        Self {
            spatial: vec![25, 81, 144],
            temporal: vec![10, 15, 45],
        }
    }
}

/// Everything needed to embed raw `(s, t)` points consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EmbeddingDoc", into = "EmbeddingDoc")]
pub struct EmbeddingConfig {
    pub spatial: SpatialAnchorSet,
    pub temporal: Vec<TemporalAnchorSet>,
    pub rescale: Rescale,
    pub n_covariates: usize,
}

impl EmbeddingConfig {
    pub fn new(counts: &BasisCounts, rescale: Rescale, n_covariates: usize) -> Result<Self> {
        let spatial_counts = if rescale.s1.is_degenerate() && rescale.s2.is_degenerate() {
            log::warn!("single station in training data; spatial basis collapsed to one resolution");
            &counts.spatial[..counts.spatial.len().min(1)]
        } else {
            &counts.spatial[..]
        };
        let spatial = make_spatial_anchors(&DomainBounds::UNIT, spatial_counts)?;
        let mut temporal = Vec::new();
        if rescale.t.is_degenerate() {
            log::warn!("single time stamp in training data; temporal basis collapsed to one resolution");
            temporal.push(make_temporal_anchors(0.0, 1.0, 2)?);
        } else {
            for &h in &counts.temporal {
                temporal.push(make_temporal_anchors(0.0, 1.0, h)?);
            }
        }
        Ok(Self {
            spatial,
            temporal,
            rescale,
            n_covariates,
        })
    }

    /// Fits the rescaling to `ds` and builds anchors from `counts`.
    pub fn from_dataset(ds: &SpaceTimeDataset, counts: &BasisCounts) -> Result<Self> {
        Self::new(counts, Rescale::fit(ds), ds.n_covariates())
    }

    pub fn basis_len(&self) -> usize {
        self.spatial.len() + self.temporal.iter().map(TemporalAnchorSet::len).sum::<usize>()
    }

    /// Full input dimension `Q` (+ covariates).
    pub fn dim(&self) -> usize {
        self.basis_len() + self.n_covariates
    }

    fn check_domain(&self, s: [f64; 2], t: f64) {
        if self.rescale.is_extrapolation(s, t) && !EXTRAPOLATION_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("query ({}, {}, {}) lies more than 5% outside the training domain", s[0], s[1], t);
        }
    }

    /// Embeds a point given in raw (un-rescaled) coordinates.
    pub fn embed(&self, s: [f64; 2], t: f64, covariates: Option<&[f64]>) -> Result<EmbeddingVector> {
        self.check_domain(s, t);
        let (u, v) = self.rescale.apply(s, t);
        embed(u, v, &self.spatial, &self.temporal, covariates, self.n_covariates)
    }

    /// Row-per-point embedding matrix for raw coordinates.
    pub fn embed_points(&self, points: &[([f64; 2], f64)], covariates: Option<&[Vec<f64>]>) -> Result<Array2<f64>> {
        let q = self.dim();
        let mut out = Array2::zeros((points.len(), q));
        for (i, (&(s, t), mut row)) in points.iter().zip(out.rows_mut()).enumerate() {
            let cov: &[f64] = match covariates {
                Some(c) => &c[i],
                None => &[],
            };
            if cov.len() != self.n_covariates {
                return Err(Error::Shape {
                    context: "embedding covariates",
                    expected: self.n_covariates,
                    found: cov.len(),
                });
            }
            self.check_domain(s, t);
            let (u, v) = self.rescale.apply(s, t);
            let slice = row.as_slice_mut().expect("standard layout");
            embed_into(u, v, &self.spatial, &self.temporal, cov, slice);
        }
        Ok(out)
    }

    pub fn embed_dataset(&self, ds: &SpaceTimeDataset) -> Result<Array2<f64>> {
        let pts: Vec<_> = ds.rows.iter().map(|r| (r.s, r.t)).collect();
        let cov: Vec<Vec<f64>> = ds.rows.iter().map(|r| r.covariates.clone()).collect();
        self.embed_points(&pts, Some(&cov))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpatialLevelDoc {
    g: usize,
    theta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TemporalLevelDoc {
    h: usize,
    kappa: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingDoc {
    spatial: Vec<SpatialLevelDoc>,
    temporal: Vec<TemporalLevelDoc>,
    rescale: Rescale,
    #[serde(default)]
    covariates: usize,
}

impl From<EmbeddingConfig> for EmbeddingDoc {
    fn from(c: EmbeddingConfig) -> Self {
        Self {
            spatial: c
                .spatial
                .resolutions
                .iter()
                .map(|r| SpatialLevelDoc {
                    g: r.grid_side,
                    theta: r.theta,
                })
                .collect(),
            temporal: c
                .temporal
                .iter()
                .map(|r| TemporalLevelDoc {
                    h: r.len(),
                    kappa: r.kappa,
                })
                .collect(),
            rescale: c.rescale,
            covariates: c.n_covariates,
        }
    }
}

impl TryFrom<EmbeddingDoc> for EmbeddingConfig {
    type Error = Error;

    fn try_from(doc: EmbeddingDoc) -> Result<Self> {
        let mut resolutions = Vec::new();
        for level in &doc.spatial {
            if level.g < 2 || !(level.theta > 0.0) {
                return Err(config(format!("invalid spatial level g={} theta={}", level.g, level.theta)));
            }
            let mut res = grid_resolution(&DomainBounds::UNIT, level.g);
            res.theta = level.theta;
            resolutions.push(res);
        }
        let mut temporal = Vec::new();
        for level in &doc.temporal {
            let mut res = make_temporal_anchors(0.0, 1.0, level.h)?;
            if !(level.kappa > 0.0) {
                return Err(config(format!("invalid temporal kappa {}", level.kappa)));
            }
            res.kappa = level.kappa;
            temporal.push(res);
        }
        Ok(Self {
            spatial: SpatialAnchorSet { resolutions },
            temporal,
            rescale: doc.rescale,
            n_covariates: doc.covariates,
        })
    }
}
