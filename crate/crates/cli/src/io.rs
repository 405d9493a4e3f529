use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

/// Relative paths are taken from the data directory when one is set.
pub fn resolve(data_dir: Option<&Path>, p: &Path) -> PathBuf {
    match data_dir {
        Some(d) if p.is_relative() => d.join(p),
        _ => p.to_path_buf(),
    }
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    config: &'a T,
}

/// `<file>.manifest.json` next to a file, `run_manifest.json` inside a directory.
pub fn write_manifest<T: Serialize>(artifact: &Path, command: &str, seed: u64, inputs: &[&Path], config: &T) -> Result<()> {
    let path = if artifact.is_dir() {
        artifact.join("run_manifest.json")
    } else {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    };
    let m = Manifest {
        tool: "stdk",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: vec![artifact.display().to_string()],
        config,
    };
    std::fs::write(&path, serde_json::to_string_pretty(&m)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    if !path.exists() {
        bail!("not found: {}", path.display());
    }
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))
}

fn header_index(headers: &csv::StringRecord, path: &Path) -> HashMap<String, usize> {
    let _ = path;
    headers.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect()
}

fn column(idx: &HashMap<String, usize>, name: &str, path: &Path) -> Result<usize> {
    idx.get(name)
        .copied()
        .ok_or_else(|| anyhow!("{}: missing column `{name}`", path.display()))
}

fn field(rec: &csv::StringRecord, col: usize, name: &str, row: usize, path: &Path) -> Result<f64> {
    let raw = rec.get(col).unwrap_or("");
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| anyhow!("{}: row {row}, column `{name}`: cannot parse `{raw}` as a finite number", path.display()))
}

/// Query points for prediction; any column other than `s1,s2,t,z` is a covariate.
pub struct Queries {
    pub points: Vec<([f64; 2], f64)>,
    pub covariates: Option<Vec<Vec<f64>>>,
}

pub fn read_queries(path: &Path) -> Result<Queries> {
    let mut rdr = open(path)?;
    let headers = rdr.headers()?.clone();
    let idx = header_index(&headers, path);
    let (c1, c2, ct) = (column(&idx, "s1", path)?, column(&idx, "s2", path)?, column(&idx, "t", path)?);
    let cov_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !matches!(*h, "s1" | "s2" | "t" | "z"))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let mut points = Vec::new();
    let mut covs = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.with_context(|| format!("{}: row {row}", path.display()))?;
        points.push((
            [field(&rec, c1, "s1", row, path)?, field(&rec, c2, "s2", row, path)?],
            field(&rec, ct, "t", row, path)?,
        ));
        covs.push(
            cov_cols
                .iter()
                .map(|(c, name)| field(&rec, *c, name, row, path))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(Queries {
        points,
        covariates: if cov_cols.is_empty() { None } else { Some(covs) },
    })
}

pub struct PredRow {
    pub s: [f64; 2],
    pub t: f64,
    pub tau: f64,
    pub value: f64,
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredRow>> {
    let mut rdr = open(path)?;
    let headers = rdr.headers()?.clone();
    let idx = header_index(&headers, path);
    let cols: Vec<usize> = ["s1", "s2", "t", "tau", "value"]
        .iter()
        .map(|n| column(&idx, n, path))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.with_context(|| format!("{}: row {row}", path.display()))?;
        let f = |i: usize, n: &str| field(&rec, cols[i], n, row, path);
        out.push(PredRow {
            s: [f(0, "s1")?, f(1, "s2")?],
            t: f(2, "t")?,
            tau: f(3, "tau")?,
            value: f(4, "value")?,
        });
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, points: &[([f64; 2], f64)], by_tau: &[(f64, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["s1", "s2", "t", "tau", "value"])?;
    for (i, (s, t)) in points.iter().enumerate() {
        for (tau, values) in by_tau {
            w.write_record([s[0].to_string(), s[1].to_string(), t.to_string(), tau.to_string(), values[i].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `location_id,s1,s2` rows.
pub fn read_locations(path: &Path) -> Result<Vec<(String, [f64; 2])>> {
    let mut rdr = open(path)?;
    let headers = rdr.headers()?.clone();
    let idx = header_index(&headers, path);
    let (ci, c1, c2) = (
        column(&idx, "location_id", path)?,
        column(&idx, "s1", path)?,
        column(&idx, "s2", path)?,
    );
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.with_context(|| format!("{}: row {row}", path.display()))?;
        let id = rec.get(ci).unwrap_or("").to_string();
        if id.is_empty() {
            bail!("{}: row {row}, column `location_id`: empty id", path.display());
        }
        out.push((id, [field(&rec, c1, "s1", row, path)?, field(&rec, c2, "s2", row, path)?]));
    }
    if out.is_empty() {
        bail!("{}: no locations", path.display());
    }
    Ok(out)
}

/// Exact-text coordinate key; parsed floats from the same text compare equal.
pub fn key(s: [f64; 2], t: f64) -> (u64, u64, u64) {
    (s[0].to_bits(), s[1].to_bits(), t.to_bits())
}
