//! Irregular space-time observations and the canonical CSV schema
//! `s1,s2,t,z[,x1..xp]`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed value `z` at location `s` and time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub s: [f64; 2],
    pub t: f64,
    pub z: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariates: Vec<f64>,
}

impl Observation {
    pub fn new(s: [f64; 2], t: f64, z: f64) -> Self {
        Self {
            s,
            t,
            z,
            covariates: Vec::new(),
        }
    }

    fn key(&self) -> (u64, u64, u64) {
        (self.s[0].to_bits(), self.s[1].to_bits(), self.t.to_bits())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeDataset {
    pub covariate_names: Vec<String>,
    pub rows: Vec<Observation>,
}

impl SpaceTimeDataset {
    pub fn new(rows: Vec<Observation>) -> Self {
        Self {
            covariate_names: Vec::new(),
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn z(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.z).collect()
    }

    /// Rows at the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            covariate_names: self.covariate_names.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Distinct station coordinates in order of first appearance.
    pub fn stations(&self) -> Vec<[f64; 2]> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for r in &self.rows {
            let key = (r.s[0].to_bits(), r.s[1].to_bits());
            if seen.insert(key, ()).is_none() {
                out.push(r.s);
            }
        }
        out
    }

    /// Distinct time stamps, ascending.
    pub fn times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.rows.iter().map(|r| r.t).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }

    /// Values observed at one station, sorted by time.
    pub fn station_series(&self, s: [f64; 2]) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.s == s)
            .map(|r| (r.t, r.z))
            .collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }

    pub fn variance(&self) -> f64 {
        variance(&self.z())
    }

    /// Rejects duplicate `(s, t)` rows and inconsistent covariate widths.
    pub fn validate(&self) -> Result<()> {
        let p = self.n_covariates();
        let mut first_seen: BTreeMap<(u64, u64, u64), usize> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            if r.covariates.len() != p {
                return Err(Error::Schema(format!(
                    "row {}: expected {} covariates, found {}",
                    i + 1,
                    p,
                    r.covariates.len()
                )));
            }
            if !(r.s[0].is_finite() && r.s[1].is_finite() && r.t.is_finite() && r.z.is_finite()) {
                return Err(Error::Schema(format!("row {}: non-finite value", i + 1)));
            }
            if let Some(prev) = first_seen.insert(r.key(), i) {
                return Err(Error::Schema(format!(
                    "duplicate (s1, s2, t) at rows {} and {}",
                    prev + 1,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_reader(std::fs::File::open(path)?)
    }

    /// Parses the canonical schema. Row numbers in errors count data rows from 1.
    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let expected = ["s1", "s2", "t", "z"];
        for (i, name) in expected.iter().enumerate() {
            match header.get(i) {
                Some(h) if h == *name => {}
                Some(h) => {
                    return Err(Error::Schema(format!(
                        "column {}: expected `{}`, found `{}`",
                        i + 1,
                        name,
                        h
                    )))
                }
                None => return Err(Error::Schema(format!("missing column `{name}`"))),
            }
        }
        let covariate_names: Vec<String> = header.iter().skip(4).map(str::to_owned).collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut vals = Vec::with_capacity(rec.len());
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Schema(format!(
                        "row {}, column `{}`: cannot parse `{}` as a number",
                        i + 1,
                        header.get(j).unwrap_or("?"),
                        field
                    ))
                })?;
                vals.push(v);
            }
            if vals.len() != header.len() {
                return Err(Error::Schema(format!(
                    "row {}: expected {} fields, found {}",
                    i + 1,
                    header.len(),
                    vals.len()
                )));
            }
            rows.push(Observation {
                s: [vals[0], vals[1]],
                t: vals[2],
                z: vals[3],
                covariates: vals[4..].to_vec(),
            });
        }
        let ds = Self {
            covariate_names,
            rows,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_writer(std::io::BufWriter::new(file))
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["s1".to_string(), "s2".into(), "t".into(), "z".into()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.s[0].to_string(),
                r.s[1].to_string(),
                r.t.to_string(),
                r.z.to_string(),
            ];
            rec.extend(r.covariates.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance.
pub(crate) fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SpaceTimeDataset {
        SpaceTimeDataset::new(vec![
            Observation::new([0.1, 0.2], 0.0, 1.5),
            Observation::new([0.1, 0.2], 1.0, 2.5),
            Observation::new([0.7, 0.3], 0.0, -1.0),
        ])
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = small();
        let mut buf = Vec::new();
        ds.to_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("s1,s2,t,z\n"));
        let back = SpaceTimeDataset::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn covariate_columns_are_kept() {
        let text = "s1,s2,t,z,x1,x2\n0,0,0,1,5,6\n1,1,0,2,7,8\n";
        let ds = SpaceTimeDataset::from_reader(text.as_bytes()).unwrap();
        assert_eq!(ds.covariate_names, vec!["x1", "x2"]);
        assert_eq!(ds.rows[1].covariates, vec![7.0, 8.0]);
    }

    #[test]
    fn duplicate_rows_are_rejected_with_row_numbers() {
        let text = "s1,s2,t,z\n0,0,0,1\n0.5,0.5,0,1\n0,0,0,2\n";
        let err = SpaceTimeDataset::from_reader(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rows 1 and 3"), "{msg}");
    }

    #[test]
    fn wrong_header_names_the_column() {
        let text = "s1,s2,time,z\n0,0,0,1\n";
        let msg = SpaceTimeDataset::from_reader(text.as_bytes())
            .unwrap_err()
            .to_string();
        assert!(msg.contains("`time`"), "{msg}");
    }

    #[test]
    fn bad_number_names_row_and_column() {
        let text = "s1,s2,t,z\n0,0,0,1\n0,1,0,abc\n";
        let msg = SpaceTimeDataset::from_reader(text.as_bytes())
            .unwrap_err()
            .to_string();
        assert!(msg.contains("row 2") && msg.contains("`z`"), "{msg}");
    }

    #[test]
    fn stations_and_times() {
        let ds = small();
        assert_eq!(ds.stations(), vec![[0.1, 0.2], [0.7, 0.3]]);
        assert_eq!(ds.times(), vec![0.0, 1.0]);
        assert_eq!(ds.station_series([0.1, 0.2]), vec![(0.0, 1.5), (1.0, 2.5)]);
    }
}
