//! Observed-data records, the covariate transformation and CSV ingestion.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Monotone decreasing map between the concentration scale `z` and the
/// transformed scale `t`, where left-censoring of `z` becomes right-censoring of `t`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Transformation {
    /// `z = exp(-t)`, `t = -ln z`.
    #[default]
    NegLog,
}

impl Transformation {
    /// `h(t)`: transformed scale to concentration scale.
    pub fn forward(self, t: f64) -> f64 {
        match self {
            Transformation::NegLog => (-t).exp(),
        }
    }

    /// `h⁻¹(z)`, defined for `z > 0`.
    pub fn inverse(self, z: f64) -> Option<f64> {
        match self {
            Transformation::NegLog if z > 0.0 && z.is_finite() => Some(-z.ln()),
            Transformation::NegLog => None,
        }
    }
}

/// Transformed detection limit `C = h⁻¹(L)`.
pub fn transform_limit(limit: f64, t: Transformation) -> Result<f64> {
    t.inverse(limit).ok_or_else(|| {
        Error::Validation(format!("detection limit must be positive and finite, got {limit}"))
    })
}

/// Ordering of the GLM linear predictor: intercept, the `p` fully observed
/// covariates, then the term for the covariate with a detection limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub p: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.p + 2
    }

    /// Writes `D = (1, x', z)'` into `out`.
    #[inline]
    pub fn fill(&self, x: &[f64], z: f64, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.p);
        out[0] = 1.0;
        out[1..=self.p].copy_from_slice(x);
        out[self.p + 1] = z;
    }

    pub fn design(&self, x: &[f64], z: f64) -> Vec<f64> {
        let mut d = vec![0.0; self.dim()];
        self.fill(x, z, &mut d);
        d
    }

    #[inline]
    pub fn linear_predictor(&self, x: &[f64], z: f64, theta: &[f64]) -> f64 {
        let mut eta = theta[0] + theta[self.p + 1] * z;
        for (xj, bj) in x.iter().zip(&theta[1..=self.p]) {
            eta += xj * bj;
        }
        eta
    }

    pub fn term_names(&self, x_names: &[String]) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        names.push("intercept".to_string());
        names.extend(x_names.iter().cloned());
        names.push("z".to_string());
        names
    }
}

/// `n` records of `(y, x, v, delta)` sharing one transformed limit `c`.
///
/// Censored rows carry `v = c`. The covariate matrix has no intercept
/// column; [`Layout`] adds it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    y: Vec<f64>,
    x: Vec<f64>,
    p: usize,
    v: Vec<f64>,
    delta: Vec<bool>,
    c: f64,
    transform: Transformation,
    x_names: Vec<String>,
}

impl ObservationSet {
    /// Builds a validated set. `x` is row-major `n × p`.
    pub fn new(
        y: Vec<f64>,
        x: Vec<f64>,
        p: usize,
        v: Vec<f64>,
        delta: Vec<bool>,
        c: f64,
    ) -> Result<Self> {
        let n = y.len();
        if v.len() != n || delta.len() != n || x.len() != n * p {
            return Err(Error::Validation(format!(
                "length mismatch: y={n}, v={}, delta={}, x={} (p={p})",
                v.len(),
                delta.len(),
                x.len()
            )));
        }
        if n < p + 3 {
            return Err(Error::Validation(format!("need at least p+3={} rows, got {n}", p + 3)));
        }
        if !c.is_finite() {
            return Err(Error::Validation("transformed limit must be finite".into()));
        }
        for i in 0..n {
            let row_ok = y[i].is_finite() && v[i].is_finite() && x[i * p..(i + 1) * p].iter().all(|a| a.is_finite());
            if !row_ok {
                return Err(Error::Domain { row: i, msg: "non-finite value".into() });
            }
            if delta[i] && v[i] > c {
                return Err(Error::Consistency {
                    row: i,
                    msg: format!("detected value v={} exceeds transformed limit {c}", v[i]),
                });
            }
            if !delta[i] && v[i] != c {
                return Err(Error::Consistency {
                    row: i,
                    msg: format!("censored row must carry v=c={c}, got {}", v[i]),
                });
            }
        }
        let x_names = (1..=p).map(|j| format!("x{j}")).collect();
        Ok(ObservationSet { y, x, p, v, delta, c, transform: Transformation::NegLog, x_names })
    }

    pub fn with_x_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p {
            return Err(Error::Validation(format!("{} names for {} covariates", names.len(), self.p)));
        }
        self.x_names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn layout(&self) -> Layout {
        Layout { p: self.p }
    }
    pub fn y(&self) -> &[f64] {
        &self.y
    }
    pub fn v(&self) -> &[f64] {
        &self.v
    }
    pub fn delta(&self) -> &[bool] {
        &self.delta
    }
    pub fn c(&self) -> f64 {
        self.c
    }
    pub fn transform(&self) -> Transformation {
        self.transform
    }
    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }
    /// Detection limit on the concentration scale.
    pub fn limit(&self) -> f64 {
        self.transform.forward(self.c)
    }
    #[inline]
    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }
    pub fn x_col(&self, j: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.x[i * self.p + j]).collect()
    }
    pub fn x_flat(&self) -> &[f64] {
        &self.x
    }
    /// Concentration-scale covariate `h(v)` for a detected row.
    pub fn z(&self, i: usize) -> f64 {
        self.transform.forward(self.v[i])
    }
    pub fn n_detected(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }
    /// `1 - mean(delta)`.
    pub fn censoring_rate(&self) -> f64 {
        1.0 - self.n_detected() as f64 / self.n() as f64
    }
    pub fn detected_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.delta[i]).collect()
    }

    /// Rows picked by `idx` (repeats allowed), as used by resampling.
    pub fn resample(&self, idx: &[usize]) -> Result<Self> {
        let p = self.p;
        let mut x = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            x.extend_from_slice(self.x_row(i));
        }
        let out = ObservationSet::new(
            idx.iter().map(|&i| self.y[i]).collect(),
            x,
            p,
            idx.iter().map(|&i| self.v[i]).collect(),
            idx.iter().map(|&i| self.delta[i]).collect(),
            self.c,
        )?;
        Ok(ObservationSet { x_names: self.x_names.clone(), ..out })
    }

    /// Keeps only the covariate columns in `cols`, in that order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let mut x = Vec::with_capacity(self.n() * cols.len());
        for i in 0..self.n() {
            let row = self.x_row(i);
            x.extend(cols.iter().map(|&j| row[j]));
        }
        let out = ObservationSet::new(self.y.clone(), x, cols.len(), self.v.clone(), self.delta.clone(), self.c)?;
        Ok(ObservationSet { x_names: cols.iter().map(|&j| self.x_names[j].clone()).collect(), ..out })
    }

    /// Writes `y, x..., z, detect` with blank `z` for censored rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["y".to_string()];
        header.extend(self.x_names.iter().cloned());
        header.push("z".into());
        header.push("detect".into());
        wr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.y[i].to_string()];
            rec.extend(self.x_row(i).iter().map(|a| a.to_string()));
            rec.push(if self.delta[i] { self.z(i).to_string() } else { String::new() });
            rec.push(if self.delta[i] { "1" } else { "0" }.into());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub response: String,
    pub z: String,
    pub detect: String,
    pub x: Vec<String>,
}

impl CsvSchema {
    /// Parses `y=COL,z=COL,detect=COL,x=COL[,x=COL...]`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map: HashMap<&str, &str> = HashMap::new();
        let mut x = Vec::new();
        for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("schema entry `{part}` is not name=column")))?;
            let (k, v) = (k.trim(), v.trim());
            if v.is_empty() {
                return Err(Error::Usage(format!("schema entry `{part}` has an empty column")));
            }
            match k {
                "x" => x.push(v.to_string()),
                "y" | "z" | "detect" => {
                    if map.insert(k, v).is_some() {
                        return Err(Error::Usage(format!("schema key `{k}` given twice")));
                    }
                }
                other => return Err(Error::Usage(format!("unknown schema key `{other}`"))),
            }
        }
        let get = |k: &str| {
            map.get(k)
                .map(|s| s.to_string())
                .ok_or_else(|| Error::Usage(format!("schema is missing `{k}=COLUMN`")))
        };
        Ok(CsvSchema { response: get("y")?, z: get("z")?, detect: get("detect")?, x })
    }
}

/// Reads a CSV file into an [`ObservationSet`].
///
/// Rows with `detect = 0` get `v = c` regardless of the `z` cell, which may be
/// blank or carry the limit value.
pub fn load_csv(path: &Path, schema: &CsvSchema, limit: f64) -> Result<ObservationSet> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema, limit)
}

pub fn read_csv<R: std::io::Read>(r: R, schema: &CsvSchema, limit: f64) -> Result<ObservationSet> {
    let t = Transformation::NegLog;
    let c = transform_limit(limit, t)?;
    let mut rd = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).trim(csv::Trim::All).from_reader(r);
    let header = rd.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let iy = col(&schema.response)?;
    let iz = col(&schema.z)?;
    let id = col(&schema.detect)?;
    let ix: Vec<usize> = schema.x.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let p = ix.len();

    let (mut y, mut x, mut v, mut delta) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in rd.records().enumerate() {
        let rec = rec?;
        let num = |j: usize, what: &str| -> Result<f64> {
            let s = rec.get(j).unwrap_or("");
            s.parse::<f64>().map_err(|_| Error::Domain {
                row,
                msg: format!("cannot parse {what} value `{s}`"),
            })
        };
        y.push(num(iy, &schema.response)?);
        for (&j, name) in ix.iter().zip(&schema.x) {
            x.push(num(j, name)?);
        }
        let detected = match rec.get(id).unwrap_or("") {
            "1" | "true" | "TRUE" => true,
            "0" | "false" | "FALSE" => false,
            other => {
                return Err(Error::Domain { row, msg: format!("detect flag must be 0 or 1, got `{other}`") })
            }
        };
        if detected {
            let z = num(iz, &schema.z)?;
            let vt = t.inverse(z).ok_or_else(|| Error::Domain {
                row,
                msg: format!("z={z} outside the domain of -log"),
            })?;
            if z < limit {
                return Err(Error::Consistency {
                    row,
                    msg: format!("detected z={z} is below the detection limit {limit}"),
                });
            }
            // z = limit exactly maps to c; keep it bit-equal.
            v.push(vt.min(c));
        } else {
            v.push(c);
        }
        delta.push(detected);
    }
    ObservationSet::new(y, x, p, v, delta, c)?.with_x_names(schema.x.clone())
}
