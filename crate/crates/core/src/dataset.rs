//! Observational data: ingestion, validation and preprocessing.
//!
//! A [`Dataset`] holds the outcome `y`, the binary treatment `d`, the scalar
//! conditioning variable `x` and the control matrix `z`. Column 0 of `z` is
//! always the intercept (identically one) and is never rescaled.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::order_rank;

pub const INTERCEPT_NAME: &str = "(intercept)";
const SNAPSHOT_CONTROL_PREFIX: &str = "z.";

/// Column-role mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub outcome: String,
    pub treatment: String,
    pub conditioning: String,
    pub controls: Vec<String>,
    /// Append the conditioning variable to the controls (after the intercept).
    #[serde(default = "default_true")]
    pub include_conditioning: bool,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_true() -> bool {
    true
}

fn default_delimiter() -> char {
    ','
}

impl Schema {
    pub fn new(outcome: &str, treatment: &str, conditioning: &str, controls: &[&str]) -> Self {
        Schema {
            outcome: outcome.to_string(),
            treatment: treatment.to_string(),
            conditioning: conditioning.to_string(),
            controls: controls.iter().map(|s| s.to_string()).collect(),
            include_conditioning: true,
            delimiter: ',',
        }
    }
}

impl Schema {
    /// Schema for a file whose header names the outcome `y`, the treatment
    /// `d` and the conditioning variable `x`; every other column is a control.
    pub fn from_header(path: impl AsRef<Path>, delimiter: char) -> Result<Self> {
        let path = path.as_ref();
        if !delimiter.is_ascii() {
            return Err(Error::Config(format!("delimiter {delimiter:?} is not ASCII")));
        }
        let file = File::open(path).map_err(io_err(path))?;
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter as u8)
            .trim(csv::Trim::All)
            .from_reader(file);
        let headers = reader.headers().map_err(|e| csv_err(path, e))?;
        for role in ["y", "d", "x"] {
            if !headers.iter().any(|h| h == role) {
                return Err(Error::Schema(format!(
                    "no schema configured and the header lacks a '{role}' column"
                )));
            }
        }
        let controls: Vec<&str> = headers.iter().filter(|h| !matches!(*h, "y" | "d" | "x")).collect();
        Ok(Schema {
            delimiter,
            ..Schema::new("y", "d", "x", &controls)
        })
    }
}

/// Affine map applied to a control column: `stored = (raw - min) / range`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub min: f64,
    pub range: f64,
}

impl ColumnScale {
    pub const IDENTITY: ColumnScale = ColumnScale { min: 0.0, range: 1.0 };

    pub fn to_raw(&self, stored: f64) -> f64 {
        self.min + self.range * stored
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    d: Vec<f64>,
    x: Vec<f64>,
    z: DMatrix<f64>,
    outcome_name: String,
    treatment_name: String,
    conditioning_name: String,
    control_names: Vec<String>,
    scales: Vec<ColumnScale>,
}

impl Dataset {
    /// Builds a dataset from controls that do NOT yet contain the intercept;
    /// a constant column is prepended.
    pub fn from_controls(
        y: Vec<f64>,
        d: Vec<f64>,
        x: Vec<f64>,
        controls: &DMatrix<f64>,
        control_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if controls.nrows() != n {
            return Err(Error::Validation(format!(
                "controls have {} rows but the outcome has {n}",
                controls.nrows()
            )));
        }
        if control_names.len() != controls.ncols() {
            return Err(Error::Validation("one name per control column is required".into()));
        }
        let mut z = DMatrix::from_element(n, controls.ncols() + 1, 1.0);
        z.columns_mut(1, controls.ncols()).copy_from(controls);
        let mut names = Vec::with_capacity(control_names.len() + 1);
        names.push(INTERCEPT_NAME.to_string());
        names.extend(control_names);
        Self::new(y, d, x, z, names)
    }

    /// Builds a dataset whose control matrix already carries the intercept in
    /// column 0.
    pub fn new(
        y: Vec<f64>,
        d: Vec<f64>,
        x: Vec<f64>,
        z: DMatrix<f64>,
        control_names: Vec<String>,
    ) -> Result<Self> {
        let scales = vec![ColumnScale::IDENTITY; z.ncols()];
        let ds = Dataset {
            y,
            d,
            x,
            z,
            outcome_name: "y".into(),
            treatment_name: "d".into(),
            conditioning_name: "x".into(),
            control_names,
            scales,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_role_names(mut self, outcome: &str, treatment: &str, conditioning: &str) -> Self {
        self.outcome_name = outcome.to_string();
        self.treatment_name = treatment.to_string();
        self.conditioning_name = conditioning.to_string();
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n < 2 {
            return Err(Error::Validation(format!("need at least 2 observations, got {n}")));
        }
        if self.d.len() != n || self.x.len() != n || self.z.nrows() != n {
            return Err(Error::Validation("column lengths disagree".into()));
        }
        if self.z.ncols() < 1 || self.control_names.len() != self.z.ncols() {
            return Err(Error::Validation("control matrix must have named columns".into()));
        }
        if self.z.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::Validation("column 0 of the controls must be the intercept".into()));
        }
        if let Some(i) = self.d.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!(
                "treatment must be 0 or 1, found {} at row {}",
                self.d[i],
                i + 1
            )));
        }
        let treated = self.d.iter().filter(|&&v| v == 1.0).count();
        if treated == 0 || treated == n {
            return Err(Error::Validation("both treatment arms must be nonempty".into()));
        }
        let finite = self.y.iter().chain(&self.x).chain(self.z.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("non-finite value in data".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d_z(&self) -> usize {
        self.z.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn control_names(&self) -> &[String] {
        &self.control_names
    }

    pub fn scales(&self) -> &[ColumnScale] {
        &self.scales
    }

    pub fn n_treated(&self) -> usize {
        self.d.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn x_range(&self) -> (f64, f64) {
        self.x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn y_range(&self) -> (f64, f64) {
        self.y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Keeps the rows in `rows` (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let ds = Dataset {
            y: pick(&self.y),
            d: pick(&self.d),
            x: pick(&self.x),
            z: self.z.select_rows(rows),
            outcome_name: self.outcome_name.clone(),
            treatment_name: self.treatment_name.clone(),
            conditioning_name: self.conditioning_name.clone(),
            control_names: self.control_names.clone(),
            scales: self.scales.clone(),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        if name == self.outcome_name {
            Some(self.y.clone())
        } else if name == self.treatment_name {
            Some(self.d.clone())
        } else if name == self.conditioning_name {
            Some(self.x.clone())
        } else {
            self.control_names
                .iter()
                .position(|c| c == name)
                .map(|j| self.z.column(j).iter().copied().collect())
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Parse {
            row: 0,
            column: String::new(),
            message: format!("{other:?}"),
        },
    }
}

struct RawTable {
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

fn read_table(path: &Path, delimiter: char) -> Result<RawTable> {
    if !delimiter.is_ascii() {
        return Err(Error::Config(format!("delimiter {delimiter:?} is not ASCII")));
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .delimiter(delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Parse {
            row: 0,
            column: String::new(),
            message: "empty file: a header row is required".into(),
        });
    }
    let rows = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_err(path, e))?;
    Ok(RawTable { headers, rows })
}

impl RawTable {
    fn index_of(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    }

    fn numeric_column(&self, idx: usize) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(r, rec)| {
                let cell = rec.get(idx).unwrap_or("");
                cell.parse::<f64>().map_err(|_| Error::Parse {
                    row: r + 1,
                    column: self.headers[idx].clone(),
                    message: format!("'{cell}' is not a number"),
                })
            })
            .collect()
    }
}

/// Reads a CSV file according to `schema`. The intercept is prepended to the
/// controls, followed by the conditioning variable (unless disabled) and the
/// named control columns.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    if schema.controls.is_empty() && !schema.include_conditioning {
        return Err(Error::Schema("at least one control column is required".into()));
    }
    let table = read_table(path, schema.delimiter)?;
    let y = table.numeric_column(table.index_of(&schema.outcome)?)?;
    let d = table.numeric_column(table.index_of(&schema.treatment)?)?;
    let x = table.numeric_column(table.index_of(&schema.conditioning)?)?;

    let mut names = Vec::new();
    let mut cols = Vec::new();
    if schema.include_conditioning {
        names.push(schema.conditioning.clone());
        cols.push(x.clone());
    }
    for c in &schema.controls {
        names.push(c.clone());
        cols.push(table.numeric_column(table.index_of(c)?)?);
    }
    let n = y.len();
    let controls = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    Ok(Dataset::from_controls(y, d, x, &controls, names)?.with_role_names(
        &schema.outcome,
        &schema.treatment,
        &schema.conditioning,
    ))
}

/// Maps every non-intercept control column affinely onto `[0, 1]`.
/// Constant columns become all zeros. The composed scaling back to the raw
/// values is retained in [`Dataset::scales`].
pub fn normalize_unit_interval(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for j in 1..out.z.ncols() {
        let col = out.z.column(j);
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let prev = out.scales[j];
        if range > 0.0 {
            out.z.column_mut(j).iter_mut().for_each(|v| *v = (*v - lo) / range);
            out.scales[j] = ColumnScale {
                min: prev.to_raw(lo),
                range: prev.range * range,
            };
        } else {
            out.z.column_mut(j).fill(0.0);
            out.scales[j] = ColumnScale {
                min: prev.to_raw(lo),
                range: 0.0,
            };
        }
    }
    out
}

/// Preprocessing options. The clipping fields are consumed by the estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub normalize: bool,
    pub trim_lower_q: f64,
    pub trim_upper_q: f64,
    /// Columns (by name) whose joint values define the trimming groups.
    pub trim_group_cols: Vec<String>,
    /// Groups with fewer rows are dropped entirely.
    pub min_group_rows: usize,
    /// `None` disables propensity clipping.
    pub propensity_clip: Option<(f64, f64)>,
    /// `None` disables outcome-model clipping.
    pub outcome_clip_frac: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            normalize: false,
            trim_lower_q: 0.0,
            trim_upper_q: 0.0,
            trim_group_cols: Vec::new(),
            min_group_rows: 0,
            propensity_clip: Some((0.01, 0.99)),
            outcome_clip_frac: Some(0.125),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_q = |q: f64| (0.0..0.5).contains(&q);
        if !ok_q(self.trim_lower_q) || !ok_q(self.trim_upper_q) {
            return Err(Error::Config("trim quantiles must lie in [0, 0.5)".into()));
        }
        if let Some((lo, hi)) = self.propensity_clip {
            if !(0.0 < lo && lo < hi && hi < 1.0) {
                return Err(Error::Config("propensity_clip must satisfy 0 < lo < hi < 1".into()));
            }
        }
        if let Some(f) = self.outcome_clip_frac {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::Config("outcome_clip_frac must be a nonnegative number".into()));
            }
        }
        Ok(())
    }
}

/// Drops outcome outliers within each group: the `ceil(q_lo * m)` smallest
/// and `ceil(q_hi * m)` largest outcomes of a group with `m` rows (values tied
/// with a cut point go with it). Groups smaller than `min_group_rows` are
/// removed. Returns the trimmed dataset and the number of rows removed.
pub fn trim_quantiles(ds: &Dataset, cfg: &PreprocessConfig) -> Result<(Dataset, usize)> {
    cfg.validate()?;
    let group_cols = cfg
        .trim_group_cols
        .iter()
        .map(|name| {
            ds.column_by_name(name)
                .ok_or_else(|| Error::Schema(format!("trim group column '{name}' not found")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut groups: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    for i in 0..ds.n() {
        let key = group_cols.iter().map(|c| c[i].to_bits()).collect();
        groups.entry(key).or_default().push(i);
    }

    let mut keep = vec![false; ds.n()];
    for rows in groups.values() {
        let m = rows.len();
        if m < cfg.min_group_rows {
            continue;
        }
        let mut sorted: Vec<f64> = rows.iter().map(|&i| ds.y[i]).collect();
        sorted.sort_by(f64::total_cmp);
        let k_lo = order_rank(cfg.trim_lower_q, m);
        let k_hi = order_rank(cfg.trim_upper_q, m);
        let lower_cut = (k_lo > 0).then(|| sorted[k_lo - 1]);
        let upper_cut = (k_hi > 0).then(|| sorted[m - k_hi]);
        for &i in rows {
            let v = ds.y[i];
            let below = lower_cut.is_some_and(|c| v <= c);
            let above = upper_cut.is_some_and(|c| v >= c);
            keep[i] = !(below || above);
        }
    }
    let rows: Vec<usize> = (0..ds.n()).filter(|&i| keep[i]).collect();
    let removed = ds.n() - rows.len();
    if removed == 0 {
        return Ok((ds.clone(), 0));
    }
    Ok((ds.select_rows(&rows)?, removed))
}

fn format_value(v: f64, precision: Option<usize>) -> String {
    match precision {
        None => format!("{v}"),
        Some(p) => {
            let rounded: f64 = format!("{:.*e}", p.saturating_sub(1), v).parse().unwrap_or(v);
            format!("{rounded}")
        }
    }
}

/// Writes an audit snapshot: outcome, treatment and conditioning columns
/// followed by every non-intercept control prefixed with `z.`.
///
/// With `precision = None` values are written in shortest round-trip form,
/// so [`load_snapshot`] restores them bit for bit.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>, precision: Option<usize>) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut header = vec![
        ds.outcome_name.clone(),
        ds.treatment_name.clone(),
        ds.conditioning_name.clone(),
    ];
    header.extend(
        ds.control_names[1..]
            .iter()
            .map(|c| format!("{SNAPSHOT_CONTROL_PREFIX}{c}")),
    );
    writeln!(out, "{}", header.join(",")).map_err(io_err(path))?;
    for i in 0..ds.n() {
        let mut cells = vec![
            format_value(ds.y[i], precision),
            format!("{}", ds.d[i]),
            format_value(ds.x[i], precision),
        ];
        cells.extend((1..ds.d_z()).map(|j| format_value(ds.z[(i, j)], precision)));
        writeln!(out, "{}", cells.join(",")).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads a file produced by [`write_csv`].
pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let table = read_table(path, ',')?;
    if table.headers.len() < 3 {
        return Err(Error::Schema("snapshot needs outcome, treatment and conditioning columns".into()));
    }
    let controls: Vec<String> = table.headers[3..]
        .iter()
        .map(|h| {
            h.strip_prefix(SNAPSHOT_CONTROL_PREFIX)
                .map(str::to_string)
                .ok_or_else(|| Error::Schema(format!("snapshot control column '{h}' lacks the '{SNAPSHOT_CONTROL_PREFIX}' prefix")))
        })
        .collect::<Result<_>>()?;
    let y = table.numeric_column(0)?;
    let d = table.numeric_column(1)?;
    let x = table.numeric_column(2)?;
    let cols = (3..table.headers.len())
        .map(|j| table.numeric_column(j))
        .collect::<Result<Vec<_>>>()?;
    let m = DMatrix::from_fn(y.len(), cols.len(), |i, j| cols[j][i]);
    let names = (
        table.headers[0].clone(),
        table.headers[1].clone(),
        table.headers[2].clone(),
    );
    Ok(Dataset::from_controls(y, d, x, &m, controls)?.with_role_names(&names.0, &names.1, &names.2))
}
