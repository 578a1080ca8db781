//! Series ingestion, rolling windows and the offline statistics that feed the
//! physics regularizers. Everything here reads only what it is handed, so
//! passing the training prefix guarantees the statistics never see test rows.

use std::cell::Cell;
use std::fs::File;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_QUANTILE: f64 = 0.995;
pub const JITTER: f64 = 1e-8;
pub const STD_FLOOR: f64 = 1e-8;

/// A `T x D` observation matrix. Rows `[0, train_len)` form the training
/// prefix; a freshly loaded series has `train_len == T` until a holdout is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub values: Matrix,
    pub channel_names: Vec<String>,
    pub train_len: usize,
}

impl Dataset {
    pub fn new(values: Matrix, channel_names: Vec<String>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Empty("dataset has no observations".into()));
        }
        if channel_names.len() != values.cols() {
            return Err(Error::Schema(format!(
                "{} channel names for {} columns",
                channel_names.len(),
                values.cols()
            )));
        }
        if let Some(pos) = values.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "observation at row {}, column {}",
                pos / values.cols(),
                pos % values.cols()
            )));
        }
        let train_len = values.rows();
        Ok(Self {
            values,
            channel_names,
            train_len,
        })
    }

    pub fn from_matrix(values: Matrix) -> Result<Self> {
        let names = default_names(values.cols());
        Self::new(values, names)
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Reserve the last `holdout` rows for testing.
    pub fn with_holdout(mut self, holdout: usize) -> Result<Self> {
        check_holdout(self.len(), holdout)?;
        self.train_len = self.len() - holdout;
        Ok(self)
    }

    pub fn prefix(&self) -> Matrix {
        self.values.slice_rows(0..self.train_len)
    }
}

fn default_names(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("ch{i}")).collect()
}

fn check_holdout(t: usize, holdout: usize) -> Result<()> {
    if holdout == 0 || holdout >= t {
        return Err(Error::invalid(format!(
            "holdout must satisfy 0 < holdout < T (holdout = {holdout}, T = {t})"
        )));
    }
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, has_header)
}

/// Parse comma-separated observations, one row per timestamp and one column
/// per channel. Row indices in errors count data rows from zero.
pub fn parse_csv(reader: impl Read, has_header: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let names = if has_header {
        Some(rdr.headers()?.iter().map(str::to_string).collect::<Vec<_>>())
    } else {
        None
    };

    let mut data = Vec::new();
    let mut width = names.as_ref().map(Vec::len).filter(|&w| w > 0);
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::Ragged {
                row: r,
                expected,
                found: record.len(),
            });
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row: r,
                column: c,
                message: format!("'{field}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: r,
                    column: c,
                    message: format!("'{field}' is not finite"),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty("no data rows".into()));
    }
    let d = width.unwrap_or(0);
    let values = Matrix::from_vec(rows, d, data)?;
    let names = names.unwrap_or_else(|| default_names(d));
    Dataset::new(values, names)
}

pub fn write_csv(path: impl AsRef<Path>, values: &Matrix, header: Option<&[String]>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(file, values, header)
}

pub fn write_csv_to(writer: impl std::io::Write, values: &Matrix, header: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for i in 0..values.rows() {
        w.write_record(values.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// `(prefix, suffix)` with the last `holdout` rows in the suffix.
pub fn split_train_test(ds: &Dataset, holdout: usize) -> Result<(Matrix, Matrix)> {
    let t = ds.len();
    check_holdout(t, holdout)?;
    Ok((
        ds.values.slice_rows(0..t - holdout),
        ds.values.slice_rows(t - holdout..t),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub history: Matrix,
    pub future: Matrix,
    /// Row index of the last history row.
    pub end: usize,
}

/// End indices `t` of every full `(L, H)` window inside `rows` rows.
pub fn window_ends(rows: usize, context: usize, horizon: usize) -> Result<Range<usize>> {
    if context == 0 || horizon == 0 {
        return Err(Error::invalid("context and horizon must be positive"));
    }
    if rows < context + horizon {
        return Err(Error::TooShort(format!(
            "{rows} rows cannot hold a window of context {context} and horizon {horizon}"
        )));
    }
    Ok(context - 1..rows - horizon)
}

/// Stride-1 rolling windows over `prefix`.
pub fn make_windows(prefix: &Matrix, context: usize, horizon: usize) -> Result<Vec<WindowPair>> {
    Ok(window_ends(prefix.rows(), context, horizon)?
        .map(|t| WindowPair {
            history: prefix.slice_rows(t + 1 - context..t + 1),
            future: prefix.slice_rows(t + 1..t + 1 + horizon),
            end: t,
        })
        .collect())
}

pub fn empirical_bounds(prefix: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if prefix.rows() == 0 {
        return Err(Error::Empty("empirical bounds need at least one row".into()));
    }
    let mut lo = prefix.row(0).to_vec();
    let mut hi = lo.clone();
    for i in 1..prefix.rows() {
        for (j, &v) in prefix.row(i).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    Ok((lo, hi))
}

/// Nearest-rank quantile: the smallest sample with at least `q·n` samples at
/// or below it.
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Per-channel caps on `|Δx|` and `|Δ²x|`.
pub fn robust_kinematics(prefix: &Matrix, quantile: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if prefix.rows() < 3 {
        return Err(Error::TooShort(format!(
            "kinematic caps need at least 3 rows, got {}",
            prefix.rows()
        )));
    }
    if !(0.0..=1.0).contains(&quantile) || quantile == 0.0 {
        return Err(Error::invalid(format!("quantile {quantile} outside (0, 1]")));
    }
    let mut v_max = Vec::with_capacity(prefix.cols());
    let mut a_max = Vec::with_capacity(prefix.cols());
    for j in 0..prefix.cols() {
        let col = prefix.column(j);
        let d1: Vec<f64> = col.windows(2).map(|w| w[1] - w[0]).collect();
        let d2: Vec<f64> = d1.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let d1: Vec<f64> = d1.into_iter().map(f64::abs).collect();
        v_max.push(nearest_rank_quantile(&d1, quantile));
        a_max.push(nearest_rank_quantile(&d2, quantile));
    }
    Ok((v_max, a_max))
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn is_degenerate(x: &[f64]) -> bool {
    let (mean, std) = mean_std(x);
    std <= 1e-12 * mean.abs().max(1.0)
}

/// Add a deterministic uniform perturbation of magnitude [`JITTER`] to a
/// (near-)constant series. `salt` decorrelates the patterns of different
/// channels. Non-degenerate inputs are returned unchanged.
pub fn jitter_if_constant(x: &[f64], salt: u64) -> Vec<f64> {
    if !is_degenerate(x) {
        return x.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 ^ salt);
    x.iter().map(|v| v + JITTER * rng.random_range(-1.0..=1.0)).collect()
}

/// Pearson correlation; a series that is still flat after jitter correlates
/// with nothing.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    let n = a.len() as f64;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    (cov / (sa * sb)).clamp(-1.0, 1.0)
}

/// Pearson correlation of `x[t]` against `y[t + shift]` on the overlap.
pub fn shifted_correlation(x: &[f64], y: &[f64], shift: i64) -> f64 {
    let n = x.len();
    let s = shift.unsigned_abs() as usize;
    if shift >= 0 {
        pearson(&x[..n - s], &y[s..])
    } else {
        pearson(&x[s..], &y[..n - s])
    }
}

/// Candidate shifts in order of preference: 0, -1, 1, -2, 2, ...
fn lag_candidates(tau_max: usize) -> impl Iterator<Item = i64> {
    std::iter::once(0).chain((1..=tau_max as i64).flat_map(|k| [-k, k]))
}

/// Integer lag maximizing the shifted Pearson correlation for each ordered
/// channel pair. A positive `lags[i][j]` means channel `j` trails channel `i`:
/// `x_j(t) ≈ x_i(t - lags[i][j])`.
pub fn estimate_integer_lags(prefix: &Matrix, tau_max: usize) -> Result<Vec<Vec<i64>>> {
    if prefix.rows() < 2 * tau_max + 2 {
        return Err(Error::TooShort(format!(
            "lag search up to ±{tau_max} needs at least {} rows, got {}",
            2 * tau_max + 2,
            prefix.rows()
        )));
    }
    let d = prefix.cols();
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|j| jitter_if_constant(&prefix.column(j), j as u64))
        .collect();
    let mut lags = vec![vec![0i64; d]; d];
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let mut best = (f64::NEG_INFINITY, 0i64);
            for tau in lag_candidates(tau_max) {
                let c = shifted_correlation(&cols[i], &cols[j], tau);
                if c > best.0 {
                    best = (c, tau);
                }
            }
            lags[i][j] = best.1;
        }
    }
    Ok(lags)
}

/// Per-channel affine normalization fitted on the training prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(prefix: &Matrix) -> Self {
        let (mean, std) = (0..prefix.cols())
            .map(|j| {
                let (m, s) = mean_std(&prefix.column(j));
                (m, s.max(STD_FLOOR))
            })
            .unzip();
        Self { mean, std }
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - self.mean[j]) / self.std[j])
    }

    pub fn inverse(&self, z: &Matrix) -> Matrix {
        Matrix::from_fn(z.rows(), z.cols(), |i, j| z[(i, j)] * self.std[j] + self.mean[j])
    }
}

pub fn zscore(prefix: &Matrix) -> (Matrix, Scaler) {
    let scaler = Scaler::fit(prefix);
    (scaler.transform(prefix), scaler)
}

/// Envelope, kinematic and lag budgets for the physics regularizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsBudgets {
    pub m: Vec<f64>,
    #[serde(rename = "M")]
    pub upper: Vec<f64>,
    pub v_max: Vec<f64>,
    pub a_max: Vec<f64>,
    pub lags: Vec<Vec<i64>>,
    pub tau_max: usize,
}

impl PhysicsBudgets {
    pub fn from_prefix(prefix: &Matrix, tau_max: usize, quantile: f64) -> Result<Self> {
        let (m, upper) = empirical_bounds(prefix)?;
        let (v_max, a_max) = robust_kinematics(prefix, quantile)?;
        let lags = estimate_integer_lags(prefix, tau_max)?;
        Ok(Self {
            m,
            upper,
            v_max,
            a_max,
            lags,
            tau_max,
        })
    }

    pub fn channels(&self) -> usize {
        self.m.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.m.len();
        if self.upper.len() != d || self.v_max.len() != d || self.a_max.len() != d || self.lags.len() != d {
            return Err(Error::Schema("budget vectors disagree on channel count".into()));
        }
        if self.m.iter().zip(&self.upper).any(|(lo, hi)| lo > hi) {
            return Err(Error::Schema("envelope with m > M".into()));
        }
        if self.v_max.iter().chain(&self.a_max).any(|v| *v < 0.0) {
            return Err(Error::Schema("negative kinematic cap".into()));
        }
        for (i, row) in self.lags.iter().enumerate() {
            if row.len() != d || row[i] != 0 {
                return Err(Error::Schema(format!("lag row {i} malformed")));
            }
            if row.iter().any(|l| l.unsigned_abs() as usize > self.tau_max) {
                return Err(Error::Schema(format!("lag row {i} exceeds tau_max")));
            }
        }
        Ok(())
    }
}

/// Read-through view of a series that records every row index it serves.
/// Training code reads through this so leakage past `limit` is observable.
#[derive(Debug)]
pub struct AuditedSeries<'a> {
    values: &'a Matrix,
    limit: usize,
    reads: Cell<usize>,
    reads_beyond: Cell<usize>,
    max_row: Cell<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub limit: usize,
    pub reads: usize,
    pub reads_beyond_limit: usize,
    pub max_row_read: Option<usize>,
}

impl<'a> AuditedSeries<'a> {
    pub fn new(values: &'a Matrix, limit: usize) -> Self {
        Self {
            values,
            limit,
            reads: Cell::new(0),
            reads_beyond: Cell::new(0),
            max_row: Cell::new(None),
        }
    }

    pub fn rows(&self, range: Range<usize>) -> Matrix {
        if !range.is_empty() {
            let beyond = range.end.saturating_sub(range.start.max(self.limit));
            self.reads.set(self.reads.get() + range.len());
            self.reads_beyond.set(self.reads_beyond.get() + beyond);
            let last = range.end - 1;
            self.max_row.set(Some(self.max_row.get().map_or(last, |m| m.max(last))));
        }
        self.values.slice_rows(range)
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn report(&self) -> AuditReport {
        AuditReport {
            limit: self.limit,
            reads: self.reads.get(),
            reads_beyond_limit: self.reads_beyond.get(),
            max_row_read: self.max_row.get(),
        }
    }
}
