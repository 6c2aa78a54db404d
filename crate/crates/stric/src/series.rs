//! Time-series data model: ingestion, standardization, chronological
//! splitting and supervised windowing.
//!
//! Conventions: a series is stored as an `n_channels x T` matrix, one row
//! per channel, one column per timestep. Windows of the past have length
//! `n_p` and include the present sample; prediction targets cover the next
//! `n_f` steps. All operations here are pure.

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, StricError};

/// Multivariate, regularly spaced, real-valued series with channel names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    /// `n_channels x T` value matrix.
    pub values: Array2<f64>,
    pub channel_names: Vec<String>,
    /// Absolute index of column 0 (nonzero for split segments).
    pub sample_index_origin: usize,
}

impl TimeSeries {
    pub fn new(values: Array2<f64>, channel_names: Vec<String>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(StricError::data("series must contain at least one sample"));
        }
        if channel_names.len() != values.nrows() {
            return Err(StricError::data(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                values.nrows()
            )));
        }
        if let Some((idx, v)) = values
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(idx, v)| (idx, *v))
        {
            return Err(StricError::data(format!(
                "non-finite value {v} in channel {} at timestep {}",
                idx.0, idx.1
            )));
        }
        Ok(TimeSeries {
            values,
            channel_names,
            sample_index_origin: 0,
        })
    }

    /// Single-channel helper; the channel is named "y".
    pub fn univariate(values: Vec<f64>) -> Result<Self> {
        let t = values.len();
        let values = Array2::from_shape_vec((1, t), values)
            .map_err(|e| StricError::data(e.to_string()))?;
        TimeSeries::new(values, vec!["y".to_string()])
    }

    pub fn n_channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

/// Past/future window lengths for supervised one-step (or multi-step) setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Number of past samples fed to the predictor (present included).
    pub n_p: usize,
    /// Number of future samples predicted.
    pub n_f: usize,
}

impl WindowSpec {
    pub fn new(n_p: usize, n_f: usize) -> Result<Self> {
        if n_p == 0 || n_f == 0 {
            return Err(StricError::config("window lengths must be >= 1"));
        }
        Ok(WindowSpec { n_p, n_f })
    }
}

/// Per-channel mean/std recorded by [`standardize`]; allows exact inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizeStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    /// Channels whose std fell below the floor and was clamped to 1.
    pub degenerate: Vec<bool>,
}

/// Std floor below which a channel counts as constant.
pub const STD_FLOOR: f64 = 1e-12;

/// Standardize each channel to zero mean and unit population (1/N) std.
///
/// Constant channels (std below [`STD_FLOOR`]) get std clamped to 1 and are
/// flagged degenerate rather than rejected.
pub fn standardize(ts: &TimeSeries) -> (TimeSeries, StandardizeStats) {
    let stats = compute_stats(ts);
    (apply_standardize(ts, &stats), stats)
}

/// Compute standardization statistics without applying them (used to fit on
/// the training split only and then transform every split).
pub fn compute_stats(ts: &TimeSeries) -> StandardizeStats {
    let t = ts.len() as f64;
    let n = ts.n_channels();
    let mut mean = Array1::zeros(n);
    let mut std = Array1::zeros(n);
    let mut degenerate = vec![false; n];
    for (i, row) in ts.values.rows().into_iter().enumerate() {
        let m = row.sum() / t;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t;
        let mut s = var.sqrt();
        if s < STD_FLOOR {
            s = 1.0;
            degenerate[i] = true;
        }
        mean[i] = m;
        std[i] = s;
    }
    StandardizeStats {
        mean,
        std,
        degenerate,
    }
}

/// Transform a series by given statistics: (x - mean) / std per channel.
pub fn apply_standardize(ts: &TimeSeries, stats: &StandardizeStats) -> TimeSeries {
    let mut values = ts.values.clone();
    for (i, mut row) in values.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| (v - stats.mean[i]) / stats.std[i]);
    }
    TimeSeries {
        values,
        channel_names: ts.channel_names.clone(),
        sample_index_origin: ts.sample_index_origin,
    }
}

/// Invert [`apply_standardize`].
pub fn unstandardize(ts: &TimeSeries, stats: &StandardizeStats) -> TimeSeries {
    let mut values = ts.values.clone();
    for (i, mut row) in values.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v * stats.std[i] + stats.mean[i]);
    }
    TimeSeries {
        values,
        channel_names: ts.channel_names.clone(),
        sample_index_origin: ts.sample_index_origin,
    }
}

/// Split a series chronologically into train / validation / test segments.
///
/// The training portion is the first `floor(T * train_frac)` samples; the
/// validation segment is its final `floor(train_total * val_frac_of_train)`
/// samples. The test segment is everything after the training portion.
/// Concatenating train‖val‖test reproduces the input.
pub fn chrono_split(
    ts: &TimeSeries,
    train_frac: f64,
    val_frac_of_train: f64,
) -> Result<(TimeSeries, TimeSeries, TimeSeries)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(StricError::config(format!(
            "train_frac must be in (0, 1), got {train_frac}"
        )));
    }
    if !(0.0..1.0).contains(&val_frac_of_train) {
        return Err(StricError::config(format!(
            "val_frac_of_train must be in [0, 1), got {val_frac_of_train}"
        )));
    }
    let t = ts.len();
    let train_total = (t as f64 * train_frac).floor() as usize;
    let val_len = (train_total as f64 * val_frac_of_train).floor() as usize;
    let train_len = train_total - val_len;
    let test_len = t - train_total;
    if train_len == 0 || test_len == 0 || (val_frac_of_train > 0.0 && val_len == 0) {
        return Err(StricError::data(format!(
            "split produced an empty segment (train {train_len}, val {val_len}, test {test_len})"
        )));
    }
    let segment = |start: usize, len: usize| TimeSeries {
        values: ts.values.slice(s![.., start..start + len]).to_owned(),
        channel_names: ts.channel_names.clone(),
        sample_index_origin: ts.sample_index_origin + start,
    };
    Ok((
        segment(0, train_len),
        segment(train_len, val_len),
        segment(train_total, test_len),
    ))
}

/// Iterator over supervised (past, future) window pairs.
///
/// Pair `i` covers past columns `i..i+n_p` and future columns
/// `i+n_p..i+n_p+n_f`; every future index is strictly greater than every
/// past index, so no leakage is possible by construction.
pub struct WindowIter<'a> {
    values: &'a Array2<f64>,
    spec: WindowSpec,
    next: usize,
    count: usize,
}

impl<'a> Iterator for WindowIter<'a> {
    type Item = (ArrayView2<'a, f64>, ArrayView2<'a, f64>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let i = self.next;
        self.next += 1;
        let past = self.values.slice(s![.., i..i + self.spec.n_p]);
        let future = self
            .values
            .slice(s![.., i + self.spec.n_p..i + self.spec.n_p + self.spec.n_f]);
        Some((past, future))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rem = self.count - self.next;
        (rem, Some(rem))
    }
}

/// Yield the `T - n_p - n_f + 1` supervised window pairs of a series.
pub fn supervised_windows<'a>(ts: &'a TimeSeries, spec: &WindowSpec) -> Result<WindowIter<'a>> {
    let needed = spec.n_p + spec.n_f;
    if ts.len() < needed {
        return Err(StricError::data(format!(
            "series of length {} too short for windows of n_p={} + n_f={}",
            ts.len(),
            spec.n_p,
            spec.n_f
        )));
    }
    Ok(WindowIter {
        values: &ts.values,
        spec: *spec,
        next: 0,
        count: ts.len() - needed + 1,
    })
}

/// Number of supervised windows available in a segment of length `t`.
pub fn window_count(t: usize, spec: &WindowSpec) -> usize {
    t.saturating_sub(spec.n_p + spec.n_f - 1)
}

/// Format a float with 17 significant digits (exact f64 round trip).
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write a series as CSV: header row of channel names, one row per timestep.
pub fn save_csv(ts: &TimeSeries, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&ts.channel_names.join(","));
    out.push('\n');
    for t in 0..ts.len() {
        for (i, _) in ts.channel_names.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", format_f64(ts.values[[i, t]]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a series from CSV (inverse of [`save_csv`]).
///
/// Ragged rows and non-numeric or non-finite cells are rejected with the
/// offending row (1-based, header excluded) and column named.
pub fn load_csv(path: &Path) -> Result<TimeSeries> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text).map_err(|e| match e {
        StricError::Data(msg) => StricError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub(crate) fn parse_csv(text: &str) -> Result<TimeSeries> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| StricError::data("empty file"))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let n = names.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (row_idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n {
            return Err(StricError::data(format!(
                "row {}: expected {} cells, found {}",
                row_idx + 1,
                n,
                cells.len()
            )));
        }
        let mut row = Vec::with_capacity(n);
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                StricError::data(format!(
                    "row {}, column '{}': cannot parse '{}' as a number",
                    row_idx + 1,
                    names[col],
                    cell.trim()
                ))
            })?;
            if !v.is_finite() {
                return Err(StricError::data(format!(
                    "row {}, column '{}': non-finite value '{}'",
                    row_idx + 1,
                    names[col],
                    cell.trim()
                )));
            }
            row.push(v);
        }
        columns.push(row);
    }
    if columns.is_empty() {
        return Err(StricError::data("file contains no data rows"));
    }
    let t = columns.len();
    let mut values = Array2::zeros((n, t));
    for (tt, row) in columns.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            values[[i, tt]] = *v;
        }
    }
    TimeSeries::new(values, names)
}
