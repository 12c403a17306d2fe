// SPDX-License-Identifier: Apache-2.0

//! Satellite image time-series preparation: outlier filtering, gap filling,
//! temporal resampling and rolling-median smoothing.
//!
//! Points are never dropped by the filters; only their validity changes.
//! Invalid values are never read, so any number may sit behind an invalid
//! flag without affecting results.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::Day;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Observed,
    Filled,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Observed => "observed",
            Provenance::Filled => "filled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub times: Vec<Day>,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub provenance: Vec<Provenance>,
}

impl TimeSeries {
    pub fn new(times: Vec<Day>, values: Vec<f64>, valid: Vec<bool>) -> Result<TimeSeries> {
        let n = times.len();
        let provenance = vec![Provenance::Observed; n];
        let ts = TimeSeries { times, values, valid, provenance };
        ts.validate()?;
        Ok(ts)
    }

    /// All points valid and observed.
    pub fn from_points(points: &[(Day, f64)]) -> Result<TimeSeries> {
        TimeSeries::new(
            points.iter().map(|p| p.0).collect(),
            points.iter().map(|p| p.1).collect(),
            vec![true; points.len()],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.values.len() != n || self.valid.len() != n || self.provenance.len() != n {
            return Err(Error::InvalidArgument("time-series arrays differ in length".into()));
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("time-series times must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid[i]).collect()
    }

    /// `(day, value)` of valid points.
    pub fn valid_points(&self) -> Vec<(Day, f64)> {
        self.valid_indices().into_iter().map(|i| (self.times[i], self.values[i])).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("date,value,valid,provenance\n");
        for i in 0..self.len() {
            let v = if self.valid[i] { format!("{}", self.values[i]) } else { String::new() };
            let _ = writeln!(s, "{},{},{},{}", self.times[i], v, self.valid[i] as u8, self.provenance[i].as_str());
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<TimeSeries> {
        let mut ts = TimeSeries { times: vec![], values: vec![], valid: vec![], provenance: vec![] };
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("series line {}: expected 4 fields", n + 1)));
            }
            let valid = match f[2].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(Error::Format(format!("series line {}: bad valid flag '{other}'", n + 1))),
            };
            let value = if f[1].trim().is_empty() {
                f64::NAN
            } else {
                f[1].trim().parse().map_err(|_| Error::Format(format!("series line {}: bad value", n + 1)))?
            };
            let prov = match f[3].trim() {
                "observed" => Provenance::Observed,
                "filled" => Provenance::Filled,
                other => return Err(Error::Format(format!("series line {}: bad provenance '{other}'", n + 1))),
            };
            ts.times.push(f[0].parse()?);
            ts.values.push(value);
            ts.valid.push(valid && value.is_finite());
            ts.provenance.push(prov);
        }
        ts.validate()?;
        Ok(ts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Linear,
    /// Natural cubic spline through the valid points.
    Cubic,
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Interpolation::Linear),
            "cubic" | "bicubic" | "spline" => Ok(Interpolation::Cubic),
            _ => Err(Error::InvalidArgument(format!("unknown interpolation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Mean,
    Median,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stages {
    pub filter: bool,
    pub interpolate: bool,
    pub resample: bool,
    pub smooth: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages { filter: true, interpolate: true, resample: true, smooth: true }
    }
}

impl Stages {
    pub const NONE: Stages = Stages { filter: false, interpolate: false, resample: false, smooth: false };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub value_min: f64,
    pub value_max: f64,
    /// Maximum plausible absolute change per day.
    pub spike_threshold: Option<f64>,
    pub interpolation: Interpolation,
    pub step_days: i32,
    pub aggregator: Aggregator,
    /// Fill empty resampling windows by linear interpolation at the window start.
    pub fill_empty_windows: bool,
    pub window_points: usize,
    pub stages: Stages,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            value_min: -1.0,
            value_max: 1.0,
            spike_threshold: None,
            interpolation: Interpolation::Linear,
            step_days: 10,
            aggregator: Aggregator::Mean,
            fill_empty_windows: true,
            window_points: 3,
            stages: Stages::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.value_min < self.value_max) {
            return Err(Error::Config("value_min must be below value_max".into()));
        }
        if self.window_points == 0 || self.window_points.is_multiple_of(2) {
            return Err(Error::Config(format!("window_points must be odd and >= 1, got {}", self.window_points)));
        }
        if self.step_days < 1 {
            return Err(Error::Config("step_days must be >= 1".into()));
        }
        if self.spike_threshold.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("spike_threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Invalidate out-of-range points and, when a spike threshold is set, points
/// whose rate of change to both valid neighbours exceeds it.
pub fn filter_outliers(ts: &TimeSeries, cfg: &PipelineConfig) -> TimeSeries {
    let mut out = ts.clone();
    for i in 0..out.len() {
        if out.valid[i] {
            let v = out.values[i];
            if !v.is_finite() || v < cfg.value_min || v > cfg.value_max {
                out.valid[i] = false;
            }
        }
    }
    if let Some(thr) = cfg.spike_threshold {
        let idx = out.valid_indices();
        let rate = |a: usize, b: usize| (out.values[b] - out.values[a]).abs() / (out.times[b].0 - out.times[a].0) as f64;
        let spikes: Vec<usize> = idx
            .windows(3)
            .filter(|w| rate(w[0], w[1]) > thr && rate(w[1], w[2]) > thr)
            .map(|w| w[1])
            .collect();
        for i in spikes {
            out.valid[i] = false;
        }
    }
    out
}

/// Natural cubic spline through `(xs, ys)`; returns the second derivatives.
fn natural_spline_moments(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // tridiagonal system for interior moments (Thomas algorithm)
    let k = n - 2;
    let mut a = vec![0.0; k];
    let mut b = vec![0.0; k];
    let mut c = vec![0.0; k];
    let mut d = vec![0.0; k];
    for i in 1..n - 1 {
        let h0 = xs[i] - xs[i - 1];
        let h1 = xs[i + 1] - xs[i];
        a[i - 1] = h0;
        b[i - 1] = 2.0 * (h0 + h1);
        c[i - 1] = h1;
        d[i - 1] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
    }
    for i in 1..k {
        let w = a[i] / b[i - 1];
        b[i] -= w * c[i - 1];
        d[i] -= w * d[i - 1];
    }
    let mut sol = vec![0.0; k];
    sol[k - 1] = d[k - 1] / b[k - 1];
    for i in (0..k - 1).rev() {
        sol[i] = (d[i] - c[i] * sol[i + 1]) / b[i];
    }
    m[1..n - 1].copy_from_slice(&sol);
    m
}

fn spline_eval(xs: &[f64], ys: &[f64], m: &[f64], j: usize, x: f64) -> f64 {
    let h = xs[j + 1] - xs[j];
    let a = (xs[j + 1] - x) / h;
    let b = (x - xs[j]) / h;
    a * ys[j] + b * ys[j + 1] + ((a * a * a - a) * m[j] + (b * b * b - b) * m[j + 1]) * h * h / 6.0
}

/// Fill invalid points that lie strictly between the first and last valid
/// point. Observed points pass through unchanged; filled points are flagged.
pub fn interpolate(ts: &TimeSeries, method: Interpolation) -> Result<TimeSeries> {
    let need = match method {
        Interpolation::Linear => 2,
        Interpolation::Cubic => 4,
    };
    let idx = ts.valid_indices();
    if idx.len() < need {
        return Err(Error::InsufficientPoints { need, have: idx.len() });
    }
    let xs: Vec<f64> = idx.iter().map(|&i| ts.times[i].0 as f64).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| ts.values[i]).collect();
    let moments = match method {
        Interpolation::Cubic => natural_spline_moments(&xs, &ys),
        Interpolation::Linear => Vec::new(),
    };
    let mut out = ts.clone();
    let (first, last) = (idx[0], *idx.last().unwrap());
    let mut j = 0usize;
    for i in first..=last {
        if ts.valid[i] {
            continue;
        }
        let x = ts.times[i].0 as f64;
        while xs[j + 1] < x {
            j += 1;
        }
        out.values[i] = match method {
            Interpolation::Linear => {
                let t = (x - xs[j]) / (xs[j + 1] - xs[j]);
                ys[j] + t * (ys[j + 1] - ys[j])
            }
            Interpolation::Cubic => spline_eval(&xs, &ys, &moments, j, x),
        };
        out.valid[i] = true;
        out.provenance[i] = Provenance::Filled;
    }
    Ok(out)
}

fn aggregate(vals: &mut [f64], agg: Aggregator) -> f64 {
    match agg {
        Aggregator::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
        Aggregator::Min => vals.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregator::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregator::Median => median_in_place(vals),
    }
}

pub(crate) fn median_in_place(vals: &mut [f64]) -> f64 {
    vals.sort_by(|a, b| a.total_cmp(b));
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Regular sampling at `start, start + step, ...` up to the last time. Each
/// sample aggregates the valid points of `[t, t + step)`; an empty window is
/// linearly interpolated at `t` when `fill_empty` is set and `t` lies inside
/// the valid span, otherwise the sample is invalid.
pub fn resample_series(ts: &TimeSeries, step_days: i32, agg: Aggregator, fill_empty: bool) -> Result<TimeSeries> {
    if ts.is_empty() {
        return Err(Error::EmptySeries);
    }
    if step_days < 1 {
        return Err(Error::InvalidArgument("step_days must be >= 1".into()));
    }
    let start = ts.times[0];
    let end = *ts.times.last().unwrap();
    let count = ((end.0 - start.0) / step_days) as usize + 1;
    let idx = ts.valid_indices();
    let mut out = TimeSeries {
        times: Vec::with_capacity(count),
        values: Vec::with_capacity(count),
        valid: Vec::with_capacity(count),
        provenance: Vec::with_capacity(count),
    };
    let mut cursor = 0usize;
    let mut buf = Vec::new();
    for k in 0..count {
        let t = start.plus(k as i32 * step_days);
        let t_end = t.plus(step_days);
        buf.clear();
        let mut filled = false;
        while cursor < idx.len() && ts.times[idx[cursor]] < t {
            cursor += 1;
        }
        let mut c = cursor;
        while c < idx.len() && ts.times[idx[c]] < t_end {
            buf.push(ts.values[idx[c]]);
            filled |= ts.provenance[idx[c]] == Provenance::Filled;
            c += 1;
        }
        out.times.push(t);
        if !buf.is_empty() {
            out.values.push(aggregate(&mut buf, agg));
            out.valid.push(true);
            out.provenance.push(if filled { Provenance::Filled } else { Provenance::Observed });
            continue;
        }
        // empty window: cursor now points at the first valid point >= t_end
        let interp = (fill_empty && cursor > 0 && cursor < idx.len()).then(|| {
            let (a, b) = (idx[cursor - 1], idx[cursor]);
            let (xa, xb) = (ts.times[a].0 as f64, ts.times[b].0 as f64);
            let w = (t.0 as f64 - xa) / (xb - xa);
            ts.values[a] + w * (ts.values[b] - ts.values[a])
        });
        match interp {
            Some(v) => {
                out.values.push(v);
                out.valid.push(true);
                out.provenance.push(Provenance::Filled);
            }
            None => {
                out.values.push(f64::NAN);
                out.valid.push(false);
                out.provenance.push(Provenance::Observed);
            }
        }
    }
    Ok(out)
}

/// Centered rolling median over the valid points. Points whose full window
/// does not fit keep their value; invalid points are untouched.
pub fn smooth(ts: &TimeSeries, window_points: usize) -> Result<TimeSeries> {
    if window_points == 0 || window_points.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("window must be odd, got {window_points}")));
    }
    let half = window_points / 2;
    let idx = ts.valid_indices();
    let mut out = ts.clone();
    if idx.len() < window_points {
        return Ok(out);
    }
    let mut buf = vec![0.0; window_points];
    for k in half..idx.len() - half {
        for (slot, &i) in buf.iter_mut().zip(&idx[k - half..=k + half]) {
            *slot = ts.values[i];
        }
        out.values[idx[k]] = median_in_place(&mut buf);
    }
    Ok(out)
}

/// filter → interpolate → resample → smooth, honouring the stage toggles.
pub fn prepare(ts: &TimeSeries, cfg: &PipelineConfig) -> Result<TimeSeries> {
    cfg.validate()?;
    ts.validate()?;
    let mut cur = ts.clone();
    if cfg.stages.filter {
        cur = filter_outliers(&cur, cfg);
    }
    if cfg.stages.interpolate {
        cur = interpolate(&cur, cfg.interpolation)?;
    }
    if cfg.stages.resample {
        cur = resample_series(&cur, cfg.step_days, cfg.aggregator, cfg.fill_empty_windows)?;
    }
    if cfg.stages.smooth {
        cur = smooth(&cur, cfg.window_points)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(vals: &[f64]) -> TimeSeries {
        TimeSeries::from_points(&vals.iter().enumerate().map(|(i, &v)| (Day(i as i32), v)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn out_of_range_invalidated() {
        let ts = series(&[0.2, 1.7, 0.3]);
        let out = filter_outliers(&ts, &PipelineConfig::default());
        assert_eq!(out.valid, vec![true, false, true]);
        assert_eq!(out.times, ts.times);
        let smooth_series = series(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(filter_outliers(&smooth_series, &PipelineConfig::default()), smooth_series);
    }

    #[test]
    fn spike_removed_neighbours_kept() {
        let ts = series(&[0.7, 0.7, 0.7, 0.2, 0.7, 0.7, 0.7]);
        let cfg = PipelineConfig { spike_threshold: Some(0.1), ..Default::default() };
        let out = filter_outliers(&ts, &cfg);
        assert_eq!(out.valid, vec![true, true, true, false, true, true, true]);
    }

    #[test]
    fn linear_midpoint_fill() {
        let ts = TimeSeries::new(vec![Day(0), Day(5), Day(10)], vec![1.0, -99.0, 3.0], vec![true, false, true]).unwrap();
        let out = interpolate(&ts, Interpolation::Linear).unwrap();
        assert_eq!(out.values[1], 2.0);
        assert!(out.valid[1]);
        assert_eq!(out.provenance[1], Provenance::Filled);
        let full = series(&[0.1, 0.5, 0.2]);
        assert_eq!(interpolate(&full, Interpolation::Linear).unwrap(), full);
        let one = TimeSeries::new(vec![Day(0), Day(1)], vec![1.0, 0.0], vec![true, false]).unwrap();
        assert!(matches!(interpolate(&one, Interpolation::Linear), Err(Error::InsufficientPoints { need: 2, have: 1 })));
    }

    #[test]
    fn no_extrapolation() {
        let ts = TimeSeries::new(
            (0..5).map(Day).collect(),
            vec![9.0, 1.0, 9.0, 3.0, 9.0],
            vec![false, true, false, true, false],
        )
        .unwrap();
        let out = interpolate(&ts, Interpolation::Linear).unwrap();
        assert_eq!(out.valid, vec![false, true, true, true, false]);
        assert_eq!(out.values[2], 2.0);
    }

    /// Reference natural cubic spline: solve the full 4(n-1) coefficient
    /// system by Gaussian elimination with partial pivoting.
    fn reference_spline(xs: &[f64], ys: &[f64], x: f64) -> f64 {
        let n = xs.len();
        let m = 4 * (n - 1);
        let mut a = vec![vec![0.0; m + 1]; m];
        let mut row = 0;
        // piece j: c0 + c1 (x - xj) + c2 (x - xj)^2 + c3 (x - xj)^3
        for j in 0..n - 1 {
            let h = xs[j + 1] - xs[j];
            a[row][4 * j] = 1.0;
            a[row][m] = ys[j];
            row += 1;
            a[row][4 * j] = 1.0;
            a[row][4 * j + 1] = h;
            a[row][4 * j + 2] = h * h;
            a[row][4 * j + 3] = h * h * h;
            a[row][m] = ys[j + 1];
            row += 1;
        }
        for j in 0..n - 2 {
            let h = xs[j + 1] - xs[j];
            a[row][4 * j + 1] = 1.0;
            a[row][4 * j + 2] = 2.0 * h;
            a[row][4 * j + 3] = 3.0 * h * h;
            a[row][4 * (j + 1) + 1] = -1.0;
            row += 1;
            a[row][4 * j + 2] = 2.0;
            a[row][4 * j + 3] = 6.0 * h;
            a[row][4 * (j + 1) + 2] = -2.0;
            row += 1;
        }
        a[row][2] = 2.0;
        row += 1;
        let h = xs[n - 1] - xs[n - 2];
        a[row][4 * (n - 2) + 2] = 2.0;
        a[row][4 * (n - 2) + 3] = 6.0 * h;
        for col in 0..m {
            let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..m {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    if f != 0.0 {
                        let pivot_row = a[col].clone();
                        for (x, p) in a[r].iter_mut().zip(&pivot_row).skip(col) {
                            *x -= f * p;
                        }
                    }
                }
            }
        }
        let coef: Vec<f64> = (0..m).map(|i| a[i][m] / a[i][i]).collect();
        let j = (0..n - 1).find(|&j| x <= xs[j + 1]).unwrap();
        let d = x - xs[j];
        coef[4 * j] + coef[4 * j + 1] * d + coef[4 * j + 2] * d * d + coef[4 * j + 3] * d * d * d
    }

    #[test]
    fn cubic_matches_reference_spline() {
        let times: Vec<Day> = [0, 3, 7, 12, 15, 20, 26, 30].into_iter().map(Day).collect();
        let values = vec![0.2, 0.0, 0.35, 0.0, 0.61, 0.0, 0.44, 0.3];
        let valid = vec![true, false, true, false, true, false, true, true];
        let ts = TimeSeries::new(times.clone(), values.clone(), valid.clone()).unwrap();
        let out = interpolate(&ts, Interpolation::Cubic).unwrap();
        let xs: Vec<f64> = times.iter().zip(&valid).filter(|(_, &v)| v).map(|(t, _)| t.0 as f64).collect();
        let ys: Vec<f64> = values.iter().zip(&valid).filter(|(_, &v)| v).map(|(v, _)| *v).collect();
        assert_eq!(xs.len(), 5);
        for i in [1, 3, 5] {
            let r = reference_spline(&xs, &ys, times[i].0 as f64);
            assert!((out.values[i] - r).abs() < 1e-9, "{} vs {}", out.values[i], r);
        }
        for i in [0, 2, 4, 6, 7] {
            assert_eq!(out.values[i].to_bits(), values[i].to_bits());
        }
    }

    #[test]
    fn resample_count_and_windows() {
        let daily = series(&(0..=30).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let out = resample_series(&daily, 10, Aggregator::Mean, true).unwrap();
        assert_eq!(out.times, vec![Day(0), Day(10), Day(20), Day(30)]);
        let constant = series(&[0.4; 17]);
        let out = resample_series(&constant, 3, Aggregator::Mean, true).unwrap();
        assert!(out.values.iter().all(|&v| (v - 0.4).abs() < 1e-15));

        // 5-day series to 10 days: brute-force window means
        let pts: Vec<(Day, f64)> = (0..9).map(|k| (Day(5 * k), (k * k) as f64 * 0.01)).collect();
        let ts = TimeSeries::from_points(&pts).unwrap();
        let out = resample_series(&ts, 10, Aggregator::Mean, false).unwrap();
        for (k, t) in out.times.iter().enumerate() {
            let w: Vec<f64> = pts.iter().filter(|(d, _)| d.0 >= t.0 && d.0 < t.0 + 10).map(|p| p.1).collect();
            let m = w.iter().sum::<f64>() / w.len() as f64;
            assert_eq!(out.values[k], m);
        }
        assert!(matches!(
            resample_series(&TimeSeries::from_points(&[]).unwrap(), 5, Aggregator::Mean, true),
            Err(Error::EmptySeries)
        ));
    }

    #[test]
    fn resample_empty_window_interpolates() {
        let ts = TimeSeries::from_points(&[(Day(0), 0.0), (Day(20), 2.0)]).unwrap();
        let out = resample_series(&ts, 5, Aggregator::Mean, true).unwrap();
        assert_eq!(out.values, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(out.provenance[1], Provenance::Filled);
        let out = resample_series(&ts, 5, Aggregator::Mean, false).unwrap();
        assert_eq!(out.valid, vec![true, false, false, false, true]);
    }

    #[test]
    fn rolling_median_examples() {
        let out = smooth(&series(&[1.0, 9.0, 1.0, 1.0]), 3).unwrap();
        assert_eq!(out.values, vec![1.0, 1.0, 1.0, 1.0]);
        let c = series(&[0.3; 8]);
        assert_eq!(smooth(&c, 5).unwrap(), c);
        let r = series(&[0.1, 0.9, 0.3, 0.2]);
        assert_eq!(smooth(&r, 1).unwrap(), r);
        assert!(smooth(&r, 2).is_err());
    }

    #[test]
    fn prepare_identity_and_order() {
        let ts = TimeSeries::new((0..6).map(Day).collect(), vec![0.1, 5.0, 0.3, 0.2, 0.9, 0.4], vec![true, true, false, true, true, true]).unwrap();
        let cfg = PipelineConfig { stages: Stages::NONE, ..Default::default() };
        assert_eq!(prepare(&ts, &cfg).unwrap(), ts);
        let bad = PipelineConfig { window_points: 4, ..Default::default() };
        assert!(prepare(&ts, &bad).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let ts = TimeSeries::new(vec![Day(18000), Day(18005)], vec![0.25, f64::NAN], vec![true, false]).unwrap();
        let text = ts.to_csv();
        assert!(text.starts_with("date,value,valid,provenance\n2019-04-14,0.25,1,observed"));
        let back = TimeSeries::from_csv(&text).unwrap();
        assert_eq!(back.values[0], 0.25);
        assert_eq!(back.valid, vec![true, false]);
    }

    fn arb_series() -> impl Strategy<Value = TimeSeries> {
        proptest::collection::vec((1i32..6, -1.2f64..1.2, proptest::bool::weighted(0.7)), 6..40).prop_map(|pts| {
            let mut t = 0;
            let mut times = vec![];
            let mut values = vec![];
            let mut valid = vec![];
            for (dt, v, ok) in pts {
                t += dt;
                times.push(Day(t));
                values.push(v);
                valid.push(ok);
            }
            TimeSeries::new(times, values, valid).unwrap()
        })
    }

    proptest! {
        #[test]
        fn observed_points_survive_filtering_and_filling(ts in arb_series(), cubic in any::<bool>()) {
            let cfg = PipelineConfig {
                spike_threshold: Some(0.3),
                interpolation: if cubic { Interpolation::Cubic } else { Interpolation::Linear },
                stages: Stages { filter: true, interpolate: true, resample: false, smooth: false },
                ..Default::default()
            };
            let filtered = filter_outliers(&ts, &cfg);
            prop_assert!(filtered.n_valid() <= ts.n_valid());
            if let Ok(out) = prepare(&ts, &cfg) {
                prop_assert!(out.n_valid() >= filtered.n_valid());
                for i in 0..ts.len() {
                    if filtered.valid[i] {
                        prop_assert_eq!(out.values[i].to_bits(), ts.values[i].to_bits());
                        prop_assert_eq!(out.provenance[i], Provenance::Observed);
                    }
                }
            }
        }

        #[test]
        fn invalid_values_do_not_matter(ts in arb_series(), junk in -1e6f64..1e6) {
            let cfg = PipelineConfig { spike_threshold: Some(0.2), step_days: 4, ..Default::default() };
            let mut other = ts.clone();
            for i in 0..other.len() {
                if !other.valid[i] { other.values[i] = junk; }
            }
            let a = prepare(&ts, &cfg);
            let b = prepare(&other, &cfg);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(&a.valid, &b.valid);
                    for i in 0..a.len() {
                        if a.valid[i] { prop_assert_eq!(a.values[i].to_bits(), b.values[i].to_bits()); }
                    }
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "one side failed"),
            }
        }

        #[test]
        fn smoothing_stays_within_neighbourhood(vals in proptest::collection::vec(-1.0f64..1.0, 3..30)) {
            let ts = series(&vals);
            let out = smooth(&ts, 3).unwrap();
            prop_assert_eq!(&out.valid, &ts.valid);
            prop_assert_eq!(out.values[0], vals[0]);
            prop_assert_eq!(out.values[vals.len() - 1], vals[vals.len() - 1]);
            for i in 1..vals.len() - 1 {
                let lo = vals[i - 1].min(vals[i]).min(vals[i + 1]);
                let hi = vals[i - 1].max(vals[i]).max(vals[i + 1]);
                prop_assert!(out.values[i] >= lo && out.values[i] <= hi);
            }
        }

        #[test]
        fn resampling_at_native_step_is_identity(n in 2usize..30, step in 1i32..12, v in proptest::collection::vec(-1.0f64..1.0, 30)) {
            let pts: Vec<(Day, f64)> = (0..n).map(|k| (Day(100 + k as i32 * step), v[k])).collect();
            let ts = TimeSeries::from_points(&pts).unwrap();
            let out = resample_series(&ts, step, Aggregator::Mean, true).unwrap();
            prop_assert_eq!(out.times, ts.times);
            prop_assert_eq!(out.values, ts.values);
        }
    }
}
