// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::phenology::{phenology, PHENOLOGY_COLUMNS};
use super::temporal_composite_with;
use crate::error::{Error, Result};
use crate::grid::{BandId, CubeArray};
use crate::masking::{DEFAULT_CLOUD_BUFFER_M, DEFAULT_INWARD_BUFFER_M};
use crate::parcels::{LabelRaster, BACKGROUND};
use crate::sits::TimeSeries;
use crate::time::{Day, Period, SeasonScheme};
use crate::zonal::{zonal_stats_grouped, StatRequest, Statistic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLevel {
    Pixel,
    Parcel,
}

impl std::str::FromStr for FeatureLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<FeatureLevel> {
        match s {
            "pixel" => Ok(FeatureLevel::Pixel),
            "parcel" => Ok(FeatureLevel::Parcel),
            _ => Err(Error::InvalidArgument(format!("unknown feature level '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub bands: Vec<BandId>,
    pub period: Period,
    pub seasons: SeasonScheme,
    pub stats: Vec<Statistic>,
    pub phenology: bool,
    pub phenology_band: BandId,
    pub amplitude_fraction: f64,
    /// Parcel level only.
    pub buffer_inward_m: f64,
    /// Parcel level only.
    pub cloud_buffer_m: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            bands: vec![BandId::NDVI],
            period: Period::Month,
            seasons: SeasonScheme::default(),
            stats: vec![Statistic::Mean],
            phenology: true,
            phenology_band: BandId::NDVI,
            amplitude_fraction: 0.5,
            buffer_inward_m: DEFAULT_INWARD_BUFFER_M,
            cloud_buffer_m: DEFAULT_CLOUD_BUFFER_M,
        }
    }
}

impl FeatureSpec {
    fn sorted_bands(&self) -> Vec<BandId> {
        let mut b = self.bands.clone();
        b.sort();
        b.dedup();
        b
    }

    fn sorted_stats(&self) -> Vec<Statistic> {
        let mut s = self.stats.clone();
        s.sort();
        s.dedup();
        s
    }
}

/// Fixed-width feature matrix; `missing` marks cells with no value (stored as NaN).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpace {
    pub level: FeatureLevel,
    /// Parcel ids, or `row * width + col` for pixels.
    pub keys: Vec<i64>,
    pub names: Vec<String>,
    pub values: Array2<f64>,
    pub missing: Array2<bool>,
}

impl FeatureSpace {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn row(&self, key: i64) -> Option<usize> {
        self.keys.binary_search(&key).ok()
    }

    /// Header `key, features..., missing_<feature>...`; missing values are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("key");
        for n in &self.names {
            let _ = write!(s, ",{n}");
        }
        for n in &self.names {
            let _ = write!(s, ",missing_{n}");
        }
        s.push('\n');
        for (r, key) in self.keys.iter().enumerate() {
            let _ = write!(s, "{key}");
            for c in 0..self.names.len() {
                if self.missing[(r, c)] {
                    s.push(',');
                } else {
                    let _ = write!(s, ",{}", self.values[(r, c)]);
                }
            }
            for c in 0..self.names.len() {
                s.push_str(if self.missing[(r, c)] { ",1" } else { ",0" });
            }
            s.push('\n');
        }
        s
    }
}

/// Column names: band, period, statistic in that nesting, phenology last.
fn column_names(spec: &FeatureSpec, periods: &[Day]) -> Vec<String> {
    let mut names = Vec::new();
    for b in spec.sorted_bands() {
        for &p in periods {
            for st in spec.sorted_stats() {
                names.push(format!("{b}_{}_{st}", spec.period.label(p)));
            }
        }
    }
    if spec.phenology {
        for m in PHENOLOGY_COLUMNS {
            names.push(format!("{}_{m}", spec.phenology_band));
        }
    }
    names
}

/// Assemble a feature space from `cube`. Parcel rows need `labels` and come
/// from grouped zonal statistics; pixel rows use per-pixel composites and
/// cover every pixel, or only parcel pixels when `labels` is given.
pub fn build_feature_space(level: FeatureLevel, spec: &FeatureSpec, cube: &CubeArray, labels: Option<&LabelRaster>) -> Result<FeatureSpace> {
    if spec.bands.is_empty() || spec.stats.is_empty() {
        return Err(Error::InvalidArgument("feature spec needs bands and statistics".into()));
    }
    let mut needed = spec.sorted_bands();
    if spec.phenology {
        needed.push(spec.phenology_band);
    }
    for b in &needed {
        if cube.band_index(*b).is_none() {
            return Err(Error::InvalidArgument(format!("band {b} is not in the cube")));
        }
    }
    let (Some(&first), Some(&last)) = (cube.times.first(), cube.times.last()) else {
        return Err(Error::Precondition("feature space of an empty cube".into()));
    };
    let periods = spec.period.enumerate(first, last, &spec.seasons);
    let names = column_names(spec, &periods);
    match level {
        FeatureLevel::Parcel => {
            let labels = labels.ok_or_else(|| Error::InvalidArgument("parcel features need a label raster".into()))?;
            parcel_rows(spec, cube, labels, names)
        }
        FeatureLevel::Pixel => pixel_rows(spec, cube, labels, &periods, names),
    }
}

fn parcel_rows(spec: &FeatureSpec, cube: &CubeArray, labels: &LabelRaster, names: Vec<String>) -> Result<FeatureSpace> {
    let req = StatRequest {
        statistics: spec.sorted_stats(),
        period: spec.period,
        seasons: spec.seasons,
        bands: spec.sorted_bands(),
        buffer_inward_m: spec.buffer_inward_m,
        cloud_buffer_m: spec.cloud_buffer_m,
        max_cloud_cover_fraction: 1.0,
    };
    let table = zonal_stats_grouped(cube, labels, &req)?;
    let keys: Vec<i64> = labels.ids().into_iter().map(i64::from).collect();
    let row_of: BTreeMap<i64, usize> = keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let col_of: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut values = Array2::from_elem((keys.len(), names.len()), f64::NAN);
    let mut missing = Array2::from_elem((keys.len(), names.len()), true);
    for rec in &table.records {
        let Some(v) = rec.value else { continue };
        let name = format!("{}_{}_{}", rec.band, spec.period.label(rec.period_start), rec.statistic);
        if let (Some(&r), Some(&c)) = (row_of.get(&(rec.parcel_id as i64)), col_of.get(name.as_str())) {
            values[(r, c)] = v;
            missing[(r, c)] = false;
        }
    }
    if spec.phenology {
        let daily = StatRequest { statistics: vec![Statistic::Mean], period: Period::Day, bands: vec![spec.phenology_band], ..req };
        let series = zonal_stats_grouped(cube, labels, &daily)?;
        let mut per: BTreeMap<i32, Vec<(Day, f64)>> = BTreeMap::new();
        for rec in &series.records {
            if let Some(v) = rec.value {
                per.entry(rec.parcel_id).or_default().push((rec.period_start, v));
            }
        }
        let c0 = names.len() - PHENOLOGY_COLUMNS.len();
        for (id, pts) in per {
            let Some(&r) = row_of.get(&(id as i64)) else { continue };
            write_phenology(&pts, spec.amplitude_fraction, &mut values, &mut missing, r, c0)?;
        }
    }
    Ok(FeatureSpace { level: FeatureLevel::Parcel, keys, names, values, missing })
}

fn write_phenology(pts: &[(Day, f64)], fraction: f64, values: &mut Array2<f64>, missing: &mut Array2<bool>, r: usize, c0: usize) -> Result<()> {
    let ts = TimeSeries::from_points(pts)?;
    match phenology(&ts, fraction) {
        Ok(m) => {
            for (k, v) in m.column_values().into_iter().enumerate() {
                if let Some(v) = v {
                    values[(r, c0 + k)] = v;
                    missing[(r, c0 + k)] = false;
                }
            }
            Ok(())
        }
        Err(Error::InsufficientPoints { .. }) => Ok(()),
        Err(e) => Err(e),
    }
}

fn pixel_rows(spec: &FeatureSpec, cube: &CubeArray, labels: Option<&LabelRaster>, periods: &[Day], names: Vec<String>) -> Result<FeatureSpace> {
    let (h, w) = (cube.grid.height, cube.grid.width);
    if let Some(l) = labels {
        if !l.grid.is_aligned(&cube.grid) {
            return Err(Error::GridMismatch("label raster is not on the cube grid".into()));
        }
    }
    let pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| labels.is_none_or(|l| l.labels[(y, x)] != BACKGROUND))
        .collect();
    let keys: Vec<i64> = pixels.iter().map(|&(y, x)| (y * w + x) as i64).collect();
    let mut values = Array2::from_elem((keys.len(), names.len()), f64::NAN);
    let mut missing = Array2::from_elem((keys.len(), names.len()), true);
    let bands = spec.sorted_bands();
    let stats = spec.sorted_stats();
    let per_band = periods.len() * stats.len();
    for (si, &st) in stats.iter().enumerate() {
        let comp = temporal_composite_with(cube, spec.period, &spec.seasons, st)?;
        for (ti, &t) in comp.times.iter().enumerate() {
            let Some(pi) = periods.iter().position(|&p| p == t) else { continue };
            for (bi, &b) in bands.iter().enumerate() {
                let cb = comp.band_index(b).unwrap();
                let c = bi * per_band + pi * stats.len() + si;
                for (r, &(y, x)) in pixels.iter().enumerate() {
                    if comp.valid[(ti, cb, y, x)] {
                        values[(r, c)] = comp.values[(ti, cb, y, x)] as f64;
                        missing[(r, c)] = false;
                    }
                }
            }
        }
    }
    if spec.phenology {
        let b = cube.band_index(spec.phenology_band).unwrap();
        let c0 = names.len() - PHENOLOGY_COLUMNS.len();
        for (r, &(y, x)) in pixels.iter().enumerate() {
            let pts: Vec<(Day, f64)> = (0..cube.times.len())
                .filter(|&t| cube.valid[(t, b, y, x)])
                .map(|t| (cube.times[t], cube.values[(t, b, y, x)] as f64))
                .collect();
            if pts.len() >= 4 {
                write_phenology(&pts, spec.amplitude_fraction, &mut values, &mut missing, r, c0)?;
            }
        }
    }
    Ok(FeatureSpace { level: FeatureLevel::Pixel, keys, names, values, missing })
}
