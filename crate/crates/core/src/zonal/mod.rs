// SPDX-License-Identifier: Apache-2.0

//! Zonal statistics of cube bands over parcels.
//!
//! Two engines produce the same table:
//!
//! * [`zonal_stats_grouped`] scans every cube slice once and accumulates into
//!   a flat per-label array (labels remapped to `0..P`), so the cost is
//!   proportional to the number of pixels, not to the number of parcels.
//! * [`zonal_stats_serial`] answers one parcel at a time: read the parcel's
//!   window from the cube, rasterize the parcel alone, aggregate.
//!
//! Both push pixel values into the accumulators in the same order (time, then
//! row, then column), which makes their results bit-identical. Overlapping
//! parcels are the one exception: the label raster gives a shared pixel to the
//! lowest id, while the serial engine counts it for every parcel covering it.

pub mod bench;

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{hex_prefix, BandId, CubeArray, CubeSource, GridSpec};
use crate::masking::{dilate_mask, erode_labels, PixelMask, SceneClass, DEFAULT_CLOUD_BUFFER_M, DEFAULT_INWARD_BUFFER_M};
use crate::parcels::{rasterize_window, LabelRaster, Parcel, BACKGROUND};
use crate::time::{Day, Period, SeasonScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    Median,
    /// Streaming P² estimate of the median; approximate.
    MedianP2,
    Min,
    Max,
    /// Population standard deviation.
    Std,
    Count,
    ValidFraction,
}

impl Statistic {
    pub const ALL: [Statistic; 8] = [
        Statistic::Mean,
        Statistic::Median,
        Statistic::MedianP2,
        Statistic::Min,
        Statistic::Max,
        Statistic::Std,
        Statistic::Count,
        Statistic::ValidFraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Median => "median",
            Statistic::MedianP2 => "median_p2",
            Statistic::Min => "min",
            Statistic::Max => "max",
            Statistic::Std => "std",
            Statistic::Count => "count",
            Statistic::ValidFraction => "valid_fraction",
        }
    }

    pub fn is_approximate(self) -> bool {
        self == Statistic::MedianP2
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Statistic> {
        Statistic::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown statistic '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatRequest {
    pub statistics: Vec<Statistic>,
    pub period: Period,
    pub seasons: SeasonScheme,
    pub bands: Vec<BandId>,
    pub buffer_inward_m: f64,
    pub cloud_buffer_m: f64,
    /// Scenes whose cloud cover exceeds this fraction are skipped.
    pub max_cloud_cover_fraction: f64,
}

impl Default for StatRequest {
    fn default() -> Self {
        StatRequest {
            statistics: vec![Statistic::Mean],
            period: Period::Month,
            seasons: SeasonScheme::default(),
            bands: vec![BandId::NDVI],
            buffer_inward_m: DEFAULT_INWARD_BUFFER_M,
            cloud_buffer_m: DEFAULT_CLOUD_BUFFER_M,
            max_cloud_cover_fraction: 1.0,
        }
    }
}

impl StatRequest {
    pub fn validate(&self) -> Result<()> {
        if self.statistics.is_empty() || self.bands.is_empty() {
            return Err(Error::InvalidArgument("request needs at least one statistic and one band".into()));
        }
        for (name, v) in [("buffer_inward_m", self.buffer_inward_m), ("cloud_buffer_m", self.cloud_buffer_m)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be a non-negative number")));
            }
        }
        if !(0.0..=1.0).contains(&self.max_cloud_cover_fraction) {
            return Err(Error::InvalidArgument("max_cloud_cover_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn unique_bands(&self) -> Vec<BandId> {
        let mut out: Vec<BandId> = Vec::new();
        for &b in &self.bands {
            if !out.contains(&b) {
                out.push(b);
            }
        }
        out
    }

    fn unique_stats(&self) -> Vec<Statistic> {
        self.statistics.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZonalRecord {
    pub parcel_id: i32,
    pub period_start: Day,
    pub band: BandId,
    pub statistic: Statistic,
    /// Absent when no valid pixel contributed.
    pub value: Option<f64>,
    pub n_valid_pixels: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableProvenance {
    pub request: StatRequest,
    pub cube_id: String,
    pub label_raster_id: String,
    pub engine: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZonalStatsTable {
    /// Sorted by parcel, period, band (request order), statistic.
    pub records: Vec<ZonalRecord>,
    pub provenance: TableProvenance,
}

impl ZonalStatsTable {
    pub fn get(&self, parcel_id: i32, period_start: Day, band: BandId, statistic: Statistic) -> Option<&ZonalRecord> {
        self.records
            .iter()
            .find(|r| r.parcel_id == parcel_id && r.period_start == period_start && r.band == band && r.statistic == statistic)
    }

    pub fn parcel_ids(&self) -> BTreeSet<i32> {
        self.records.iter().map(|r| r.parcel_id).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("parcel_id,period_start,band,statistic,value,n_valid_pixels\n");
        for r in &self.records {
            let v = r.value.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{}", r.parcel_id, r.period_start, r.band, r.statistic, v, r.n_valid_pixels);
        }
        s
    }

    /// Differences against `other`: record keys must match, min/max/count and
    /// pixel counts exactly, other values within `tol`.
    pub fn differences(&self, other: &ZonalStatsTable, tol: f64) -> Vec<String> {
        let mut out = Vec::new();
        if self.records.len() != other.records.len() {
            out.push(format!("record count {} vs {}", self.records.len(), other.records.len()));
        }
        for (a, b) in self.records.iter().zip(&other.records) {
            let key = |r: &ZonalRecord| (r.parcel_id, r.period_start, r.band, r.statistic);
            if key(a) != key(b) {
                out.push(format!("key {:?} vs {:?}", key(a), key(b)));
                continue;
            }
            if a.n_valid_pixels != b.n_valid_pixels {
                out.push(format!("{:?}: n_valid {} vs {}", key(a), a.n_valid_pixels, b.n_valid_pixels));
            }
            let exact = matches!(a.statistic, Statistic::Min | Statistic::Max | Statistic::Count);
            let same = match (a.value, b.value) {
                (None, None) => true,
                (Some(x), Some(y)) => if exact { x == y } else { (x - y).abs() <= tol },
                _ => false,
            };
            if !same {
                out.push(format!("{:?}: value {:?} vs {:?}", key(a), a.value, b.value));
            }
            if out.len() > 20 {
                break;
            }
        }
        out
    }
}

/// Running aggregates for one parcel: compensated sum, Welford moments, extrema.
#[derive(Debug, Clone, Copy)]
struct Acc {
    n: u64,
    sum: f64,
    comp: f64,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
}

impl Acc {
    const EMPTY: Acc = Acc { n: 0, sum: 0.0, comp: 0.0, mean: 0.0, m2: 0.0, min: f64::INFINITY, max: f64::NEG_INFINITY };

    #[inline]
    fn push(&mut self, v: f64) {
        self.n += 1;
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    /// Welford update; only needed for the standard deviation.
    #[inline]
    fn push_moments(&mut self, v: f64) {
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    fn mean(&self) -> f64 {
        (self.sum + self.comp) / self.n as f64
    }

    fn std(&self) -> f64 {
        (self.m2.max(0.0) / self.n as f64).sqrt()
    }
}

/// P² quantile estimator (Jain & Chlamtac) for the median.
#[derive(Debug, Clone)]
struct P2 {
    q: [f64; 5],
    n: [f64; 5],
    np: [f64; 5],
    count: usize,
}

impl P2 {
    const DN: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

    fn new() -> P2 {
        P2 { q: [0.0; 5], n: [1.0, 2.0, 3.0, 4.0, 5.0], np: [1.0, 2.0, 3.0, 4.0, 5.0], count: 0 }
    }

    fn push(&mut self, x: f64) {
        if self.count < 5 {
            self.q[self.count] = x;
            self.count += 1;
            if self.count == 5 {
                self.q.sort_by(|a, b| a.total_cmp(b));
            }
            return;
        }
        self.count += 1;
        let k = if x < self.q[0] {
            self.q[0] = x;
            0
        } else if x >= self.q[4] {
            self.q[4] = x;
            3
        } else {
            (0..4).find(|&i| x < self.q[i + 1]).unwrap()
        };
        for i in k + 1..5 {
            self.n[i] += 1.0;
        }
        for i in 0..5 {
            self.np[i] += P2::DN[i];
        }
        for i in 1..4 {
            let d = self.np[i] - self.n[i];
            if (d >= 1.0 && self.n[i + 1] - self.n[i] > 1.0) || (d <= -1.0 && self.n[i - 1] - self.n[i] < -1.0) {
                let s = d.signum();
                let (q0, q1, q2) = (self.q[i - 1], self.q[i], self.q[i + 1]);
                let (n0, n1, n2) = (self.n[i - 1], self.n[i], self.n[i + 1]);
                let para = q1 + s / (n2 - n0) * ((n1 - n0 + s) * (q2 - q1) / (n2 - n1) + (n2 - n1 - s) * (q1 - q0) / (n1 - n0));
                self.q[i] = if q0 < para && para < q2 {
                    para
                } else {
                    let j = if s > 0.0 { i + 1 } else { i - 1 };
                    q1 + s * (self.q[j] - q1) / (self.n[j] - n1)
                };
                self.n[i] += s;
            }
        }
    }

    fn estimate(&self) -> f64 {
        if self.count >= 5 {
            self.q[2]
        } else {
            let mut v = self.q[..self.count].to_vec();
            crate::sits::median_in_place(&mut v)
        }
    }
}

/// Pixels flagged cloud or shadow by the scene-class layer, dilated by the
/// cloud buffer. Pixels without a valid class are not flagged.
fn cloud_mask(grid: &GridSpec, scl: ArrayView2<'_, f32>, ok: ArrayView2<'_, bool>, buffer_m: f64) -> Result<Option<Array2<bool>>> {
    let mut any = false;
    let bits = ndarray::Zip::from(scl).and(ok).map_collect(|&v, &ok| {
        let hit = ok && matches!(SceneClass::from_code(v as u8), Some(SceneClass::Cloud | SceneClass::Shadow)) && v.fract() == 0.0;
        any |= hit;
        hit
    });
    if !any {
        return Ok(None);
    }
    let m = dilate_mask(&PixelMask { grid: grid.clone(), bits }, buffer_m)?;
    Ok(Some(m.bits))
}

/// Time indices grouped by period start, in time order.
fn period_groups(times: &[Day], req: &StatRequest) -> Result<Vec<(Day, Vec<usize>)>> {
    let Some(&first) = times.first() else {
        return Err(Error::Precondition("empty period set: cube has no timesteps".into()));
    };
    let mut groups: Vec<(Day, Vec<usize>)> = Vec::new();
    for (t, &day) in times.iter().enumerate() {
        let start = req.period.start_of(day, first, &req.seasons);
        match groups.last_mut() {
            Some((s, v)) if *s == start => v.push(t),
            _ => groups.push((start, vec![t])),
        }
    }
    Ok(groups)
}

/// `included[t][band]`: scene passes the cloud-cover filter.
fn scene_filter<S: CubeSource + ?Sized>(source: &S, bands: &[BandId], max_cloud: f64) -> Vec<Vec<bool>> {
    (0..source.times().len())
        .map(|t| bands.iter().map(|&b| max_cloud >= 1.0 || source.scene_cloud_fraction(t, b) <= max_cloud).collect())
        .collect()
}

fn check_bands(available: &[BandId], wanted: &[BandId]) -> Result<()> {
    for b in wanted {
        if !available.contains(b) {
            return Err(Error::InvalidArgument(format!("band {b} is not in the cube")));
        }
    }
    Ok(())
}

/// Aggregates for one (period, band) over dense labels.
struct Unit {
    accs: Vec<Acc>,
    steps: u64,
    medians: Option<Vec<Option<f64>>>,
    p2: Option<Vec<P2>>,
}

/// Accumulate one (period, band) unit. `dense[pixel]` is a compact label index
/// or `u32::MAX`; `clouds[t]` holds the per-timestep cloud mask if any.
#[allow(clippy::too_many_arguments)]
fn accumulate(
    cube: &CubeArray,
    b: usize,
    ts: &[usize],
    included: &[bool],
    dense: &[u32],
    n_labels: usize,
    clouds: &[Option<Array2<bool>>],
    stats: &[Statistic],
) -> Unit {
    let want_median = stats.contains(&Statistic::Median);
    let want_p2 = stats.contains(&Statistic::MedianP2);
    let want_std = stats.contains(&Statistic::Std);
    let mut accs = vec![Acc::EMPTY; n_labels];
    let mut p2 = want_p2.then(|| vec![P2::new(); n_labels]);
    let mut gathered: Vec<(u32, f32)> = Vec::new();
    let mut steps = 0;
    for &t in ts {
        if !included[t] {
            continue;
        }
        steps += 1;
        let (vals, ok) = cube.slice(t, b);
        let vals = vals.as_slice().expect("standard layout");
        let ok = ok.as_slice().expect("standard layout");
        let no_cloud = vec![false; dense.len()];
        let cloud = clouds[t].as_ref().map_or(&no_cloud[..], |m| m.as_slice().expect("standard layout"));
        for (((&l, &v), &ok), &cloudy) in dense.iter().zip(vals).zip(ok).zip(cloud) {
            if l == u32::MAX || !ok || cloudy {
                continue;
            }
            let acc = &mut accs[l as usize];
            acc.push(v as f64);
            if want_std {
                acc.push_moments(v as f64);
            }
            if let Some(p) = p2.as_mut() {
                p[l as usize].push(v as f64);
            }
            if want_median {
                gathered.push((l, v));
            }
        }
    }
    let medians = want_median.then(|| {
        // counting sort by label, then sort each segment
        let mut offsets = vec![0usize; n_labels + 1];
        for &(l, _) in &gathered {
            offsets[l as usize + 1] += 1;
        }
        for i in 0..n_labels {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut flat = vec![0f64; gathered.len()];
        for &(l, v) in &gathered {
            flat[fill[l as usize]] = v as f64;
            fill[l as usize] += 1;
        }
        (0..n_labels)
            .map(|l| {
                let seg = &mut flat[offsets[l]..offsets[l + 1]];
                (!seg.is_empty()).then(|| crate::sits::median_in_place(seg))
            })
            .collect()
    });
    Unit { accs, steps, medians, p2 }
}

fn stat_value(stat: Statistic, unit: &Unit, l: usize, n_pixels: u64) -> Option<f64> {
    let a = &unit.accs[l];
    if a.n == 0 {
        return None;
    }
    Some(match stat {
        Statistic::Mean => a.mean(),
        Statistic::Std => a.std(),
        Statistic::Min => a.min,
        Statistic::Max => a.max,
        Statistic::Count => a.n as f64,
        Statistic::ValidFraction => a.n as f64 / (n_pixels * unit.steps) as f64,
        Statistic::Median => unit.medians.as_ref()?[l]?,
        Statistic::MedianP2 => unit.p2.as_ref()?[l].estimate(),
    })
}

fn axes_id(grid: &GridSpec, times: &[Day], bands: &[BandId]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(grid).unwrap_or_default());
    for t in times {
        h.update(t.0.to_le_bytes());
    }
    for b in bands {
        h.update(b.name().as_bytes());
    }
    hex_prefix(&h.finalize())
}

pub fn label_raster_id(labels: &LabelRaster) -> String {
    let mut h = Sha256::new();
    for v in labels.labels.iter() {
        h.update(v.to_le_bytes());
    }
    hex_prefix(&h.finalize())
}

fn parcels_id(parcels: &[Parcel]) -> String {
    let mut h = Sha256::new();
    h.update(crate::parcels::parcels_to_json(parcels).to_string().as_bytes());
    format!("parcels:{}", hex_prefix(&h.finalize()))
}

/// Per-timestep cloud masks over the whole of `cube` (None where nothing is flagged).
pub(crate) fn cloud_masks(cube: &CubeArray, buffer_m: f64) -> Result<Vec<Option<Array2<bool>>>> {
    let Some(scl) = cube.band_index(BandId::SCL) else {
        return Ok(vec![None; cube.times.len()]);
    };
    (0..cube.times.len())
        .into_par_iter()
        .map(|t| {
            let (v, ok) = cube.slice(t, scl);
            cloud_mask(&cube.grid, v, ok, buffer_m)
        })
        .collect()
}

/// Compact label indices: sorted distinct ids, per-pixel index (`u32::MAX`
/// for background) and per-label pixel counts.
fn remap_labels(labels: &Array2<i32>) -> (Vec<i32>, Vec<u32>, Vec<u64>) {
    let fg = || labels.iter().copied().filter(|&l| l != BACKGROUND);
    let (Some(lo), Some(hi)) = (fg().min(), fg().max()) else {
        return (Vec::new(), vec![u32::MAX; labels.len()], Vec::new());
    };
    let span = (hi as i64 - lo as i64 + 1) as usize;
    let lookup = |slot: &mut dyn FnMut(i32) -> u32| labels.iter().map(|&l| if l == BACKGROUND { u32::MAX } else { slot(l) }).collect::<Vec<u32>>();
    let (ids, dense) = if span <= 4 * labels.len() + 1024 {
        let mut table = vec![u32::MAX; span];
        for l in fg() {
            table[(l - lo) as usize] = 0;
        }
        let mut ids = Vec::new();
        for (k, t) in table.iter_mut().enumerate() {
            if *t == 0 {
                *t = ids.len() as u32;
                ids.push(lo + k as i32);
            }
        }
        let dense = lookup(&mut |l| table[(l - lo) as usize]);
        (ids, dense)
    } else {
        let mut ids: Vec<i32> = fg().collect();
        ids.sort_unstable();
        ids.dedup();
        let dense = lookup(&mut |l| ids.binary_search(&l).unwrap() as u32);
        (ids, dense)
    };
    let mut n_pixels = vec![0u64; ids.len()];
    for &d in &dense {
        if d != u32::MAX {
            n_pixels[d as usize] += 1;
        }
    }
    (ids, dense, n_pixels)
}

/// Grouped engine over an in-memory cube and an aligned label raster.
pub fn zonal_stats_grouped(cube: &CubeArray, labels: &LabelRaster, req: &StatRequest) -> Result<ZonalStatsTable> {
    req.validate()?;
    if !cube.grid.is_aligned(&labels.grid) {
        return Err(Error::GridMismatch("label raster is not on the cube grid".into()));
    }
    let bands = req.unique_bands();
    let stats = req.unique_stats();
    check_bands(&cube.bands, &bands)?;
    let groups = period_groups(&cube.times, req)?;

    let eroded = erode_labels(labels, req.buffer_inward_m)?;
    let (ids, dense, n_pixels) = remap_labels(&eroded.labels);

    let clouds = cloud_masks(cube, req.cloud_buffer_m)?;
    let included = scene_filter(cube, &bands, req.max_cloud_cover_fraction);
    let band_idx: Vec<usize> = bands.iter().map(|&b| cube.band_index(b).unwrap()).collect();

    let jobs: Vec<(usize, usize)> = (0..groups.len()).flat_map(|g| (0..bands.len()).map(move |b| (g, b))).collect();
    let units: Vec<Unit> = jobs
        .par_iter()
        .map(|&(g, bi)| {
            let inc: Vec<bool> = included.iter().map(|row| row[bi]).collect();
            accumulate(cube, band_idx[bi], &groups[g].1, &inc, &dense, ids.len(), &clouds, &stats)
        })
        .collect();

    let mut records = Vec::with_capacity(ids.len() * jobs.len() * stats.len());
    for (l, &id) in ids.iter().enumerate() {
        for (j, &(g, bi)) in jobs.iter().enumerate() {
            let unit = &units[j];
            for &st in &stats {
                records.push(ZonalRecord {
                    parcel_id: id,
                    period_start: groups[g].0,
                    band: bands[bi],
                    statistic: st,
                    value: stat_value(st, unit, l, n_pixels[l]),
                    n_valid_pixels: unit.accs[l].n,
                });
            }
        }
    }
    Ok(ZonalStatsTable {
        records,
        provenance: TableProvenance {
            request: req.clone(),
            cube_id: axes_id(&cube.grid, &cube.times, &cube.bands),
            label_raster_id: label_raster_id(labels),
            engine: "grouped".into(),
        },
    })
}

/// Serial engine: one window query per parcel.
pub fn zonal_stats_serial<S: CubeSource + ?Sized>(source: &S, parcels: &[Parcel], req: &StatRequest) -> Result<ZonalStatsTable> {
    zonal_stats_serial_until(source, parcels, req, None)?.ok_or_else(|| Error::Precondition("deadline passed".into()))
}

/// As [`zonal_stats_serial`], giving up with `Ok(None)` once `deadline` passes.
pub fn zonal_stats_serial_until<S: CubeSource + ?Sized>(
    source: &S,
    parcels: &[Parcel],
    req: &StatRequest,
    deadline: Option<Instant>,
) -> Result<Option<ZonalStatsTable>> {
    req.validate()?;
    let grid = source.grid().clone();
    let bands = req.unique_bands();
    let stats = req.unique_stats();
    check_bands(source.bands(), &bands)?;
    let groups = period_groups(source.times(), req)?;
    let included = scene_filter(source, &bands, req.max_cloud_cover_fraction);
    let mut sorted: Vec<&Parcel> = parcels.iter().collect();
    sorted.sort_by_key(|p| p.id);
    for (i, p) in sorted.iter().enumerate() {
        p.validate()?;
        if i > 0 && sorted[i - 1].id == p.id {
            return Err(Error::DuplicateParcel(p.id));
        }
    }
    let with_scl = source.bands().contains(&BandId::SCL);
    let mut load_bands = bands.clone();
    if with_scl && !load_bands.contains(&BandId::SCL) {
        load_bands.push(BandId::SCL);
    }
    let halo = (req.buffer_inward_m.max(req.cloud_buffer_m) / grid.pixel_size).ceil() as usize;

    let mut records = Vec::new();
    for p in sorted {
        if deadline.is_some_and(|d| Instant::now() > d) {
            return Ok(None);
        }
        let core = grid.window_for_bbox(&p.geometry.bbox());
        if core.is_empty() {
            continue;
        }
        let win = core.expand(halo, grid.height, grid.width);
        let alone = rasterize_window(std::slice::from_ref(p), &grid, &win)?;
        let eroded = erode_labels(&alone, req.buffer_inward_m)?;
        let dense: Vec<u32> = eroded.labels.iter().map(|&l| if l == p.id { 0 } else { u32::MAX }).collect();
        let n_pixels = dense.iter().filter(|&&d| d == 0).count() as u64;
        if n_pixels == 0 {
            continue;
        }
        let cube = source.load_window(&win, &load_bands)?;
        let clouds = cloud_masks(&cube, req.cloud_buffer_m)?;
        for (period_start, ts) in &groups {
            for (bi, &band) in bands.iter().enumerate() {
                let inc: Vec<bool> = included.iter().map(|row| row[bi]).collect();
                let b = cube.band_index(band).unwrap();
                let unit = accumulate(&cube, b, ts, &inc, &dense, 1, &clouds, &stats);
                for &st in &stats {
                    records.push(ZonalRecord {
                        parcel_id: p.id,
                        period_start: *period_start,
                        band,
                        statistic: st,
                        value: stat_value(st, &unit, 0, n_pixels),
                        n_valid_pixels: unit.accs[0].n,
                    });
                }
            }
        }
    }
    Ok(Some(ZonalStatsTable {
        records,
        provenance: TableProvenance {
            request: req.clone(),
            cube_id: axes_id(&grid, source.times(), source.bands()),
            label_raster_id: parcels_id(parcels),
            engine: "serial".into(),
        },
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use crate::grid::Raster;
    use crate::parcels::{rasterize_parcels, Polygon};
    use ndarray::{s, Array4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn grid(w: usize, h: usize) -> GridSpec {
        GridSpec::new(0.0, 0.0, 10.0, w, h, "EPSG:32634").unwrap()
    }

    fn monthly(n: usize) -> Vec<Day> {
        let mut d = Day::from_ymd(2020, 1, 5).unwrap();
        (0..n)
            .map(|_| {
                let out = d;
                d = d.next_month().plus(4);
                out
            })
            .collect()
    }

    fn rect(id: i32, x0: f64, y0: f64, x1: f64, y1: f64) -> Parcel {
        Parcel::new(id, Polygon::rect(x0, y0, x1, y1).unwrap(), "maize").unwrap()
    }

    fn random_cube(g: &GridSpec, times: Vec<Day>, bands: Vec<BandId>, seed: u64, invalid: f64) -> CubeArray {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let shape = (times.len(), bands.len(), g.height, g.width);
        let values = Array4::from_shape_simple_fn(shape, || rng.random_range(-0.2f32..0.9));
        let valid = Array4::from_shape_simple_fn(shape, || rng.random::<f64>() >= invalid);
        CubeArray::new(g.clone(), times, bands, values, valid).unwrap()
    }

    fn lattice(g: &GridSpec, n: usize, seed: u64) -> Vec<Parcel> {
        let cfg = crate::catalog::SyntheticConfig { grid: g.clone(), n_parcels: n, rng_seed: seed, ..crate::catalog::SyntheticConfig::demo(seed) };
        crate::catalog::generate_synthetic_dataset(&cfg).unwrap().parcels
    }

    fn req(stats: &[Statistic], bands: &[BandId]) -> StatRequest {
        StatRequest { statistics: stats.to_vec(), bands: bands.to_vec(), ..Default::default() }
    }

    #[test]
    fn constant_band_monthly_mean() {
        let g = grid(20, 20);
        let times = monthly(12);
        let values = Array4::from_elem((12, 1, 20, 20), 0.5f32);
        let cube = CubeArray::new(g.clone(), times.clone(), vec![BandId::NDVI], values, Array4::from_elem((12, 1, 20, 20), true)).unwrap();
        let parcels = vec![rect(7, 30.0, 30.0, 150.0, 120.0)];
        let labels = rasterize_parcels(&parcels, &g).unwrap().labels;
        let t = zonal_stats_grouped(&cube, &labels, &req(&[Statistic::Mean], &[BandId::NDVI])).unwrap();
        assert_eq!(t.records.len(), 12);
        assert!(t.records.iter().all(|r| r.value == Some(0.5)));
        let serial = zonal_stats_serial(&cube, &parcels, &req(&[Statistic::Mean], &[BandId::NDVI])).unwrap();
        assert_eq!(serial.records, t.records);
    }

    #[test]
    fn clouded_month_has_no_value() {
        let g = grid(16, 16);
        let times = monthly(4);
        let mut cube = CubeArray::empty(g.clone(), times, vec![BandId::NDVI, BandId::SCL]);
        cube.values.slice_mut(s![.., 0, .., ..]).fill(0.6);
        cube.values.slice_mut(s![.., 1, .., ..]).fill(1.0);
        cube.valid.fill(true);
        // March: everything cloud
        cube.values.slice_mut(s![2, 1, .., ..]).fill(2.0);
        let parcels = vec![rect(1, 20.0, 20.0, 100.0, 100.0)];
        let labels = rasterize_parcels(&parcels, &g).unwrap().labels;
        let r = req(&Statistic::ALL, &[BandId::NDVI]);
        let t = zonal_stats_grouped(&cube, &labels, &r).unwrap();
        let march = Day::from_ymd(2020, 3, 1).unwrap();
        for st in Statistic::ALL {
            let rec = t.get(1, march, BandId::NDVI, st).unwrap();
            assert_eq!(rec.n_valid_pixels, 0);
            assert_eq!(rec.value, None);
        }
        let feb = t.get(1, Day::from_ymd(2020, 2, 1).unwrap(), BandId::NDVI, Statistic::ValidFraction).unwrap();
        assert_eq!(feb.value, Some(1.0));
        assert_eq!(zonal_stats_serial(&cube, &parcels, &r).unwrap().records, t.records);
        // scene filter drops March entirely
        let strict = StatRequest { max_cloud_cover_fraction: 0.5, ..r };
        let t2 = zonal_stats_grouped(&cube, &labels, &strict).unwrap();
        assert_eq!(t2.get(1, march, BandId::NDVI, Statistic::Count).unwrap().value, None);
    }

    #[test]
    fn cloud_buffer_reaches_parcel() {
        let g = grid(30, 10);
        let mut cube = CubeArray::empty(g.clone(), monthly(1), vec![BandId::B04, BandId::SCL]);
        cube.valid.fill(true);
        cube.values.slice_mut(s![0, 0, .., ..]).fill(0.1);
        cube.values.slice_mut(s![0, 1, .., ..]).fill(1.0);
        cube.values[(0, 1, 5, 25)] = 2.0;
        // parcel columns 10..20; cloud at column 25 is 5+ pixels away
        let parcels = vec![rect(1, 100.0, 0.0, 200.0, 100.0)];
        let labels = rasterize_parcels(&parcels, &g).unwrap().labels;
        let base = req(&[Statistic::Count], &[BandId::B04]);
        let far = zonal_stats_grouped(&cube, &labels, &base).unwrap();
        assert_eq!(far.records[0].value, Some(100.0));
        let wide = StatRequest { cloud_buffer_m: 70.0, ..base };
        let near = zonal_stats_grouped(&cube, &labels, &wide).unwrap();
        // columns 19, 18 within 70 m of (5,25) for some rows
        let expect = (0..10).flat_map(|r| (10..20).map(move |c| (r, c))).filter(|&(r, c): &(i32, i32)| (r - 5).pow(2) + (c - 25).pow(2) > 49).count();
        assert_eq!(near.records[0].value, Some(expect as f64));
        assert_eq!(zonal_stats_serial(&cube, &parcels, &wide).unwrap().records, near.records);
    }

    #[test]
    fn outside_and_errors() {
        let g = grid(10, 10);
        let cube = random_cube(&g, monthly(2), vec![BandId::NDVI], 1, 0.1);
        let parcels = vec![rect(1, 500.0, 500.0, 600.0, 600.0)];
        let r = req(&[Statistic::Mean], &[BandId::NDVI]);
        assert!(zonal_stats_serial(&cube, &parcels, &r).unwrap().records.is_empty());
        let labels = rasterize_parcels(&parcels, &g).unwrap().labels;
        assert!(zonal_stats_grouped(&cube, &labels, &r).unwrap().records.is_empty());
        let other = LabelRaster::background(grid(11, 10));
        assert!(matches!(zonal_stats_grouped(&cube, &other, &r), Err(Error::GridMismatch(_))));
        let empty = CubeArray::empty(g.clone(), vec![], vec![BandId::NDVI]);
        assert!(matches!(zonal_stats_grouped(&empty, &labels, &r), Err(Error::Precondition(_))));
        assert!(zonal_stats_grouped(&cube, &labels, &req(&[Statistic::Mean], &[BandId::B08])).is_err());
    }

    #[test]
    fn statistics_against_brute_force() {
        let g = grid(24, 18);
        let cube = random_cube(&g, monthly(5), vec![BandId::NDVI], 9, 0.3);
        let parcels = lattice(&g, 9, 4);
        let labels = rasterize_parcels(&parcels, &g).unwrap().labels;
        let r = StatRequest { period: Period::Season, buffer_inward_m: 0.0, ..req(&Statistic::ALL, &[BandId::NDVI]) };
        let t = zonal_stats_grouped(&cube, &labels, &r).unwrap();
        for rec in &t.records {
            let ts: Vec<usize> = (0..5).filter(|&k| r.period.start_of(cube.times[k], cube.times[0], &r.seasons) == rec.period_start).collect();
            let mut vals = Vec::new();
            let mut npx = 0;
            for ((y, x), &l) in labels.labels.indexed_iter() {
                if l != rec.parcel_id {
                    continue;
                }
                npx += 1;
                for &k in &ts {
                    if cube.valid[(k, 0, y, x)] {
                        vals.push(cube.values[(k, 0, y, x)] as f64);
                    }
                }
            }
            assert_eq!(rec.n_valid_pixels, vals.len() as u64);
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let expect = match rec.statistic {
                Statistic::Mean => mean,
                Statistic::Std => (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt(),
                Statistic::Min => vals.iter().copied().fold(f64::INFINITY, f64::min),
                Statistic::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Statistic::Count => n,
                Statistic::ValidFraction => n / (npx * ts.len()) as f64,
                Statistic::Median | Statistic::MedianP2 => {
                    let mut s = vals.clone();
                    s.sort_by(|a, b| a.total_cmp(b));
                    let m = s.len();
                    if m % 2 == 1 { s[m / 2] } else { 0.5 * (s[m / 2 - 1] + s[m / 2]) }
                }
            };
            let tol = if rec.statistic == Statistic::MedianP2 { 0.25 } else { 1e-12 };
            assert!((rec.value.unwrap() - expect).abs() <= tol, "{rec:?} vs {expect}");
        }
    }

    #[test]
    fn p2_tracks_median_on_large_samples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut p = P2::new();
        let mut all = Vec::new();
        for _ in 0..5000 {
            let v: f64 = rng.random_range(0.0..1.0);
            p.push(v);
            all.push(v);
        }
        let exact = crate::sits::median_in_place(&mut all);
        assert!((p.estimate() - exact).abs() < 0.02);
    }

    #[test]
    fn csv_layout() {
        let g = grid(4, 4);
        let cube = random_cube(&g, monthly(1), vec![BandId::NDVI], 2, 0.0);
        let labels = rasterize_parcels(&[rect(3, 0.0, 0.0, 40.0, 40.0)], &g).unwrap().labels;
        let t = zonal_stats_grouped(&cube, &labels, &req(&[Statistic::Count], &[BandId::NDVI])).unwrap();
        assert_eq!(t.to_csv(), "parcel_id,period_start,band,statistic,value,n_valid_pixels\n3,2020-01-01,NDVI,count,16,16\n");
    }

    #[test]
    fn linearity_and_partition_invariance() {
        let g = grid(40, 30);
        let cube = random_cube(&g, monthly(3), vec![BandId::NDVI], 5, 0.2);
        let labels = rasterize_parcels(&lattice(&g, 12, 1), &g).unwrap().labels;
        let r = req(&[Statistic::Mean], &[BandId::NDVI]);
        let base = zonal_stats_grouped(&cube, &labels, &r).unwrap();
        let mut scaled = cube.clone();
        scaled.values.mapv_inplace(|v| v * 4.0);
        let t = zonal_stats_grouped(&scaled, &labels, &r).unwrap();
        for (a, b) in base.records.iter().zip(&t.records) {
            assert!((a.value.unwrap() * 4.0 - b.value.unwrap()).abs() < 1e-12);
        }
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| zonal_stats_grouped(&cube, &labels, &r).unwrap());
        let b = three.install(|| zonal_stats_grouped(&cube, &labels, &r).unwrap());
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn grouped_equals_serial(seed in any::<u64>(), n in 1usize..20, inward in prop_oneof![Just(0.0), Just(5.0), Just(10.0), Just(15.0)], cloud in prop_oneof![Just(0.0), Just(20.0), Just(50.0)]) {
            let g = grid(36, 28);
            let mut cube = random_cube(&g, monthly(4), vec![BandId::B04, BandId::NDVI, BandId::SCL], seed, 0.15);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 1);
            cube.values.slice_mut(s![.., 2, .., ..]).mapv_inplace(|_| if rng.random::<f64>() < 0.03 { 2.0 } else { 1.0 });
            let parcels = lattice(&g, n, seed);
            let labels = rasterize_parcels(&parcels, &g).unwrap().labels;
            let r = StatRequest { buffer_inward_m: inward, cloud_buffer_m: cloud, max_cloud_cover_fraction: 0.4, period: Period::Month, ..req(&Statistic::ALL, &[BandId::NDVI, BandId::B04]) };
            let a = zonal_stats_grouped(&cube, &labels, &r).unwrap();
            let b = zonal_stats_serial(&cube, &parcels, &r).unwrap();
            prop_assert_eq!(&a.records, &b.records);

            // valid pixel budget per (period, band)
            let eroded = erode_labels(&labels, inward).unwrap();
            let fg = eroded.labels.iter().filter(|&&l| l != BACKGROUND).count() as u64;
            let mut per: BTreeMap<(Day, BandId), u64> = BTreeMap::new();
            for rec in a.records.iter().filter(|r| r.statistic == Statistic::Count) {
                *per.entry((rec.period_start, rec.band)).or_default() += rec.n_valid_pixels;
            }
            for ((_, _), total) in per {
                prop_assert!(total <= fg);
            }
        }

        #[test]
        fn raster_source_roundtrip(v in -1.0f32..1.0) {
            let g = grid(5, 5);
            let r = Raster::filled(g.clone(), v, -9999.0);
            let cube = crate::grid::stack_cube(vec![(Day(0), BandId::NDVI, r)], &g, crate::grid::ResampleMethod::Nearest).unwrap();
            let labels = rasterize_parcels(&[rect(1, 0.0, 0.0, 50.0, 50.0)], &g).unwrap().labels;
            let t = zonal_stats_grouped(&cube, &labels, &StatRequest { period: Period::WholeRange, ..req(&[Statistic::Mean], &[BandId::NDVI]) }).unwrap();
            prop_assert!((t.records[0].value.unwrap() - v as f64).abs() < 1e-6);
        }
    }
}
