// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::catalog::tiles::write_atomic;
use crate::error::{Error, Result};
use crate::grid::{BBox, BandId, CubeArray, PixelWindow, Selection};
use crate::masking::erode_labels;
use crate::parcels::{rasterize_window, Parcel};
use crate::time::{Day, Period, SeasonScheme};
use crate::zonal::{cloud_masks, zonal_stats_serial, StatRequest, Statistic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnimationTarget {
    Parcel(i32),
    Bbox(BBox),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnimationStep {
    Period(Period),
    /// Consecutive windows of this many days starting at `from`.
    Days(i32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnimationSpec {
    pub target: AnimationTarget,
    pub band: BandId,
    pub step: AnimationStep,
    pub from: Day,
    /// Inclusive.
    pub to: Day,
    #[serde(default)]
    pub seasons: SeasonScheme,
    #[serde(default = "default_inward")]
    pub buffer_inward_m: f64,
    #[serde(default = "default_cloud")]
    pub cloud_buffer_m: f64,
}

fn default_inward() -> f64 {
    5.0
}

fn default_cloud() -> f64 {
    50.0
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub start: Day,
    /// Exclusive.
    pub end: Day,
    pub n_scenes: usize,
    /// Per-pixel mean of the usable observations; NaN where there are none.
    pub composite: Array2<f32>,
    /// Mean over every usable pixel observation of the frame.
    pub aggregate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FrameSet {
    pub band: BandId,
    pub window: PixelWindow,
    pub frames: Vec<Frame>,
    /// Set when no frame could be produced.
    pub reason: Option<String>,
}

/// Colour stops from low to high values.
pub const COLORMAP: [[u8; 3]; 5] = [[140, 81, 10], [216, 179, 101], [246, 232, 195], [90, 180, 172], [1, 102, 94]];

/// Colour for pixels without data.
pub const NODATA_RGB: [u8; 3] = [0, 0, 0];

fn color(v: f32, lo: f64, hi: f64) -> [u8; 3] {
    if v.is_nan() {
        return NODATA_RGB;
    }
    let t = if hi > lo { ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let pos = t * (COLORMAP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(COLORMAP.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    std::array::from_fn(|k| (a[k] as f64 + f * (b[k] as f64 - a[k] as f64)).round() as u8)
}

impl Frame {
    /// Binary PPM of the composite, values mapped linearly from `[lo, hi]`.
    pub fn to_ppm(&self, lo: f64, hi: f64) -> Vec<u8> {
        let (h, w) = self.composite.dim();
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        out.reserve(h * w * 3);
        for &v in self.composite.iter() {
            out.extend_from_slice(&color(v, lo, hi));
        }
        out
    }
}

impl FrameSet {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,start,end,n_scenes,aggregate\n");
        for (i, f) in self.frames.iter().enumerate() {
            let agg = f.aggregate.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{i},{},{},{},{agg}", f.start, f.end.plus(-1), f.n_scenes);
        }
        s
    }

    /// `frame_NNN.ppm` files plus `frames.csv` in `dir`.
    pub fn write(&self, dir: &Path, lo: f64, hi: f64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, f) in self.frames.iter().enumerate() {
            write_atomic(&dir.join(format!("frame_{i:03}.ppm")), &f.to_ppm(lo, hi))?;
        }
        write_atomic(&dir.join("frames.csv"), self.to_csv().as_bytes())
    }
}

fn frame_bounds(spec: &AnimationSpec) -> Result<Vec<(Day, Day)>> {
    if spec.to < spec.from {
        return Err(Error::InvalidArgument(format!("animation range {}..{} is reversed", spec.from, spec.to)));
    }
    let stop = spec.to.plus(1);
    let mut out = Vec::new();
    match spec.step {
        AnimationStep::Days(n) if n < 1 => return Err(Error::InvalidArgument("animation step must be at least one day".into())),
        AnimationStep::Days(n) => {
            let mut s = spec.from;
            while s < stop {
                let e = s.plus(n);
                out.push((s, if e < stop { e } else { stop }));
                s = e;
            }
        }
        AnimationStep::Period(p) => {
            let starts = p.enumerate(spec.from, spec.to, &spec.seasons);
            for (i, &s) in starts.iter().enumerate() {
                let e = starts.get(i + 1).copied().unwrap_or(stop);
                out.push((if s < spec.from { spec.from } else { s }, if e < stop { e } else { stop }));
            }
        }
    }
    Ok(out)
}

/// Per-frame composites and aggregates of one band over a parcel or a box.
///
/// For a parcel, only pixels of the parcel shrunk by the inward buffer take
/// part, and each aggregate equals the parcel's whole-range zonal mean over
/// the frame. Cloud and shadow pixels, dilated by the cloud buffer, are
/// excluded in both cases.
pub fn animate(cube: &CubeArray, parcels: &[Parcel], spec: &AnimationSpec) -> Result<FrameSet> {
    let grid = &cube.grid;
    if cube.band_index(spec.band).is_none() {
        return Err(Error::InvalidArgument(format!("band {} not in cube", spec.band)));
    }
    let bounds = frame_bounds(spec)?;
    let (window, parcel) = match &spec.target {
        AnimationTarget::Parcel(id) => {
            let p = parcels.iter().find(|p| p.id == *id).ok_or_else(|| Error::InvalidArgument(format!("unknown parcel {id}")))?;
            let halo = (spec.buffer_inward_m.max(spec.cloud_buffer_m) / grid.pixel_size).ceil() as usize;
            (grid.window_for_bbox(&p.geometry.bbox()).expand(halo, grid.height, grid.width), Some(p))
        }
        AnimationTarget::Bbox(bb) => (grid.window_for_bbox(bb), None),
    };
    let empty = |reason: String| FrameSet { band: spec.band, window, frames: Vec::new(), reason: Some(reason) };
    if window.is_empty() {
        return Ok(empty("target does not intersect the cube".into()));
    }
    let in_range = cube.times.iter().filter(|&&d| d >= spec.from && d <= spec.to).count();
    if in_range == 0 {
        return Ok(empty(format!("no scenes between {} and {}", spec.from, spec.to)));
    }

    let mut bands = vec![spec.band];
    if spec.band != BandId::SCL && cube.band_index(BandId::SCL).is_some() {
        bands.push(BandId::SCL);
    }
    let local = cube.crop(&window).select(&Selection { bands: Some(bands), ..Default::default() });
    let inside = match parcel {
        Some(p) => {
            let alone = rasterize_window(std::slice::from_ref(p), grid, &window)?;
            let eroded = erode_labels(&alone, spec.buffer_inward_m)?;
            if !eroded.labels.iter().any(|&l| l == p.id) {
                return Ok(empty(format!("parcel {} has no pixels after the inward buffer", p.id)));
            }
            eroded.labels.mapv(|l| l == p.id)
        }
        None => Array2::from_elem((window.rows, window.cols), true),
    };
    let clouds = cloud_masks(&local, spec.cloud_buffer_m)?;
    let lb = local.band_index(spec.band).expect("band selected");

    let mut frames = Vec::with_capacity(bounds.len());
    for (start, end) in bounds {
        let ts: Vec<usize> = (0..local.times.len()).filter(|&t| local.times[t] >= start && local.times[t] < end).collect();
        let mut sum = Array2::<f64>::zeros((window.rows, window.cols));
        let mut cnt = Array2::<u32>::zeros((window.rows, window.cols));
        for &t in &ts {
            let (v, ok) = local.slice(t, lb);
            for ((r, c), &x) in v.indexed_iter() {
                let usable = ok[(r, c)] && inside[(r, c)] && clouds[t].as_ref().is_none_or(|m| !m[(r, c)]);
                if usable {
                    sum[(r, c)] += x as f64;
                    cnt[(r, c)] += 1;
                }
            }
        }
        let composite = ndarray::Zip::from(&sum).and(&cnt).map_collect(|&s, &n| if n > 0 { (s / n as f64) as f32 } else { f32::NAN });
        let aggregate = match parcel {
            Some(p) if !ts.is_empty() => {
                let sub = local.select(&Selection { time_range: Some((start, end)), ..Default::default() });
                let req = StatRequest {
                    statistics: vec![Statistic::Mean],
                    period: Period::WholeRange,
                    bands: vec![spec.band],
                    buffer_inward_m: spec.buffer_inward_m,
                    cloud_buffer_m: spec.cloud_buffer_m,
                    max_cloud_cover_fraction: 1.0,
                    ..Default::default()
                };
                zonal_stats_serial(&sub, std::slice::from_ref(p), &req)?.records.first().and_then(|r| r.value)
            }
            Some(_) => None,
            None => {
                let n: u64 = cnt.iter().map(|&n| n as u64).sum();
                (n > 0).then(|| sum.sum() / n as f64)
            }
        };
        frames.push(Frame { start, end, n_scenes: ts.len(), composite, aggregate });
    }
    Ok(FrameSet { band: spec.band, window, frames, reason: None })
}
