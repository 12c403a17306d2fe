// SPDX-License-Identifier: Apache-2.0

//! Vegetation indices, temporal composites, phenology metrics, feature
//! spaces, patch extraction and mowing detection.

mod mowing;
mod phenology;
mod space;

pub use mowing::{detect_mowing, MowingEvent, MowingParams};
pub use phenology::{phenology, PhenologyMetrics, FLAT_EPSILON, PHENOLOGY_COLUMNS};
pub use space::{build_feature_space, FeatureLevel, FeatureSpace, FeatureSpec};

use ndarray::{s, Array4};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{BandId, CubeArray, PixelWindow};
use crate::time::{Period, SeasonScheme};
use crate::zonal::Statistic;

/// Normalized difference of near infrared and red reflectance. `None` where
/// either input is negative or non-finite, or their sum is not positive.
pub fn ndvi(nir: f64, red: f64) -> Option<f64> {
    if !(nir.is_finite() && red.is_finite()) || nir < 0.0 || red < 0.0 || nir + red <= 0.0 {
        return None;
    }
    Some(((nir - red) / (nir + red)).clamp(-1.0, 1.0))
}

/// Copy of `cube` with an NDVI band computed from B08 and B04 appended
/// (replaced if present).
pub fn with_ndvi(cube: &CubeArray) -> Result<CubeArray> {
    let (Some(nir), Some(red)) = (cube.band_index(BandId::B08), cube.band_index(BandId::B04)) else {
        return Err(Error::InvalidArgument("NDVI needs bands B08 and B04".into()));
    };
    let mut bands: Vec<BandId> = cube.bands.iter().copied().filter(|&b| b != BandId::NDVI).collect();
    let keep: Vec<usize> = bands.iter().map(|&b| cube.band_index(b).unwrap()).collect();
    bands.push(BandId::NDVI);
    let (nt, _, h, w) = cube.shape();
    let mut out = CubeArray::empty(cube.grid.clone(), cube.times.clone(), bands);
    for (dst, &src) in keep.iter().enumerate() {
        out.values.slice_mut(s![.., dst, .., ..]).assign(&cube.values.slice(s![.., src, .., ..]));
        out.valid.slice_mut(s![.., dst, .., ..]).assign(&cube.valid.slice(s![.., src, .., ..]));
    }
    let ni = keep.len();
    for t in 0..nt {
        for y in 0..h {
            for x in 0..w {
                let ok = cube.valid[(t, nir, y, x)] && cube.valid[(t, red, y, x)];
                let v = if ok { ndvi(cube.values[(t, nir, y, x)] as f64, cube.values[(t, red, y, x)] as f64) } else { None };
                if let Some(v) = v {
                    out.values[(t, ni, y, x)] = v as f32;
                    out.valid[(t, ni, y, x)] = true;
                }
            }
        }
    }
    Ok(out)
}

/// One timestep per calendar unit present in the cube, holding the per-pixel
/// statistic over valid observations. Supports mean, median, min, max, std
/// and count.
pub fn temporal_composite(cube: &CubeArray, unit: Period, stat: Statistic) -> Result<CubeArray> {
    temporal_composite_with(cube, unit, &SeasonScheme::default(), stat)
}

pub fn temporal_composite_with(cube: &CubeArray, unit: Period, seasons: &SeasonScheme, stat: Statistic) -> Result<CubeArray> {
    if matches!(stat, Statistic::MedianP2 | Statistic::ValidFraction) {
        return Err(Error::InvalidArgument(format!("statistic {stat} is not available for composites")));
    }
    let Some(&first) = cube.times.first() else {
        return Err(Error::Precondition("composite of an empty cube".into()));
    };
    let mut starts = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (t, &d) in cube.times.iter().enumerate() {
        let st = unit.start_of(d, first, seasons);
        if starts.last() == Some(&st) {
            members.last_mut().unwrap().push(t);
        } else {
            starts.push(st);
            members.push(vec![t]);
        }
    }
    let (_, nb, h, w) = cube.shape();
    let mut values = Array4::zeros((starts.len(), nb, h, w));
    let mut valid = Array4::from_elem((starts.len(), nb, h, w), false);
    let mut buf = Vec::new();
    for (k, ts) in members.iter().enumerate() {
        for b in 0..nb {
            for y in 0..h {
                for x in 0..w {
                    buf.clear();
                    buf.extend(ts.iter().filter(|&&t| cube.valid[(t, b, y, x)]).map(|&t| cube.values[(t, b, y, x)] as f64));
                    if buf.is_empty() {
                        continue;
                    }
                    let n = buf.len() as f64;
                    let v = match stat {
                        Statistic::Mean => buf.iter().sum::<f64>() / n,
                        Statistic::Median => crate::sits::median_in_place(&mut buf),
                        Statistic::Min => buf.iter().copied().fold(f64::INFINITY, f64::min),
                        Statistic::Max => buf.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        Statistic::Std => {
                            let m = buf.iter().sum::<f64>() / n;
                            (buf.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
                        }
                        Statistic::Count => n,
                        Statistic::MedianP2 | Statistic::ValidFraction => unreachable!(),
                    };
                    values[(k, b, y, x)] = v as f32;
                    valid[(k, b, y, x)] = true;
                }
            }
        }
    }
    CubeArray::new(cube.grid.clone(), starts, cube.bands.clone(), values, valid)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Patch {
    /// Top-left `(row, col)` in the parent grid.
    pub anchor: (usize, usize),
    #[serde(skip)]
    pub data: CubeArray,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchSet {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub parent: String,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    /// Manifest listing anchor, size and source slice of each patch.
    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "parent_cube": self.parent,
            "patch_height": self.height,
            "patch_width": self.width,
            "stride": self.stride,
            "count": self.patches.len(),
            "patches": self.patches.iter().enumerate().map(|(i, p)| serde_json::json!({
                "index": i,
                "anchor": [p.anchor.0, p.anchor.1],
                "size": [self.height, self.width],
                "rows": [p.anchor.0, p.anchor.0 + self.height],
                "cols": [p.anchor.1, p.anchor.1 + self.width],
                "times": p.data.times.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
                "bands": p.data.bands.iter().map(|b| b.name()).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Cut `cube` into `h × w` patches anchored on the `stride` lattice.
pub fn extract_patches(cube: &CubeArray, h: usize, w: usize, stride: usize) -> Result<PatchSet> {
    let (gh, gw) = (cube.grid.height, cube.grid.width);
    if h == 0 || w == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be positive".into()));
    }
    if h > gh || w > gw {
        return Err(Error::InvalidArgument(format!("patch {h}x{w} exceeds cube extent {gh}x{gw}")));
    }
    let mut patches = Vec::new();
    for i in 0..=(gh - h) / stride {
        for j in 0..=(gw - w) / stride {
            let win = PixelWindow { row0: i * stride, col0: j * stride, rows: h, cols: w };
            patches.push(Patch { anchor: (win.row0, win.col0), data: cube.crop(&win) });
        }
    }
    Ok(PatchSet { height: h, width: w, stride, parent: cube.fingerprint(), patches })
}
