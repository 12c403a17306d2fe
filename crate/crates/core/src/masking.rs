// SPDX-License-Identifier: Apache-2.0

//! Scene-class masks and Euclidean raster morphology.
//!
//! Outward buffers around cloud/shadow objects are dilations of a boolean
//! mask; inward buffers of parcels are per-label erosions of the label raster.
//! Both use an exact squared Euclidean distance transform (lower envelope of
//! parabolas, one pass per axis) measured between pixel centers.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{CubeArray, GridSpec};
use crate::parcels::{LabelRaster, BACKGROUND};
use crate::time::Day;

/// Default inward parcel buffer.
pub const DEFAULT_INWARD_BUFFER_M: f64 = 5.0;
/// Default outward cloud/shadow buffer.
pub const DEFAULT_CLOUD_BUFFER_M: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum SceneClass {
    NoData = 0,
    Clear = 1,
    Cloud = 2,
    Shadow = 3,
    Water = 4,
    Snow = 5,
}

impl SceneClass {
    pub fn from_code(code: u8) -> Option<SceneClass> {
        Some(match code {
            0 => SceneClass::NoData,
            1 => SceneClass::Clear,
            2 => SceneClass::Cloud,
            3 => SceneClass::Shadow,
            4 => SceneClass::Water,
            5 => SceneClass::Snow,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneClassMask {
    pub grid: GridSpec,
    pub codes: Array2<u8>,
}

impl SceneClassMask {
    pub fn new(grid: GridSpec, codes: Array2<u8>) -> Result<SceneClassMask> {
        if codes.dim() != (grid.height, grid.width) {
            return Err(Error::InvalidArgument("scene class codes do not match grid".into()));
        }
        if let Some(bad) = codes.iter().find(|&&c| SceneClass::from_code(c).is_none()) {
            return Err(Error::InvalidArgument(format!("invalid scene class code {bad}")));
        }
        Ok(SceneClassMask { grid, codes })
    }

    /// Scene classes from an SCL slice of a cube; invalid cells read as nodata.
    pub fn from_cube_slice(grid: GridSpec, values: ArrayView2<'_, f32>, valid: ArrayView2<'_, bool>) -> SceneClassMask {
        let mut codes = Array2::zeros(values.dim());
        ndarray::Zip::from(&mut codes).and(&values).and(&valid).for_each(|c, &v, &ok| {
            *c = if ok && (0.0..=5.0).contains(&v) && v.fract() == 0.0 { v as u8 } else { 0 };
        });
        SceneClassMask { grid, codes }
    }
}

/// `true` marks a masked (unusable) pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub grid: GridSpec,
    pub bits: Array2<bool>,
}

impl PixelMask {
    pub fn new(grid: GridSpec, bits: Array2<bool>) -> Result<PixelMask> {
        if bits.dim() != (grid.height, grid.width) {
            return Err(Error::InvalidArgument("mask shape does not match grid".into()));
        }
        Ok(PixelMask { grid, bits })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &PixelMask) -> Result<PixelMask> {
        if !self.grid.is_aligned(&other.grid) {
            return Err(Error::GridMismatch("mask union".into()));
        }
        let mut bits = self.bits.clone();
        ndarray::Zip::from(&mut bits).and(&other.bits).for_each(|a, &b| *a |= b);
        Ok(PixelMask { grid: self.grid.clone(), bits })
    }
}

/// Masked where the class is in `masked` or is nodata.
pub fn class_mask(scl: &SceneClassMask, masked: &[SceneClass]) -> PixelMask {
    let mut table = [false; 256];
    table[SceneClass::NoData.code() as usize] = true;
    for c in masked {
        table[c.code() as usize] = true;
    }
    PixelMask { grid: scl.grid.clone(), bits: scl.codes.mapv(|c| table[c as usize]) }
}

const FAR: f64 = 1e20;

/// One-dimensional squared distance transform of a sampled function `f`
/// (lower envelope of parabolas rooted at each sample).
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        // z[0] is -inf, so this stops at k == 0
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = (d * d + f[p]).min(FAR);
    }
}

/// Squared Euclidean distance, in pixel units, from every pixel center to the
/// nearest `true` pixel center. Returns a very large value everywhere when
/// no pixel is set.
pub fn squared_distance_transform(bits: ArrayView2<'_, bool>) -> Array2<f64> {
    let (h, w) = bits.dim();
    let mut d = bits.mapv(|b| if b { 0.0 } else { FAR });
    // columns
    d.axis_iter_mut(Axis(1)).into_par_iter().for_each(|mut col| {
        let f: Vec<f64> = col.iter().copied().collect();
        let mut out = vec![0.0; h];
        let mut v = vec![0usize; h];
        let mut z = vec![0.0; h + 1];
        dt_1d(&f, &mut out, &mut v, &mut z);
        for (c, o) in col.iter_mut().zip(out) {
            *c = o;
        }
    });
    // rows
    d.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut row| {
        let f: Vec<f64> = row.iter().copied().collect();
        let mut out = vec![0.0; w];
        let mut v = vec![0usize; w];
        let mut z = vec![0.0; w + 1];
        dt_1d(&f, &mut out, &mut v, &mut z);
        for (c, o) in row.iter_mut().zip(out) {
            *c = o;
        }
    });
    d
}

fn radius_px2(radius_m: f64, pixel_size: f64) -> f64 {
    let r = radius_m / pixel_size;
    r * r
}

/// Outward buffer: a pixel becomes masked when its center lies within
/// `radius_m` of an originally masked pixel center.
pub fn dilate_mask(mask: &PixelMask, radius_m: f64) -> Result<PixelMask> {
    if !(radius_m >= 0.0) {
        return Err(Error::InvalidArgument(format!("buffer radius must be >= 0, got {radius_m}")));
    }
    if radius_m == 0.0 {
        return Ok(mask.clone());
    }
    let r2 = radius_px2(radius_m, mask.grid.pixel_size);
    if r2 < 1.0 {
        // no other pixel center is closer than one pixel
        return Ok(mask.clone());
    }
    let d = squared_distance_transform(mask.bits.view());
    Ok(PixelMask { grid: mask.grid.clone(), bits: d.mapv(|v| v <= r2) })
}

/// Inward buffer: a parcel pixel keeps its id only if every pixel center
/// within `radius_m` carries the same id; otherwise it becomes background.
/// Pixels outside the grid are not considered.
pub fn erode_labels(labels: &LabelRaster, radius_m: f64) -> Result<LabelRaster> {
    if !(radius_m >= 0.0) {
        return Err(Error::InvalidArgument(format!("buffer radius must be >= 0, got {radius_m}")));
    }
    if radius_m == 0.0 {
        return Ok(labels.clone());
    }
    let r2 = radius_px2(radius_m, labels.grid.pixel_size);
    if r2 < 1.0 {
        return Ok(labels.clone());
    }
    let halo = (radius_m / labels.grid.pixel_size).ceil() as usize;
    let (h, w) = labels.labels.dim();

    // bounding rows/cols per label
    let mut boxes: BTreeMap<i32, (usize, usize, usize, usize)> = BTreeMap::new();
    for ((r, c), &l) in labels.labels.indexed_iter() {
        if l == BACKGROUND {
            continue;
        }
        let e = boxes.entry(l).or_insert((r, c, r, c));
        e.0 = e.0.min(r);
        e.1 = e.1.min(c);
        e.2 = e.2.max(r);
        e.3 = e.3.max(c);
    }

    let removals: Vec<Vec<(usize, usize)>> = boxes
        .par_iter()
        .map(|(&id, &(r0, c0, r1, c1))| {
            let r0 = r0.saturating_sub(halo);
            let c0 = c0.saturating_sub(halo);
            let r1 = (r1 + halo + 1).min(h);
            let c1 = (c1 + halo + 1).min(w);
            let win = labels.labels.slice(s![r0..r1, c0..c1]);
            let other = win.mapv(|l| l != id);
            let d = squared_distance_transform(other.view());
            win.indexed_iter()
                .filter(|&((r, c), &l)| l == id && d[[r, c]] <= r2)
                .map(|((r, c), _)| (r + r0, c + c0))
                .collect()
        })
        .collect();

    let mut out = labels.clone();
    for list in removals {
        for (r, c) in list {
            out.labels[[r, c]] = BACKGROUND;
        }
    }
    Ok(out)
}

/// Invalidate cube cells under `mask` for the given timesteps (all when
/// `times` is `None`). Values are left untouched.
pub fn apply_mask(cube: &CubeArray, mask: &PixelMask, times: Option<&[Day]>) -> Result<CubeArray> {
    if !cube.grid.is_aligned(&mask.grid) {
        return Err(Error::GridMismatch("mask grid differs from cube grid".into()));
    }
    let wanted: Option<BTreeSet<Day>> = times.map(|t| t.iter().copied().collect());
    let mut out = cube.clone();
    for (t, day) in cube.times.iter().enumerate() {
        if wanted.as_ref().is_some_and(|w| !w.contains(day)) {
            continue;
        }
        mask_timestep(&mut out, t, &mask.bits);
    }
    Ok(out)
}

pub(crate) fn mask_timestep(cube: &mut CubeArray, t: usize, bits: &Array2<bool>) {
    let mut slab = cube.valid.index_axis_mut(Axis(0), t);
    for mut band in slab.axis_iter_mut(Axis(0)) {
        ndarray::Zip::from(&mut band).and(bits).for_each(|v, &m| {
            if m {
                *v = false;
            }
        });
    }
}
