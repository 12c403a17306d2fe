// SPDX-License-Identifier: Apache-2.0

//! Pixel lattices, single-band rasters and the dense four-dimensional cube.
//!
//! World/pixel mapping uses pixel centers everywhere: pixel `(r, c)` has its
//! center at `(origin_x + (c + 0.5) * pixel_size, origin_y + (r + 0.5) * pixel_size)`,
//! with `y` growing downward together with the row index.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::time::Day;

pub const DEFAULT_PIXEL_SIZE: f64 = 10.0;

/// Axis-aligned rectangle in CRS meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> BBox {
        BBox { min_x, min_y, max_x, max_y }
    }

    /// Closed-interval overlap test; touching boxes intersect.
    pub fn intersects(&self, other: &BBox) -> bool {
        self.min_x <= other.max_x
            && other.min_x <= self.max_x
            && self.min_y <= other.max_y
            && other.min_y <= self.max_y
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            min_x: self.min_x.max(other.min_x),
            min_y: self.min_y.max(other.min_y),
            max_x: self.max_x.min(other.max_x),
            max_y: self.max_y.min(other.max_y),
        };
        (b.min_x <= b.max_x && b.min_y <= b.max_y).then_some(b)
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            min_x: self.min_x.min(other.min_x),
            min_y: self.min_y.min(other.min_y),
            max_x: self.max_x.max(other.max_x),
            max_y: self.max_y.max(other.max_y),
        }
    }

    pub fn expand(&self, d: f64) -> BBox {
        BBox::new(self.min_x - d, self.min_y - d, self.max_x + d, self.max_y + d)
    }
}

/// Rectangular block of pixels, `rows × cols` starting at `(row0, col0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelWindow {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PixelWindow {
    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn row_end(&self) -> usize {
        self.row0 + self.rows
    }

    pub fn col_end(&self) -> usize {
        self.col0 + self.cols
    }

    pub fn expand(&self, halo: usize, height: usize, width: usize) -> PixelWindow {
        let row0 = self.row0.saturating_sub(halo);
        let col0 = self.col0.saturating_sub(halo);
        let row_end = (self.row_end() + halo).min(height);
        let col_end = (self.col_end() + halo).min(width);
        PixelWindow { row0, col0, rows: row_end - row0, cols: col_end - col0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
    pub width: usize,
    pub height: usize,
    pub crs_id: String,
}

impl GridSpec {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        pixel_size: f64,
        width: usize,
        height: usize,
        crs_id: impl Into<String>,
    ) -> Result<GridSpec> {
        let g = GridSpec { origin_x, origin_y, pixel_size, width, height, crs_id: crs_id.into() };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size > 0.0) || !self.pixel_size.is_finite() {
            return Err(Error::InvalidArgument(format!("pixel_size must be > 0, got {}", self.pixel_size)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("grid width and height must be >= 1".into()));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(Error::InvalidArgument("grid origin must be finite".into()));
        }
        Ok(())
    }

    /// Identical in every field.
    pub fn is_aligned(&self, other: &GridSpec) -> bool {
        self == other
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y + (row as f64 + 0.5) * self.pixel_size,
        )
    }

    pub fn extent(&self) -> BBox {
        BBox::new(
            self.origin_x,
            self.origin_y,
            self.origin_x + self.width as f64 * self.pixel_size,
            self.origin_y + self.height as f64 * self.pixel_size,
        )
    }

    pub fn full_window(&self) -> PixelWindow {
        PixelWindow { row0: 0, col0: 0, rows: self.height, cols: self.width }
    }

    /// Pixels whose centers fall inside the closed `bbox`; may be empty.
    pub fn window_for_bbox(&self, bbox: &BBox) -> PixelWindow {
        let (c0, c1) = center_range(bbox.min_x, bbox.max_x, self.origin_x, self.pixel_size, self.width);
        let (r0, r1) = center_range(bbox.min_y, bbox.max_y, self.origin_y, self.pixel_size, self.height);
        if c1 <= c0 || r1 <= r0 {
            return PixelWindow { row0: r0.min(self.height), col0: c0.min(self.width), rows: 0, cols: 0 };
        }
        PixelWindow { row0: r0, col0: c0, rows: r1 - r0, cols: c1 - c0 }
    }

    /// Grid describing `window` of this grid. Zero-sized windows are allowed
    /// here so that empty selections can still carry coordinates.
    pub fn subgrid(&self, window: &PixelWindow) -> GridSpec {
        GridSpec {
            origin_x: self.origin_x + window.col0 as f64 * self.pixel_size,
            origin_y: self.origin_y + window.row0 as f64 * self.pixel_size,
            pixel_size: self.pixel_size,
            width: window.cols,
            height: window.rows,
            crs_id: self.crs_id.clone(),
        }
    }

    /// Location of `sub` inside this grid, if it lies on the same lattice.
    pub fn window_of(&self, sub: &GridSpec) -> Option<PixelWindow> {
        if sub.crs_id != self.crs_id || sub.pixel_size != self.pixel_size {
            return None;
        }
        let dc = (sub.origin_x - self.origin_x) / self.pixel_size;
        let dr = (sub.origin_y - self.origin_y) / self.pixel_size;
        if dc < 0.0 || dr < 0.0 || dc.fract() != 0.0 || dr.fract() != 0.0 {
            return None;
        }
        let w = PixelWindow { row0: dr as usize, col0: dc as usize, rows: sub.height, cols: sub.width };
        (w.row_end() <= self.height && w.col_end() <= self.width).then_some(w)
    }
}

fn center_range(lo: f64, hi: f64, origin: f64, ps: f64, n: usize) -> (usize, usize) {
    if hi < lo {
        return (0, 0);
    }
    let first = ((lo - origin) / ps - 0.5).ceil();
    let last = ((hi - origin) / ps - 0.5).floor();
    let first = first.max(0.0);
    let last = last.min(n as f64 - 1.0);
    if last < first {
        return (0, 0);
    }
    (first as usize, last as usize + 1)
}

/// Band identifiers known to the cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[allow(non_camel_case_types)]
pub enum BandId {
    B02,
    B03,
    B04,
    B08,
    NDVI,
    SIGMA0_VV,
    SIGMA0_VH,
    COHERENCE_VV,
    SCL,
}

impl BandId {
    pub const ALL: [BandId; 9] = [
        BandId::B02,
        BandId::B03,
        BandId::B04,
        BandId::B08,
        BandId::NDVI,
        BandId::SIGMA0_VV,
        BandId::SIGMA0_VH,
        BandId::COHERENCE_VV,
        BandId::SCL,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BandId::B02 => "B02",
            BandId::B03 => "B03",
            BandId::B04 => "B04",
            BandId::B08 => "B08",
            BandId::NDVI => "NDVI",
            BandId::SIGMA0_VV => "SIGMA0_VV",
            BandId::SIGMA0_VH => "SIGMA0_VH",
            BandId::COHERENCE_VV => "COHERENCE_VV",
            BandId::SCL => "SCL",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            BandId::B02 | BandId::B03 | BandId::B04 | BandId::B08 => "reflectance",
            BandId::NDVI => "index",
            BandId::SIGMA0_VV | BandId::SIGMA0_VH => "dB",
            BandId::COHERENCE_VV => "coherence",
            BandId::SCL => "class",
        }
    }

    /// Physically plausible closed value range.
    pub fn valid_range(self) -> (f64, f64) {
        match self {
            BandId::B02 | BandId::B03 | BandId::B04 | BandId::B08 => (0.0, 1.0),
            BandId::NDVI => (-1.0, 1.0),
            BandId::SIGMA0_VV | BandId::SIGMA0_VH => (-50.0, 20.0),
            BandId::COHERENCE_VV => (0.0, 1.0),
            BandId::SCL => (0.0, 5.0),
        }
    }

    pub fn is_categorical(self) -> bool {
        matches!(self, BandId::SCL)
    }
}

impl fmt::Display for BandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BandId {
    type Err = Error;

    fn from_str(s: &str) -> Result<BandId> {
        let up = s.trim().to_ascii_uppercase();
        BandId::ALL
            .iter()
            .copied()
            .find(|b| b.name() == up)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown band '{s}'")))
    }
}

/// Single-band raster on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub grid: GridSpec,
    pub values: Array2<f32>,
    pub nodata: f32,
    pub categorical: bool,
}

impl Raster {
    pub fn new(grid: GridSpec, values: Array2<f32>, nodata: f32) -> Result<Raster> {
        if values.dim() != (grid.height, grid.width) {
            return Err(Error::InvalidArgument(format!(
                "raster values shape {:?} does not match grid {}x{}",
                values.dim(),
                grid.height,
                grid.width
            )));
        }
        Ok(Raster { grid, values, nodata, categorical: false })
    }

    pub fn filled(grid: GridSpec, value: f32, nodata: f32) -> Raster {
        let values = Array2::from_elem((grid.height, grid.width), value);
        Raster { grid, values, nodata, categorical: false }
    }

    pub fn categorical(mut self) -> Raster {
        self.categorical = true;
        self
    }

    /// NaN is always treated as nodata, in addition to the sentinel.
    pub fn is_nodata(&self, v: f32) -> bool {
        v.is_nan() || v == self.nodata
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMethod {
    #[default]
    Nearest,
    Bilinear,
}

impl FromStr for ResampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(ResampleMethod::Nearest),
            "bilinear" => Ok(ResampleMethod::Bilinear),
            _ => Err(Error::InvalidArgument(format!("unknown resampling method '{s}'"))),
        }
    }
}

/// Resample `src` onto `target` by sampling each target pixel center.
///
/// Bilinear interpolation weights the four surrounding source centers; near the
/// source border the sample position is clamped to the outermost centers. A
/// sample that draws a non-zero weight from a nodata pixel is nodata.
pub fn resample_to_grid(src: &Raster, target: &GridSpec, method: ResampleMethod) -> Result<Raster> {
    if src.grid.crs_id != target.crs_id {
        return Err(Error::CrsMismatch {
            source_crs: src.grid.crs_id.clone(),
            target_crs: target.crs_id.clone(),
        });
    }
    if method == ResampleMethod::Bilinear && src.categorical {
        return Err(Error::CategoricalBilinear);
    }
    if src.grid.is_aligned(target) {
        return Ok(src.clone());
    }
    let g = &src.grid;
    let (sw, sh) = (g.width as f64, g.height as f64);
    let mut out = Array2::from_elem((target.height, target.width), src.nodata);
    for ((r, c), v) in out.indexed_iter_mut() {
        let (x, y) = target.center(r, c);
        let fx = (x - g.origin_x) / g.pixel_size;
        let fy = (y - g.origin_y) / g.pixel_size;
        if !(fx >= 0.0 && fx < sw && fy >= 0.0 && fy < sh) {
            continue;
        }
        *v = match method {
            ResampleMethod::Nearest => src.values[[fy as usize, fx as usize]],
            ResampleMethod::Bilinear => bilinear_sample(src, fx - 0.5, fy - 0.5),
        };
    }
    Ok(Raster { grid: target.clone(), values: out, nodata: src.nodata, categorical: src.categorical })
}

fn bilinear_sample(src: &Raster, px: f64, py: f64) -> f32 {
    let (w, h) = (src.grid.width, src.grid.height);
    let px = px.clamp(0.0, (w - 1) as f64);
    let py = py.clamp(0.0, (h - 1) as f64);
    let c0 = px.floor() as usize;
    let r0 = py.floor() as usize;
    let tx = px - c0 as f64;
    let ty = py - r0 as f64;
    let c1 = (c0 + 1).min(w - 1);
    let r1 = (r0 + 1).min(h - 1);
    let taps = [
        (r0, c0, (1.0 - ty) * (1.0 - tx)),
        (r0, c1, (1.0 - ty) * tx),
        (r1, c0, ty * (1.0 - tx)),
        (r1, c1, ty * tx),
    ];
    let mut acc = 0.0f64;
    for (r, c, wgt) in taps {
        if wgt == 0.0 {
            continue;
        }
        let v = src.values[[r, c]];
        if src.is_nodata(v) {
            return src.nodata;
        }
        acc += wgt * v as f64;
    }
    acc as f32
}

/// Dense cube `(time, band, y, x)` with a validity mask of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeArray {
    pub grid: GridSpec,
    pub times: Vec<Day>,
    pub bands: Vec<BandId>,
    pub values: Array4<f32>,
    pub valid: Array4<bool>,
}

impl CubeArray {
    pub fn new(
        grid: GridSpec,
        times: Vec<Day>,
        bands: Vec<BandId>,
        values: Array4<f32>,
        valid: Array4<bool>,
    ) -> Result<CubeArray> {
        let shape = (times.len(), bands.len(), grid.height, grid.width);
        if values.dim() != shape || valid.dim() != shape {
            return Err(Error::InvalidArgument(format!(
                "cube arrays {:?}/{:?} do not match axes {:?}",
                values.dim(),
                valid.dim(),
                shape
            )));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("cube times must be strictly increasing".into()));
        }
        for (i, b) in bands.iter().enumerate() {
            if bands[..i].contains(b) {
                return Err(Error::InvalidArgument(format!("duplicate band {b} in cube")));
            }
        }
        Ok(CubeArray { grid, times, bands, values, valid })
    }

    /// All-invalid cube with the given axes.
    pub fn empty(grid: GridSpec, times: Vec<Day>, bands: Vec<BandId>) -> CubeArray {
        let shape = (times.len(), bands.len(), grid.height, grid.width);
        CubeArray {
            grid,
            times,
            bands,
            values: Array4::zeros(shape),
            valid: Array4::from_elem(shape, false),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }

    pub fn band_index(&self, band: BandId) -> Option<usize> {
        self.bands.iter().position(|&b| b == band)
    }

    pub fn time_index(&self, day: Day) -> Option<usize> {
        self.times.binary_search(&day).ok()
    }

    pub fn slice(&self, t: usize, b: usize) -> (ArrayView2<'_, f32>, ArrayView2<'_, bool>) {
        (self.values.slice(s![t, b, .., ..]), self.valid.slice(s![t, b, .., ..]))
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Sub-cube for a half-open time interval, a band subset and the pixels
    /// whose centers lie in `bbox`. Bands keep the cube's order; bands the cube
    /// lacks are ignored. An empty selection yields zero-length axes.
    pub fn select(&self, sel: &Selection) -> CubeArray {
        let t_idx: Vec<usize> = self
            .times
            .iter()
            .enumerate()
            .filter(|(_, &d)| sel.time_range.is_none_or(|(a, b)| d >= a && d < b))
            .map(|(i, _)| i)
            .collect();
        let b_idx: Vec<usize> = self
            .bands
            .iter()
            .enumerate()
            .filter(|(_, b)| sel.bands.as_ref().is_none_or(|want| want.contains(b)))
            .map(|(i, _)| i)
            .collect();
        let win = match &sel.bbox {
            Some(bb) => self.grid.window_for_bbox(bb),
            None => self.grid.full_window(),
        };
        self.take(&t_idx, &b_idx, &win)
    }

    /// Copy of a pixel window, all times and bands.
    pub fn crop(&self, win: &PixelWindow) -> CubeArray {
        let t: Vec<usize> = (0..self.times.len()).collect();
        let b: Vec<usize> = (0..self.bands.len()).collect();
        self.take(&t, &b, win)
    }

    fn take(&self, t_idx: &[usize], b_idx: &[usize], win: &PixelWindow) -> CubeArray {
        let grid = self.grid.subgrid(win);
        let times = t_idx.iter().map(|&i| self.times[i]).collect();
        let bands = b_idx.iter().map(|&i| self.bands[i]).collect();
        let shape = (t_idx.len(), b_idx.len(), win.rows, win.cols);
        let mut values = Array4::zeros(shape);
        let mut valid = Array4::from_elem(shape, false);
        for (ti, &t) in t_idx.iter().enumerate() {
            for (bi, &b) in b_idx.iter().enumerate() {
                let src = s![t, b, win.row0..win.row_end(), win.col0..win.col_end()];
                values.slice_mut(s![ti, bi, .., ..]).assign(&self.values.slice(src));
                valid.slice_mut(s![ti, bi, .., ..]).assign(&self.valid.slice(src));
            }
        }
        CubeArray { grid, times, bands, values, valid }
    }

    /// Content-independent fingerprint of the cube's coordinates.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.grid).unwrap_or_default());
        for t in &self.times {
            h.update(t.0.to_le_bytes());
        }
        for b in &self.bands {
            h.update(b.name().as_bytes());
        }
        hex_prefix(&h.finalize())
    }
}

pub(crate) fn hex_prefix(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selection {
    /// Half-open `[start, end)`.
    pub time_range: Option<(Day, Day)>,
    pub bands: Option<Vec<BandId>>,
    pub bbox: Option<BBox>,
}

/// Stack `(day, band, raster)` slices into a dense cube on `target`.
///
/// Rasters not on `target` are resampled (categorical bands always nearest).
/// Missing slices and nodata pixels become invalid. Repeated `(day, band)`
/// pairs are accepted only when their resampled contents are identical.
pub fn stack_cube(
    rasters: Vec<(Day, BandId, Raster)>,
    target: &GridSpec,
    method: ResampleMethod,
) -> Result<CubeArray> {
    target.validate()?;
    let mut slices: BTreeMap<(Day, BandId), Raster> = BTreeMap::new();
    for (day, band, raster) in rasters {
        let m = if band.is_categorical() || raster.categorical { ResampleMethod::Nearest } else { method };
        let r = resample_to_grid(&raster, target, m)?;
        if let Some(prev) = slices.get(&(day, band)) {
            if !same_content(prev, &r) {
                return Err(Error::ConflictingSlice { day: day.to_string(), band: band.to_string() });
            }
            continue;
        }
        slices.insert((day, band), r);
    }
    let mut times: Vec<Day> = slices.keys().map(|k| k.0).collect();
    times.dedup();
    let mut bands: Vec<BandId> = slices.keys().map(|k| k.1).collect();
    bands.sort();
    bands.dedup();
    let mut cube = CubeArray::empty(target.clone(), times, bands);
    for ((day, band), r) in &slices {
        let t = cube.time_index(*day).unwrap();
        let b = cube.band_index(*band).unwrap();
        let mut vals = cube.values.slice_mut(s![t, b, .., ..]);
        vals.assign(&r.values);
        let mut ok = cube.valid.slice_mut(s![t, b, .., ..]);
        ndarray::Zip::from(&mut ok).and(&r.values).for_each(|o, &v| *o = !r.is_nodata(v));
    }
    Ok(cube)
}

fn same_content(a: &Raster, b: &Raster) -> bool {
    a.values.iter().zip(b.values.iter()).all(|(&x, &y)| {
        let nx = a.is_nodata(x);
        let ny = b.is_nodata(y);
        (nx && ny) || (!nx && !ny && x.to_bits() == y.to_bits())
    })
}

/// Read access to cube data by pixel window, used by the per-parcel
/// (serial) query path. In-memory cubes copy the window; tiled stores read the
/// tiles that intersect it.
pub trait CubeSource {
    fn grid(&self) -> &GridSpec;
    fn times(&self) -> &[Day];
    fn bands(&self) -> &[BandId];
    fn load_window(&self, win: &PixelWindow, bands: &[BandId]) -> Result<CubeArray>;
    /// Scene-level cloud cover of `(t, band)` over the full grid.
    fn scene_cloud_fraction(&self, t: usize, band: BandId) -> f64;
}

impl CubeSource for CubeArray {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn times(&self) -> &[Day] {
        &self.times
    }

    fn bands(&self) -> &[BandId] {
        &self.bands
    }

    fn load_window(&self, win: &PixelWindow, bands: &[BandId]) -> Result<CubeArray> {
        let t: Vec<usize> = (0..self.times.len()).collect();
        let mut b = Vec::with_capacity(bands.len());
        for band in bands {
            b.push(self.band_index(*band).ok_or_else(|| {
                Error::InvalidArgument(format!("band {band} not in cube"))
            })?);
        }
        Ok(self.take(&t, &b, win))
    }

    fn scene_cloud_fraction(&self, t: usize, band: BandId) -> f64 {
        scene_cloud_fraction(self, t, band)
    }
}

/// Cloud cover of one scene: share of pixels whose scene class is cloud,
/// shadow or nodata when a scene-class slice exists at `t`, otherwise the
/// share of invalid cells of `band`.
pub fn scene_cloud_fraction(cube: &CubeArray, t: usize, band: BandId) -> f64 {
    let n = cube.grid.cell_count().max(1) as f64;
    if let Some(scl) = cube.band_index(BandId::SCL) {
        let (vals, ok) = cube.slice(t, scl);
        if ok.iter().any(|&v| v) {
            let masked = vals
                .iter()
                .zip(ok.iter())
                .filter(|(&v, &ok)| !ok || v == 0.0 || v == 2.0 || v == 3.0)
                .count();
            return masked as f64 / n;
        }
    }
    match cube.band_index(band) {
        Some(b) => cube.valid.index_axis(Axis(0), t).index_axis(Axis(0), b).iter().filter(|&&v| !v).count() as f64 / n,
        None => 1.0,
    }
}
