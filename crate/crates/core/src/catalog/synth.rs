// SPDX-License-Identifier: Apache-2.0

//! Deterministic synthetic scenes, parcels and declarations.
//!
//! Parcels are jittered convex quadrilaterals on a lattice. Each parcel follows
//! a crop-specific seasonal NDVI curve (dormancy, logistic green-up, plateau,
//! logistic senescence), optionally cut by planted mowing events. Optical
//! scenes carry per-pixel noise and, with a configured probability, cloud and
//! shadow blobs in the scene classification layer. Every cloud is surrounded by
//! a thin haze ring that is *not* flagged, so only a cloud buffer removes it.
//!
//! Randomness comes from one ChaCha stream per purpose (layout, crop draw,
//! each scene), so scenes can be rendered in any order with identical bytes.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::NaiveTime;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::store::{Catalog, ProductRecord, Sensor};
use crate::error::{Error, Result};
use crate::grid::{BandId, GridSpec, Raster};
use crate::parcels::{rasterize_parcels, LabelRaster, Parcel, Polygon};
use crate::time::Day;

pub const CROPS: [&str; 5] = ["barley", "grassland", "maize", "sunflower", "wheat"];
pub const BACKGROUND_NDVI: f64 = 0.12;
/// Width of the unflagged haze ring around clouds, in meters.
pub const HAZE_WIDTH_M: f64 = 40.0;
const MIN_CELL_PX: f64 = 4.0;
const NODATA: f32 = -9999.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `base + amplitude · σ((doy − sos)/w_up) · σ((eos − doy)/w_down)`, doy 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropCurve {
    pub base: f64,
    pub amplitude: f64,
    pub sos: f64,
    pub eos: f64,
    pub w_up: f64,
    pub w_down: f64,
}

/// Season markers of a continuous curve, as 0-based day-of-year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhenologyTruth {
    pub sos: f64,
    pub pos: f64,
    pub eos: f64,
}

impl CropCurve {
    pub fn value(&self, doy: f64) -> f64 {
        self.base + self.amplitude * sigmoid((doy - self.sos) / self.w_up) * sigmoid((self.eos - doy) / self.w_down)
    }

    /// Markers using the same definition as the phenology extractor: peak,
    /// and first/last crossings of `min + fraction · (max − min)` over the year.
    pub fn phenology_truth(&self, fraction: f64) -> PhenologyTruth {
        // golden-section search for the peak between the inflection points
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (self.sos, self.eos);
        while b - a > 1e-7 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if self.value(c) >= self.value(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let pos = 0.5 * (a + b);
        let peak = self.value(pos);
        let low = self.value(0.0).min(self.value(365.0));
        let level = low + fraction * (peak - low);
        let cross = |mut lo: f64, mut hi: f64, rising: bool| {
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if (self.value(mid) >= level) == rising {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        };
        PhenologyTruth { sos: cross(0.0, pos, true), pos, eos: cross(pos, 365.0, false) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MowingSpec {
    pub parcel_id: i32,
    pub day: Day,
    /// NDVI drop reached 10 days after `day`.
    pub depth: f64,
}

/// Parcel declared as `declared` whose true crop is `actual`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchSpec {
    pub parcel_id: i32,
    #[serde(default = "default_declared")]
    pub declared: String,
    pub actual: String,
}

fn default_declared() -> String {
    "maize".into()
}

pub const MOW_DROP_DAYS: f64 = 10.0;
pub const MOW_HOLD_DAYS: f64 = 5.0;
pub const MOW_RECOVERY_DAYS: f64 = 40.0;

impl MowingSpec {
    pub fn effect(&self, day: Day) -> f64 {
        let dt = (day.0 - self.day.0) as f64;
        if dt < 0.0 {
            0.0
        } else if dt <= MOW_DROP_DAYS {
            self.depth * dt / MOW_DROP_DAYS
        } else if dt <= MOW_DROP_DAYS + MOW_HOLD_DAYS {
            self.depth
        } else if dt <= MOW_DROP_DAYS + MOW_HOLD_DAYS + MOW_RECOVERY_DAYS {
            self.depth * (1.0 - (dt - MOW_DROP_DAYS - MOW_HOLD_DAYS) / MOW_RECOVERY_DAYS)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub grid: GridSpec,
    pub n_parcels: usize,
    pub start: Day,
    /// Inclusive.
    pub end: Day,
    pub revisit_days: i32,
    #[serde(default)]
    pub s1_revisit_days: Option<i32>,
    pub crop_mix: BTreeMap<String, f64>,
    #[serde(default)]
    pub cloud_probability: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub mismatches: Vec<MismatchSpec>,
    #[serde(default)]
    pub mowing: Vec<MowingSpec>,
    /// Inclusive day ranges in which every optical scene is fully clouded.
    #[serde(default)]
    pub overcast: Vec<(Day, Day)>,
    #[serde(default = "default_tile")]
    pub tile_id: String,
    pub rng_seed: u64,
}

fn default_noise() -> f64 {
    0.03
}

fn default_tile() -> String {
    "T00SYN".into()
}

impl SyntheticConfig {
    /// Small single-year configuration used by examples and tests.
    pub fn demo(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            grid: GridSpec::new(500_000.0, 4_400_000.0, 10.0, 64, 64, "EPSG:32634").unwrap(),
            n_parcels: 16,
            start: Day::from_ymd(2020, 1, 1).unwrap(),
            end: Day::from_ymd(2020, 12, 31).unwrap(),
            revisit_days: 5,
            s1_revisit_days: None,
            crop_mix: [("maize".to_string(), 0.5), ("wheat".to_string(), 0.25), ("grassland".to_string(), 0.25)].into(),
            cloud_probability: 0.3,
            noise_sigma: 0.03,
            mismatches: vec![],
            mowing: vec![],
            overcast: vec![],
            tile_id: default_tile(),
            rng_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_parcels == 0 {
            return cfg("n_parcels must be positive".into());
        }
        if self.end < self.start {
            return cfg("end precedes start".into());
        }
        if self.revisit_days < 1 || self.s1_revisit_days.is_some_and(|d| d < 1) {
            return cfg("revisit intervals must be >= 1 day".into());
        }
        if !(0.0..=1.0).contains(&self.cloud_probability) {
            return cfg("cloud_probability must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return cfg("noise_sigma must be non-negative".into());
        }
        let total: f64 = self.crop_mix.values().sum();
        if (total - 1.0).abs() > 1e-9 || self.crop_mix.values().any(|&f| f < 0.0) {
            return cfg(format!("crop fractions must be non-negative and sum to 1, got {total}"));
        }
        for crop in self.crop_mix.keys().chain(self.mismatches.iter().flat_map(|m| [&m.declared, &m.actual])) {
            if !CROPS.contains(&crop.as_str()) {
                return cfg(format!("unknown crop '{crop}'"));
            }
        }
        let ids = 1..=self.n_parcels as i32;
        for id in self.mismatches.iter().map(|m| m.parcel_id).chain(self.mowing.iter().map(|m| m.parcel_id)) {
            if !ids.contains(&id) {
                return cfg(format!("planted anomaly references parcel {id} outside 1..={}", self.n_parcels));
            }
        }
        if self.mowing.iter().any(|m| !(m.depth > 0.0)) {
            return cfg("mowing depth must be positive".into());
        }
        self.lattice()?;
        Ok(())
    }

    /// `(rows, cols, cell height px, cell width px)` of the parcel lattice.
    fn lattice(&self) -> Result<(usize, usize, f64, f64)> {
        let (w, h) = (self.grid.width as f64, self.grid.height as f64);
        let n = self.n_parcels as f64;
        let cols = ((n * w / h).sqrt().ceil() as usize).max(1);
        let rows = self.n_parcels.div_ceil(cols);
        let (ch, cw) = (h / rows as f64, w / cols as f64);
        if ch < MIN_CELL_PX || cw < MIN_CELL_PX {
            return Err(Error::Config(format!(
                "{} parcels do not fit a {}x{} grid without overlap (cell {:.1}x{:.1} px, minimum {MIN_CELL_PX})",
                self.n_parcels, self.grid.width, self.grid.height, cw, ch
            )));
        }
        Ok((rows, cols, ch, cw))
    }

    pub fn s2_days(&self) -> Vec<Day> {
        (0..).map(|k| self.start.plus(k * self.revisit_days)).take_while(|d| *d <= self.end).collect()
    }

    pub fn s1_days(&self) -> Vec<Day> {
        match self.s1_revisit_days {
            Some(step) => (0..).map(|k| self.start.plus(k * step)).take_while(|d| *d <= self.end).collect(),
            None => vec![],
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.rng_seed);
        r.set_stream(stream);
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParcelTruth {
    pub id: i32,
    pub crop: String,
    pub declared: String,
    pub curve: CropCurve,
    pub brightness: f64,
    pub mowing: Vec<MowingSpec>,
}

impl ParcelTruth {
    /// Noise-free NDVI on `day`.
    pub fn ndvi(&self, day: Day) -> f64 {
        let cut = self.mowing.iter().map(|m| m.effect(day)).fold(0.0, f64::max);
        (self.curve.value(day.day_of_year() as f64) - cut).clamp(-1.0, 1.0)
    }
}

fn draw_curve(crop: &str, rng: &mut ChaCha8Rng) -> CropCurve {
    let shift = rng.random_range(-8.0..8.0);
    let stretch = rng.random_range(-5.0..5.0);
    let gain = rng.random_range(0.92..1.08);
    let (base, amp, sos, eos, w) = match crop {
        "wheat" => (0.18, 0.62, 95.0, 160.0, 9.0),
        "barley" => (0.18, 0.58, 85.0, 148.0, 8.0),
        "maize" => (0.15, 0.70, 160.0, 225.0, 10.0),
        "sunflower" => (0.15, 0.60, 150.0, 212.0, 9.0),
        _ => {
            let len = rng.random_range(100.0..220.0);
            let mid = 185.0 + shift;
            return CropCurve { base: 0.2, amplitude: 0.52, sos: mid - len / 2.0, eos: mid + len / 2.0, w_up: 15.0, w_down: 15.0 };
        }
    };
    CropCurve { base, amplitude: amp * gain, sos: sos + shift, eos: eos + shift + stretch, w_up: w, w_down: w }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub parcels: Vec<Parcel>,
    pub truth: BTreeMap<i32, ParcelTruth>,
    pub labels: LabelRaster,
}

/// Lay out parcels, draw crops and curves, and rasterize. Scenes are rendered
/// on demand by [`SyntheticDataset::render_scene`].
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let (_, cols, ch, cw) = cfg.lattice()?;
    let g = &cfg.grid;
    let mut layout = cfg.rng(0);
    let mut crops = cfg.rng(1);
    let mix: Vec<(&String, f64)> = cfg.crop_mix.iter().map(|(k, v)| (k, *v)).collect();
    let mut parcels = Vec::with_capacity(cfg.n_parcels);
    let mut truth = BTreeMap::new();
    for k in 0..cfg.n_parcels {
        let id = k as i32 + 1;
        let (r, c) = ((k / cols) as f64, (k % cols) as f64);
        let margin = (0.08 * cw.min(ch)).max(0.3);
        let jx = 0.15 * cw;
        let jy = 0.15 * ch;
        let mut corner = |fx: f64, fy: f64, sx: f64, sy: f64| -> [f64; 2] {
            let px = (c + fx) * cw + sx * (margin + layout.random_range(0.0..jx));
            let py = (r + fy) * ch + sy * (margin + layout.random_range(0.0..jy));
            [g.origin_x + px * g.pixel_size, g.origin_y + py * g.pixel_size]
        };
        let tl = corner(0.0, 0.0, 1.0, 1.0);
        let tr = corner(1.0, 0.0, -1.0, 1.0);
        let br = corner(1.0, 1.0, -1.0, -1.0);
        let bl = corner(0.0, 1.0, 1.0, -1.0);
        let poly = Polygon::new(vec![tl, tr, br, bl, tl], vec![])?;

        let u: f64 = crops.random();
        let mut acc = 0.0;
        let mut crop = mix.last().map(|m| m.0.clone()).unwrap_or_default();
        for (name, f) in &mix {
            acc += f;
            if u < acc {
                crop = (*name).clone();
                break;
            }
        }
        let mut declared = crop.clone();
        if let Some(m) = cfg.mismatches.iter().find(|m| m.parcel_id == id) {
            crop = m.actual.clone();
            declared = m.declared.clone();
        }
        let curve = draw_curve(&crop, &mut crops);
        let brightness = crops.random_range(0.25..0.45);
        let mowing = cfg.mowing.iter().filter(|m| m.parcel_id == id).cloned().collect();
        parcels.push(Parcel::new(id, poly, declared.clone())?);
        truth.insert(id, ParcelTruth { id, crop, declared, curve, brightness, mowing });
    }
    let labels = rasterize_parcels(&parcels, g)?.labels;
    Ok(SyntheticDataset { config: cfg.clone(), parcels, truth, labels })
}

struct Disc {
    x: f64,
    y: f64,
    r: f64,
}

impl SyntheticDataset {
    /// `(sensor, day)` of every scene, by day then sensor.
    pub fn scenes(&self) -> Vec<(Sensor, Day)> {
        let mut v: Vec<(Sensor, Day)> = self.config.s2_days().into_iter().map(|d| (Sensor::S2, d)).collect();
        v.extend(self.config.s1_days().into_iter().map(|d| (Sensor::S1, d)));
        v.sort_by_key(|&(s, d)| (d, s));
        v
    }

    pub fn is_overcast(&self, day: Day) -> bool {
        self.config.overcast.iter().any(|&(a, b)| day >= a && day <= b)
    }

    fn true_ndvi(&self, row: usize, col: usize, day: Day) -> (f64, f64) {
        match self.labels.labels[(row, col)] {
            id if id > 0 => {
                let t = &self.truth[&id];
                (t.ndvi(day), t.brightness)
            }
            _ => (BACKGROUND_NDVI, 0.3),
        }
    }

    pub fn product_id(&self, sensor: Sensor, day: Day) -> String {
        format!("{sensor}_SYN_{}_{}", day.compact(), self.config.tile_id)
    }

    pub fn render_scene(&self, sensor: Sensor, day: Day) -> Result<(ProductRecord, Vec<(BandId, Raster)>)> {
        let g = &self.config.grid;
        let hour = if sensor == Sensor::S2 { 10 } else { 5 };
        let when = day.date().and_time(NaiveTime::from_hms_opt(hour, 30, 0).unwrap());
        let rec = ProductRecord::new(self.product_id(sensor, day), sensor, when, g.extent(), &self.config.tile_id, &g.crs_id);
        let stream = ((sensor == Sensor::S1) as u64) << 40 | (day.0 as u32 as u64) | 1 << 48;
        let mut rng = self.config.rng(stream);
        let rasters = match sensor {
            Sensor::S2 => self.render_optical(day, &mut rng)?,
            Sensor::S1 => self.render_radar(day, &mut rng)?,
        };
        Ok((rec, rasters))
    }

    fn render_optical(&self, day: Day, rng: &mut ChaCha8Rng) -> Result<Vec<(BandId, Raster)>> {
        let g = &self.config.grid;
        let (h, w) = (g.height, g.width);
        let noise = Normal::new(0.0, self.config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let overcast = self.is_overcast(day);
        let mut discs = Vec::new();
        let cloudy: f64 = rng.random();
        if !overcast && cloudy < self.config.cloud_probability {
            let n = rng.random_range(1..=3);
            let side = w.min(h) as f64;
            for _ in 0..n {
                discs.push(Disc {
                    x: rng.random_range(0.0..w as f64),
                    y: rng.random_range(0.0..h as f64),
                    r: rng.random_range((0.04 * side).max(2.0)..(0.12 * side).max(3.0)),
                });
            }
        }
        let haze_px = HAZE_WIDTH_M / g.pixel_size;
        let shadow_dx = 0.6;
        let mut b02 = Array2::zeros((h, w));
        let mut b03 = Array2::zeros((h, w));
        let mut b04 = Array2::zeros((h, w));
        let mut b08 = Array2::zeros((h, w));
        let mut scl = Array2::from_elem((h, w), 1.0f32);
        for r in 0..h {
            for c in 0..w {
                let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                let (ndvi, s) = self.true_ndvi(r, c, day);
                let e = noise.sample(rng);
                let mut cloud_gap = f64::INFINITY;
                let mut shadow = false;
                for d in &discs {
                    cloud_gap = cloud_gap.min(((px - d.x).powi(2) + (py - d.y).powi(2)).sqrt() - d.r);
                    let (sx, sy) = (d.x + shadow_dx * d.r, d.y + shadow_dx * d.r);
                    shadow |= ((px - sx).powi(2) + (py - sy).powi(2)).sqrt() <= d.r;
                }
                let (red, nir, class) = if overcast || cloud_gap <= 0.0 {
                    (0.42 + 0.3 * e.abs(), 0.45 + 0.3 * e.abs(), 2.0)
                } else if shadow {
                    let v = (ndvi + e).clamp(-1.0, 1.0);
                    (0.25 * s * (1.0 - v) / 2.0, 0.25 * s * (1.0 + v) / 2.0, 3.0)
                } else {
                    let mut v = (ndvi + e).clamp(-1.0, 1.0);
                    let mut bright = s;
                    if cloud_gap < haze_px {
                        let k = 1.0 - cloud_gap / haze_px;
                        v *= 1.0 - 0.6 * k;
                        bright += 0.25 * k;
                    }
                    (bright * (1.0 - v) / 2.0, bright * (1.0 + v) / 2.0, 1.0)
                };
                b04[(r, c)] = red as f32;
                b08[(r, c)] = nir as f32;
                b02[(r, c)] = (0.8 * red + 0.01) as f32;
                b03[(r, c)] = (0.3 * (red + nir) + 0.005) as f32;
                scl[(r, c)] = class;
            }
        }
        Ok(vec![
            (BandId::B02, Raster::new(g.clone(), b02, NODATA)?),
            (BandId::B03, Raster::new(g.clone(), b03, NODATA)?),
            (BandId::B04, Raster::new(g.clone(), b04, NODATA)?),
            (BandId::B08, Raster::new(g.clone(), b08, NODATA)?),
            (BandId::SCL, Raster::new(g.clone(), scl, 0.0)?.categorical()),
        ])
    }

    fn render_radar(&self, day: Day, rng: &mut ChaCha8Rng) -> Result<Vec<(BandId, Raster)>> {
        let g = &self.config.grid;
        let (h, w) = (g.height, g.width);
        let speckle = Normal::new(0.0, 0.8).unwrap();
        let coh_noise = Normal::new(0.0, 0.04).unwrap();
        let mut vv = Array2::zeros((h, w));
        let mut vh = Array2::zeros((h, w));
        let mut coh = Array2::zeros((h, w));
        // slight annual moisture cycle in backscatter
        let season = (2.0 * PI * day.day_of_year() as f64 / 365.0).cos();
        for r in 0..h {
            for c in 0..w {
                let (ndvi, _) = self.true_ndvi(r, c, day);
                let s0 = -17.0 + 7.0 * ndvi + 0.8 * season + speckle.sample(rng);
                vv[(r, c)] = s0 as f32;
                vh[(r, c)] = (s0 - 6.0 + 0.5 * speckle.sample(rng)) as f32;
                coh[(r, c)] = (0.75 - 0.6 * ndvi + coh_noise.sample(rng)).clamp(0.0, 1.0) as f32;
            }
        }
        Ok(vec![
            (BandId::SIGMA0_VV, Raster::new(g.clone(), vv, NODATA)?),
            (BandId::SIGMA0_VH, Raster::new(g.clone(), vh, NODATA)?),
            (BandId::COHERENCE_VV, Raster::new(g.clone(), coh, NODATA)?),
        ])
    }

    /// Render and ingest every scene; returns the number of products.
    pub fn write_to_catalog(&self, catalog: &mut Catalog) -> Result<usize> {
        let scenes = self.scenes();
        for &(sensor, day) in &scenes {
            let (rec, rasters) = self.render_scene(sensor, day)?;
            catalog.ingest_product(rec, &rasters)?;
        }
        Ok(scenes.len())
    }

    /// Declared-vs-actual crop table and planted events, for checking results.
    pub fn truth_json(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.config.rng_seed,
            "parcels": self.truth.values().collect::<Vec<_>>(),
        })
    }
}
