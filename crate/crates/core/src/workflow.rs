// SPDX-License-Identifier: Apache-2.0

//! Catalog to cube: run the pending processing steps and stack product bands
//! into an analysis cube.

use std::collections::BTreeMap;

use chrono::NaiveTime;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, FlagState, ProductQuery, ProductRecord, Sensor};
use crate::error::{Error, Result};
use crate::features::with_ndvi;
use crate::grid::{stack_cube, BBox, BandId, CubeArray, GridSpec, ResampleMethod, Selection};
use crate::time::Day;

const PROCESSING_STEPS: [&str; 3] = ["ard", "mask", "cube"];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepReport {
    pub done: BTreeMap<String, usize>,
    pub failed: Vec<(String, String, String)>,
}

fn bands_readable(catalog: &Catalog, rec: &ProductRecord, bands: &[BandId]) -> std::result::Result<(), String> {
    for &b in bands {
        catalog.read_band(rec, b, None).map_err(|e| format!("band {b}: {e}"))?;
    }
    Ok(())
}

/// Run every pending or failed `ard`, `mask` and `cube` step whose `index`
/// step is done. The data is already analysis-ready, so each step checks
/// that the bands it depends on are readable.
pub fn process_pending(catalog: &mut Catalog) -> Result<StepReport> {
    let mut report = StepReport::default();
    for step in PROCESSING_STEPS {
        for id in catalog.pending_tasks(step) {
            let rec = catalog.get(&id).expect("listed product").clone();
            if rec.flag("index") != Some(FlagState::Done) {
                continue;
            }
            let needed: Vec<BandId> = match step {
                "mask" => vec![BandId::SCL],
                _ => rec.sensor.bands().to_vec(),
            };
            if rec.flag(step) == Some(FlagState::Failed) {
                catalog.set_flag(&id, step, FlagState::Pending, None)?;
            }
            match bands_readable(catalog, &rec, &needed) {
                Ok(()) => {
                    catalog.set_flag(&id, step, FlagState::Done, None)?;
                    *report.done.entry(step.to_string()).or_default() += 1;
                }
                Err(msg) => {
                    catalog.set_flag(&id, step, FlagState::Failed, Some(msg.clone()))?;
                    report.failed.push((id, step.to_string(), msg));
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeRequest {
    pub grid: GridSpec,
    /// Bands to load. `NDVI` is derived from B08 and B04.
    pub bands: Vec<BandId>,
    /// Inclusive.
    pub time_range: Option<(Day, Day)>,
    #[serde(default)]
    pub resample: ResampleMethod,
}

/// Dense cube over the products whose footprint meets `req.grid` and whose
/// `index` step is done. Bands missing on a date are invalid there.
pub fn build_cube(catalog: &Catalog, req: &CubeRequest) -> Result<CubeArray> {
    if req.bands.is_empty() {
        return Err(Error::InvalidArgument("cube request lists no bands".into()));
    }
    let extent: BBox = req.grid.extent();
    let midnight = NaiveTime::MIN;
    let last_second = NaiveTime::from_hms_opt(23, 59, 59).expect("valid time");
    let q = ProductQuery {
        time_range: req.time_range.map(|(a, b)| (a.date().and_time(midnight), b.date().and_time(last_second))),
        bbox: Some(extent),
        sensor: None,
    };
    let mut load: Vec<BandId> = Vec::new();
    for &b in &req.bands {
        let wanted: &[BandId] = if b == BandId::NDVI { &[BandId::B04, BandId::B08] } else { std::slice::from_ref(&b) };
        for &w in wanted {
            if !load.contains(&w) {
                load.push(w);
            }
        }
    }
    let mut slices = Vec::new();
    for rec in catalog.find(&q) {
        if rec.flag("index") != Some(FlagState::Done) {
            continue;
        }
        for &b in load.iter().filter(|b| rec.sensor.bands().contains(b)) {
            slices.push((rec.day(), b, catalog.read_band(rec, b, Some(&extent))?));
        }
    }
    if slices.is_empty() {
        return Err(Error::Precondition("no indexed products cover the requested grid and dates".into()));
    }
    let mut cube = stack_cube(slices, &req.grid, req.resample)?;
    for &b in &load {
        if cube.band_index(b).is_none() {
            return Err(Error::Precondition(format!("no product provides band {b}")));
        }
    }
    if req.bands.contains(&BandId::NDVI) {
        cube = with_ndvi(&cube)?;
    }
    Ok(cube.select(&Selection { bands: Some(req.bands.clone()), ..Default::default() }))
}

/// Sensors able to provide `band`.
pub fn sensors_for(band: BandId) -> Vec<Sensor> {
    [Sensor::S1, Sensor::S2]
        .into_iter()
        .filter(|s| s.bands().contains(&band) || (band == BandId::NDVI && *s == Sensor::S2))
        .collect()
}
