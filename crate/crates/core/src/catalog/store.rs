// SPDX-License-Identifier: Apache-2.0

//! Product catalog persisted as JSON lines, with per-step processing flags.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::catalog::tiles::{read_tiled, write_tiled, DType};
use crate::error::{Error, Result};
use crate::grid::{BBox, BandId, Raster};
use crate::time::Day;

pub const CATALOG_FILE: &str = "catalog.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sensor {
    S1,
    S2,
}

impl Sensor {
    pub fn bands(self) -> &'static [BandId] {
        match self {
            Sensor::S1 => &[BandId::SIGMA0_VV, BandId::SIGMA0_VH, BandId::COHERENCE_VV],
            Sensor::S2 => &[BandId::B02, BandId::B03, BandId::B04, BandId::B08, BandId::SCL],
        }
    }

    /// Processing chain per sensor. Radar scenes have no cloud-mask step.
    pub fn steps(self) -> &'static [&'static str] {
        match self {
            Sensor::S1 => &["index", "ard", "cube"],
            Sensor::S2 => &["index", "ard", "mask", "cube"],
        }
    }
}

impl fmt::Display for Sensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sensor::S1 => "S1",
            Sensor::S2 => "S2",
        })
    }
}

impl FromStr for Sensor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Sensor> {
        match s {
            "S1" => Ok(Sensor::S1),
            "S2" => Ok(Sensor::S2),
            _ => Err(Error::InvalidArgument(format!("unknown sensor '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagState {
    Pending,
    Done,
    Failed,
}

impl FlagState {
    pub fn can_become(self, to: FlagState) -> bool {
        matches!(
            (self, to),
            (FlagState::Pending, FlagState::Done) | (FlagState::Pending, FlagState::Failed) | (FlagState::Failed, FlagState::Pending)
        )
    }
}

impl fmt::Display for FlagState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlagState::Pending => "pending",
            FlagState::Done => "done",
            FlagState::Failed => "failed",
        })
    }
}

impl FromStr for FlagState {
    type Err = Error;

    fn from_str(s: &str) -> Result<FlagState> {
        match s {
            "pending" => Ok(FlagState::Pending),
            "done" => Ok(FlagState::Done),
            "failed" => Ok(FlagState::Failed),
            _ => Err(Error::InvalidArgument(format!("unknown flag state '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagStatus {
    pub state: FlagState,
    pub last_update: NaiveDateTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub product_id: String,
    pub sensor: Sensor,
    pub acquisition_time: NaiveDateTime,
    pub footprint: BBox,
    pub tile_id: String,
    pub crs_id: String,
    #[serde(default)]
    pub flags: BTreeMap<String, FlagStatus>,
    #[serde(default)]
    pub storage_path: String,
}

impl ProductRecord {
    pub fn new(product_id: impl Into<String>, sensor: Sensor, acquisition_time: NaiveDateTime, footprint: BBox, tile_id: impl Into<String>, crs_id: impl Into<String>) -> ProductRecord {
        ProductRecord {
            product_id: product_id.into(),
            sensor,
            acquisition_time,
            footprint,
            tile_id: tile_id.into(),
            crs_id: crs_id.into(),
            flags: BTreeMap::new(),
            storage_path: String::new(),
        }
    }

    pub fn day(&self) -> Day {
        Day::from_date(self.acquisition_time.date())
    }

    pub fn flag(&self, step: &str) -> Option<FlagState> {
        self.flags.get(step).map(|f| f.state)
    }

    /// `cube/<sensor>/<YYYY-MM-DD>`
    pub fn default_storage_path(&self) -> String {
        format!("cube/{}/{}", self.sensor, self.day())
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> NaiveDateTime;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> NaiveDateTime {
        let d = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap_or_default();
        DateTime::from_timestamp(d.as_secs() as i64, 0).map(|t| t.naive_utc()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub NaiveDateTime);

impl Clock for FixedClock {
    fn now(&self) -> NaiveDateTime {
        self.0
    }
}

/// Test hook: fail the write of the `band_index`-th band (0-based) of the next ingest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteFault {
    pub band_index: usize,
}

pub struct Catalog {
    root: PathBuf,
    records: BTreeMap<String, ProductRecord>,
    clock: Box<dyn Clock>,
    fault: Option<WriteFault>,
}

impl fmt::Debug for Catalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Catalog").field("root", &self.root).field("records", &self.records.len()).finish()
    }
}

/// Query filter; `None` fields match everything.
#[derive(Debug, Clone, Default)]
pub struct ProductQuery {
    /// Inclusive on both ends.
    pub time_range: Option<(NaiveDateTime, NaiveDateTime)>,
    pub bbox: Option<BBox>,
    pub sensor: Option<Sensor>,
}

impl ProductQuery {
    pub fn matches(&self, r: &ProductRecord) -> bool {
        self.time_range.is_none_or(|(a, b)| r.acquisition_time >= a && r.acquisition_time <= b)
            && self.bbox.as_ref().is_none_or(|b| b.intersects(&r.footprint))
            && self.sensor.is_none_or(|s| s == r.sensor)
    }
}

impl Catalog {
    /// Open (or create) the catalog in `root`; the latest line per product wins.
    pub fn open(root: &Path) -> Result<Catalog> {
        Catalog::open_with_clock(root, Box::new(SystemClock))
    }

    pub fn open_with_clock(root: &Path, clock: Box<dyn Clock>) -> Result<Catalog> {
        fs::create_dir_all(root)?;
        let mut records = BTreeMap::new();
        let path = root.join(CATALOG_FILE);
        if path.exists() {
            for (n, line) in fs::read_to_string(&path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: ProductRecord = serde_json::from_str(line)
                    .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), n + 1)))?;
                records.insert(rec.product_id.clone(), rec);
            }
        }
        Ok(Catalog { root: root.to_path_buf(), records, clock, fault: None })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn inject_write_fault(&mut self, fault: Option<WriteFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, product_id: &str) -> Option<&ProductRecord> {
        self.records.get(product_id)
    }

    /// Records ordered by acquisition time, then id.
    pub fn records(&self) -> Vec<&ProductRecord> {
        let mut v: Vec<&ProductRecord> = self.records.values().collect();
        v.sort_by(|a, b| (a.acquisition_time, &a.product_id).cmp(&(b.acquisition_time, &b.product_id)));
        v
    }

    pub fn find(&self, q: &ProductQuery) -> Vec<&ProductRecord> {
        self.records().into_iter().filter(|r| q.matches(r)).collect()
    }

    fn persist(&self, rec: &ProductRecord) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.root.join(CATALOG_FILE))?;
        let mut line = serde_json::to_string(rec)?;
        line.push('\n');
        f.write_all(line.as_bytes())?;
        Ok(())
    }

    pub fn band_path(&self, rec: &ProductRecord, band: BandId) -> PathBuf {
        self.root.join(&rec.storage_path).join(format!("{band}.tiles"))
    }

    fn check_rasters(rec: &ProductRecord, rasters: &[(BandId, Raster)]) -> Result<()> {
        let mut got: Vec<BandId> = rasters.iter().map(|r| r.0).collect();
        got.sort();
        let mut want = rec.sensor.bands().to_vec();
        want.sort();
        if got != want {
            return Err(Error::InvalidArgument(format!(
                "{}: bands {:?} do not match the {} band list {:?}",
                rec.product_id, got, rec.sensor, want
            )));
        }
        Ok(())
    }

    fn write_bands(&mut self, rec: &ProductRecord, rasters: &[(BandId, Raster)]) -> std::result::Result<(), String> {
        for (i, (band, raster)) in rasters.iter().enumerate() {
            if self.fault.is_some_and(|f| f.band_index == i) {
                self.fault = None;
                return Err(format!("injected write failure on band {band}"));
            }
            write_tiled(raster, &self.band_path(rec, *band), DType::for_band(*band)).map_err(|e| format!("band {band}: {e}"))?;
        }
        Ok(())
    }

    /// Register a product and write its band tiles. A failed tile write is
    /// recorded as a failed `index` flag; tiles already written stay intact.
    pub fn ingest_product(&mut self, mut record: ProductRecord, rasters: &[(BandId, Raster)]) -> Result<()> {
        if self.records.contains_key(&record.product_id) {
            return Err(Error::DuplicateProduct(record.product_id));
        }
        Catalog::check_rasters(&record, rasters)?;
        if record.storage_path.is_empty() {
            record.storage_path = record.default_storage_path();
        }
        if let Some(other) = self.records.values().find(|r| r.storage_path == record.storage_path) {
            return Err(Error::InvalidArgument(format!(
                "{}: storage slot {} already holds {}",
                record.product_id, record.storage_path, other.product_id
            )));
        }
        let now = self.clock.now();
        record.flags = record
            .sensor
            .steps()
            .iter()
            .map(|s| (s.to_string(), FlagStatus { state: FlagState::Pending, last_update: now, message: None }))
            .collect();
        let outcome = self.write_bands(&record, rasters);
        let flag = record.flags.get_mut("index").unwrap();
        let result = match outcome {
            Ok(()) => {
                flag.state = FlagState::Done;
                Ok(())
            }
            Err(msg) => {
                flag.state = FlagState::Failed;
                flag.message = Some(msg.clone());
                Err(Error::Storage(format!("{}: {msg}", record.product_id)))
            }
        };
        self.persist(&record)?;
        self.records.insert(record.product_id.clone(), record);
        result
    }

    /// Rewrite the tiles of a product whose `index` flag was put back to pending.
    pub fn reindex_product(&mut self, product_id: &str, rasters: &[(BandId, Raster)]) -> Result<()> {
        let rec = self.records.get(product_id).cloned().ok_or_else(|| Error::UnknownProduct(product_id.into()))?;
        if rec.flag("index") != Some(FlagState::Pending) {
            return Err(Error::Precondition(format!("{product_id}: index flag is not pending")));
        }
        Catalog::check_rasters(&rec, rasters)?;
        match self.write_bands(&rec, rasters) {
            Ok(()) => self.set_flag(product_id, "index", FlagState::Done, None),
            Err(msg) => {
                self.set_flag(product_id, "index", FlagState::Failed, Some(msg.clone()))?;
                Err(Error::Storage(format!("{product_id}: {msg}")))
            }
        }
    }

    pub fn set_flag(&mut self, product_id: &str, step: &str, to: FlagState, message: Option<String>) -> Result<()> {
        let now = self.clock.now();
        let rec = self.records.get(product_id).ok_or_else(|| Error::UnknownProduct(product_id.into()))?;
        let from = rec
            .flags
            .get(step)
            .ok_or_else(|| Error::InvalidArgument(format!("{product_id}: no step '{step}' for {}", rec.sensor)))?
            .state;
        if !from.can_become(to) {
            return Err(Error::IllegalTransition {
                product: product_id.into(),
                step: step.into(),
                from: from.to_string(),
                to: to.to_string(),
            });
        }
        let mut updated = rec.clone();
        updated.flags.insert(step.into(), FlagStatus { state: to, last_update: now, message });
        self.persist(&updated)?;
        self.records.insert(product_id.into(), updated);
        Ok(())
    }

    /// Products whose flag for `step` is pending or failed, by acquisition time.
    pub fn pending_tasks(&self, step: &str) -> Vec<String> {
        self.records()
            .into_iter()
            .filter(|r| matches!(r.flag(step), Some(FlagState::Pending | FlagState::Failed)))
            .map(|r| r.product_id.clone())
            .collect()
    }

    pub fn read_band(&self, rec: &ProductRecord, band: BandId, bbox: Option<&BBox>) -> Result<Raster> {
        let mut r = read_tiled(&self.band_path(rec, band), &rec.crs_id, bbox)?;
        r.categorical = band.is_categorical();
        Ok(r)
    }

    /// Rewrite the catalog file with one line per product.
    pub fn compact(&self) -> Result<()> {
        let mut text = String::new();
        for rec in self.records.values() {
            text.push_str(&serde_json::to_string(rec)?);
            text.push('\n');
        }
        crate::catalog::tiles::write_atomic(&self.root.join(CATALOG_FILE), text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn at(day: u32, hour: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2020, 6, day).unwrap().and_hms_opt(hour, 0, 0).unwrap()
    }

    fn clock() -> Box<dyn Clock> {
        Box::new(FixedClock(at(30, 12)))
    }

    fn grid() -> GridSpec {
        GridSpec::new(0.0, 0.0, 10.0, 20, 10, "EPSG:32634").unwrap()
    }

    fn s2(id: &str, day: u32) -> (ProductRecord, Vec<(BandId, Raster)>) {
        let g = grid();
        let rec = ProductRecord::new(id, Sensor::S2, at(day, 10), g.extent(), "T34SEJ", "EPSG:32634");
        let rasters = Sensor::S2
            .bands()
            .iter()
            .map(|&b| {
                let v = if b == BandId::SCL { 1.0 } else { 0.1 * day as f32 };
                (b, Raster::filled(g.clone(), v, if b == BandId::SCL { 0.0 } else { -1.0 }))
            })
            .collect();
        (rec, rasters)
    }

    #[test]
    fn ingest_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut cat = Catalog::open_with_clock(dir.path(), clock()).unwrap();
        let (rec, rasters) = s2("A", 1);
        cat.ingest_product(rec.clone(), &rasters).unwrap();
        let got = cat.get("A").unwrap();
        assert_eq!(got.flag("index"), Some(FlagState::Done));
        assert_eq!(got.flag("mask"), Some(FlagState::Pending));
        assert_eq!(got.storage_path, "cube/S2/2020-06-01");
        assert_eq!(cat.read_band(got, BandId::B04, None).unwrap().values, rasters[2].1.values);

        let before = fs::read(dir.path().join(CATALOG_FILE)).unwrap();
        assert!(matches!(cat.ingest_product(rec, &rasters), Err(Error::DuplicateProduct(_))));
        assert_eq!(fs::read(dir.path().join(CATALOG_FILE)).unwrap(), before);

        let reopened = Catalog::open(dir.path()).unwrap();
        assert_eq!(reopened.get("A"), cat.get("A"));
    }

    #[test]
    fn write_fault_marks_failed_without_partial_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let mut cat = Catalog::open_with_clock(dir.path(), clock()).unwrap();
        let (rec, full) = s2("F", 2);
        cat.inject_write_fault(Some(WriteFault { band_index: 1 }));
        assert!(matches!(cat.ingest_product(rec, &full), Err(Error::Storage(_))));
        let got = cat.get("F").unwrap().clone();
        assert_eq!(got.flag("index"), Some(FlagState::Failed));
        assert!(cat.band_path(&got, BandId::B02).exists());
        assert_eq!(cat.read_band(&got, BandId::B02, None).unwrap().values, full[0].1.values);
        assert!(!cat.band_path(&got, BandId::B03).exists());
        let leftovers: Vec<_> = fs::read_dir(dir.path().join(&got.storage_path)).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(leftovers.len(), 1, "{leftovers:?}");
        assert_eq!(cat.pending_tasks("index"), vec!["F".to_string()]);

        cat.set_flag("F", "index", FlagState::Pending, None).unwrap();
        cat.reindex_product("F", &full).unwrap();
        assert_eq!(cat.get("F").unwrap().flag("index"), Some(FlagState::Done));
        assert!(cat.pending_tasks("index").is_empty());
    }

    #[test]
    fn pending_tasks_and_transitions() {
        let dir = tempfile::tempdir().unwrap();
        let mut cat = Catalog::open_with_clock(dir.path(), clock()).unwrap();
        for (id, d) in [("c", 3), ("a", 1), ("b", 2)] {
            let (rec, r) = s2(id, d);
            cat.ingest_product(rec, &r).unwrap();
        }
        assert_eq!(cat.pending_tasks("mask"), vec!["a", "b", "c"]);
        for id in ["a", "b", "c"] {
            cat.set_flag(id, "mask", FlagState::Done, None).unwrap();
        }
        assert!(cat.pending_tasks("mask").is_empty());
        assert!(matches!(cat.set_flag("a", "mask", FlagState::Pending, None), Err(Error::IllegalTransition { .. })));
        cat.set_flag("b", "ard", FlagState::Failed, Some("boom".into())).unwrap();
        assert_eq!(cat.pending_tasks("ard"), vec!["a", "b", "c"]);
        cat.set_flag("a", "ard", FlagState::Done, None).unwrap();
        cat.set_flag("c", "ard", FlagState::Done, None).unwrap();
        assert_eq!(cat.pending_tasks("ard"), vec!["b"]);
        cat.set_flag("b", "ard", FlagState::Pending, None).unwrap();
        assert_eq!(cat.pending_tasks("ard"), vec!["b"]);
        assert!(matches!(cat.set_flag("zz", "ard", FlagState::Done, None), Err(Error::UnknownProduct(_))));
        let reopened = Catalog::open(dir.path()).unwrap();
        assert_eq!(reopened.pending_tasks("ard"), vec!["b"]);
        reopened.compact().unwrap();
        assert_eq!(fs::read_to_string(dir.path().join(CATALOG_FILE)).unwrap().lines().count(), 3);
    }

    #[test]
    fn storage_slot_collision_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cat = Catalog::open_with_clock(dir.path(), clock()).unwrap();
        let (rec, r) = s2("x", 5);
        cat.ingest_product(rec, &r).unwrap();
        let (mut rec2, r2) = s2("y", 5);
        rec2.acquisition_time = at(5, 11);
        assert!(matches!(cat.ingest_product(rec2, &r2), Err(Error::InvalidArgument(_))));
        assert_eq!(cat.len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn flag_machine_never_leaves_done(ops in proptest::collection::vec(0u8..3, 1..40)) {
            let dir = tempfile::tempdir().unwrap();
            let mut cat = Catalog::open_with_clock(dir.path(), clock()).unwrap();
            let (rec, r) = s2("p", 1);
            cat.ingest_product(rec, &r).unwrap();
            let mut model = FlagState::Pending;
            for op in ops {
                let to = [FlagState::Pending, FlagState::Done, FlagState::Failed][op as usize];
                let res = cat.set_flag("p", "ard", to, None);
                prop_assert_eq!(res.is_ok(), model.can_become(to));
                if res.is_ok() { model = to; }
                prop_assert_eq!(cat.get("p").unwrap().flag("ard"), Some(model));
                if model == FlagState::Done {
                    prop_assert!(cat.set_flag("p", "ard", FlagState::Pending, None).is_err());
                }
            }
        }

        #[test]
        fn find_matches_linear_scan(
            prods in proptest::collection::vec((1u32..29, 0u32..24, -50.0f64..250.0, -50.0f64..150.0, 1.0f64..80.0, any::<bool>()), 1..25),
            q in (1u32..29, 0u32..29, -60.0f64..260.0, -60.0f64..160.0, 0.0f64..120.0, 0u8..3),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let mut cat = Catalog::open_with_clock(dir.path(), clock()).unwrap();
            let mut all = Vec::new();
            for (i, (d, h, x, y, s, radar)) in prods.into_iter().enumerate() {
                let id = format!("P{i:03}");
                let mut rec = ProductRecord::new(&id, if radar { Sensor::S1 } else { Sensor::S2 }, at(d, h), BBox::new(x, y, x + s, y + s), "T", "EPSG:32634");
                rec.storage_path = format!("cube/{id}");
                let bands: Vec<(BandId, Raster)> = rec.sensor.bands().iter().map(|&b| (b, Raster::filled(grid(), 1.0, 0.0))).collect();
                cat.ingest_product(rec.clone(), &bands).unwrap();
                all.push(rec);
            }
            prop_assert_eq!(cat.len(), all.len());
            let (d0, dd, qx, qy, qs, sensor) = q;
            let query = ProductQuery {
                time_range: Some((at(d0, 0), at((d0 + dd).min(30), 23))),
                bbox: Some(BBox::new(qx, qy, qx + qs, qy + qs)),
                sensor: [None, Some(Sensor::S1), Some(Sensor::S2)][sensor as usize],
            };
            let mut expect: Vec<&ProductRecord> = all.iter().filter(|r| {
                let (a, b) = query.time_range.unwrap();
                let bb = query.bbox.unwrap();
                r.acquisition_time >= a && r.acquisition_time <= b
                    && r.footprint.min_x <= bb.max_x && bb.min_x <= r.footprint.max_x
                    && r.footprint.min_y <= bb.max_y && bb.min_y <= r.footprint.max_y
                    && query.sensor.is_none_or(|s| s == r.sensor)
            }).collect();
            expect.sort_by(|a, b| (a.acquisition_time, &a.product_id).cmp(&(b.acquisition_time, &b.product_id)));
            let got: Vec<String> = cat.find(&query).iter().map(|r| r.product_id.clone()).collect();
            let want: Vec<String> = expect.iter().map(|r| r.product_id.clone()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
