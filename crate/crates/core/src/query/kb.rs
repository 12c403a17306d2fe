// SPDX-License-Identifier: Apache-2.0

//! Per-parcel attribute store, persisted as append-only JSON lines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::catalog::{Clock, SystemClock};
use crate::error::{Error, Result};
use crate::parcels::Parcel;

pub const ATTR_CROP_DECLARED: &str = "crop_declared";
pub const ATTR_CROP_PREDICTED: &str = "crop_predicted";
/// Prefix of yearly mowing counts, e.g. `mowing_events:2021`.
pub const ATTR_MOWING_PREFIX: &str = "mowing_events:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Number(f64),
    Text(String),
}

impl AttrValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            AttrValue::Number(v) => Some(*v),
            AttrValue::Text(_) => None,
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Number(v) => write!(f, "{v}"),
            AttrValue::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for AttrValue {
    fn from(v: f64) -> Self {
        AttrValue::Number(v)
    }
}

impl From<&str> for AttrValue {
    fn from(v: &str) -> Self {
        AttrValue::Text(v.to_string())
    }
}

/// Who wrote a value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub producer: String,
}

impl RunInfo {
    pub fn new(run_id: impl Into<String>, producer: impl Into<String>) -> RunInfo {
        RunInfo { run_id: run_id.into(), producer: producer.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbRecord {
    pub parcel_id: i32,
    pub attribute: String,
    pub value: AttrValue,
    pub run_id: String,
    pub producer: String,
    pub timestamp: NaiveDateTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbRow {
    pub parcel_id: i32,
    pub attribute: String,
    pub value: AttrValue,
}

impl KbRow {
    pub fn new(parcel_id: i32, attribute: impl Into<String>, value: impl Into<AttrValue>) -> KbRow {
        KbRow { parcel_id, attribute: attribute.into(), value: value.into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpsertReport {
    pub changed: usize,
    pub unchanged: usize,
    /// Rows naming parcels the store does not know; not applied.
    pub unknown_parcels: Vec<i32>,
}

/// Attribute store with latest-wins reads and full history. A parcel is
/// known once it has a declared crop.
pub struct KnowledgeBase {
    path: Option<PathBuf>,
    clock: Box<dyn Clock>,
    records: Vec<KbRecord>,
    latest: BTreeMap<(i32, String), usize>,
}

impl fmt::Debug for KnowledgeBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KnowledgeBase").field("path", &self.path).field("records", &self.records.len()).finish()
    }
}

impl KnowledgeBase {
    pub fn in_memory() -> KnowledgeBase {
        KnowledgeBase::with_clock(None, Box::new(SystemClock))
    }

    pub fn open(path: &Path) -> Result<KnowledgeBase> {
        KnowledgeBase::open_with_clock(path, Box::new(SystemClock))
    }

    pub fn open_with_clock(path: &Path, clock: Box<dyn Clock>) -> Result<KnowledgeBase> {
        let mut kb = KnowledgeBase::with_clock(Some(path.to_path_buf()), clock);
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: KbRecord = serde_json::from_str(line)
                    .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
                kb.push(rec);
            }
        }
        Ok(kb)
    }

    fn with_clock(path: Option<PathBuf>, clock: Box<dyn Clock>) -> KnowledgeBase {
        KnowledgeBase { path, clock, records: Vec::new(), latest: BTreeMap::new() }
    }

    fn push(&mut self, rec: KbRecord) {
        self.latest.insert((rec.parcel_id, rec.attribute.clone()), self.records.len());
        self.records.push(rec);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_known(&self, parcel_id: i32) -> bool {
        self.latest.contains_key(&(parcel_id, ATTR_CROP_DECLARED.to_string()))
    }

    pub fn parcel_ids(&self) -> BTreeSet<i32> {
        self.latest.keys().filter(|k| k.1 == ATTR_CROP_DECLARED).map(|k| k.0).collect()
    }

    pub fn attributes(&self) -> BTreeSet<String> {
        self.latest.keys().map(|k| k.1.clone()).collect()
    }

    pub fn get(&self, parcel_id: i32, attribute: &str) -> Option<&KbRecord> {
        self.latest.get(&(parcel_id, attribute.to_string())).map(|&i| &self.records[i])
    }

    pub fn value(&self, parcel_id: i32, attribute: &str) -> Option<&AttrValue> {
        self.get(parcel_id, attribute).map(|r| &r.value)
    }

    /// All attributes of a parcel, latest values.
    pub fn row(&self, parcel_id: i32) -> BTreeMap<&str, &AttrValue> {
        self.latest
            .range((parcel_id, String::new())..)
            .take_while(|(k, _)| k.0 == parcel_id)
            .map(|(k, &i)| (k.1.as_str(), &self.records[i].value))
            .collect()
    }

    /// Every version of an attribute, oldest first.
    pub fn history(&self, parcel_id: i32, attribute: &str) -> Vec<&KbRecord> {
        self.records.iter().filter(|r| r.parcel_id == parcel_id && r.attribute == attribute).collect()
    }

    /// Add parcels with their declared crop.
    pub fn register_parcels(&mut self, parcels: &[Parcel], run: &RunInfo) -> Result<UpsertReport> {
        let rows: Vec<KbRow> = parcels.iter().map(|p| KbRow::new(p.id, ATTR_CROP_DECLARED, p.crop_declared.as_str())).collect();
        self.write(&rows, run, true)
    }

    /// Upsert rows; identical values are skipped, rows for unknown parcels reported.
    pub fn update(&mut self, rows: &[KbRow], run: &RunInfo) -> Result<UpsertReport> {
        self.write(rows, run, false)
    }

    fn write(&mut self, rows: &[KbRow], run: &RunInfo, registering: bool) -> Result<UpsertReport> {
        let mut report = UpsertReport::default();
        let now = self.clock.now();
        let mut fresh = Vec::new();
        for row in rows {
            if !registering && !self.is_known(row.parcel_id) {
                report.unknown_parcels.push(row.parcel_id);
                continue;
            }
            if self.value(row.parcel_id, &row.attribute) == Some(&row.value) {
                report.unchanged += 1;
                continue;
            }
            let rec = KbRecord {
                parcel_id: row.parcel_id,
                attribute: row.attribute.clone(),
                value: row.value.clone(),
                run_id: run.run_id.clone(),
                producer: run.producer.clone(),
                timestamp: now,
            };
            fresh.push(rec.clone());
            self.push(rec);
            report.changed += 1;
        }
        report.unknown_parcels.sort_unstable();
        report.unknown_parcels.dedup();
        if let (Some(path), false) = (&self.path, fresh.is_empty()) {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let mut text = String::new();
            for rec in &fresh {
                text.push_str(&serde_json::to_string(rec)?);
                text.push('\n');
            }
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(text.as_bytes())?;
        }
        Ok(report)
    }

    /// Rewrite the store file sorted by parcel and attribute. Without
    /// `keep_history` only the latest version of each attribute survives.
    pub fn compact(&mut self, keep_history: bool) -> Result<()> {
        let mut kept: Vec<KbRecord> = if keep_history {
            self.records.clone()
        } else {
            self.latest.values().map(|&i| self.records[i].clone()).collect()
        };
        kept.sort_by(|a, b| (a.parcel_id, &a.attribute).cmp(&(b.parcel_id, &b.attribute)));
        self.records.clear();
        self.latest.clear();
        for rec in kept {
            self.push(rec);
        }
        if let Some(path) = &self.path {
            let mut text = String::new();
            for rec in &self.records {
                text.push_str(&serde_json::to_string(rec)?);
                text.push('\n');
            }
            crate::catalog::tiles::write_atomic(path, text.as_bytes())?;
        }
        Ok(())
    }
}
