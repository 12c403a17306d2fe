// SPDX-License-Identifier: Apache-2.0

//! Canned end-to-end runs on a seeded synthetic dataset: a parcel feature
//! space (query1), suspicious maize declarations with NDVI animations
//! (query2), and grassland use intensity from detected mowing (query3).

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{animate, run_query, AnimationSpec, AnimationStep, AnimationTarget, KbRow, KnowledgeBase, QueryContext, QuerySpec, Region, RunInfo};
use super::{ATTR_CROP_PREDICTED, ATTR_MOWING_PREFIX};
use crate::catalog::tiles::write_atomic;
use crate::catalog::{generate_synthetic_dataset, Catalog, FixedClock, MismatchSpec, MowingSpec, SyntheticConfig, SyntheticDataset};
use crate::error::{Error, Result};
use crate::features::{build_feature_space, detect_mowing, FeatureLevel, FeatureSpec, MowingParams};
use crate::grid::{BandId, CubeArray, GridSpec, ResampleMethod};
use crate::parcels::{write_parcels, LabelRaster};
use crate::sits::{prepare, PipelineConfig, TimeSeries};
use crate::time::{Day, Period, SeasonScheme};
use crate::workflow::{build_cube, process_pending, CubeRequest};
use crate::zonal::{zonal_stats_grouped, StatRequest, Statistic};

/// Times, values and validity of one parcel series.
type SeriesParts = (Vec<Day>, Vec<f64>, Vec<bool>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    Query1,
    Query2,
    Query3,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 3] = [ScenarioName::Query1, ScenarioName::Query2, ScenarioName::Query3];
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioName::Query1 => "query1",
            ScenarioName::Query2 => "query2",
            ScenarioName::Query3 => "query3",
        })
    }
}

impl FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<ScenarioName> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario '{s}' (query1, query2, query3)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Planted anomalies are filled in from the first generation pass;
    /// any listed here are replaced.
    pub synth: SyntheticConfig,
    pub n_mismatches: usize,
    pub mowing_depth: f64,
    pub feature_bands: Vec<BandId>,
    pub buffer_inward_m: f64,
    pub cloud_buffer_m: f64,
    pub animation_step_days: i32,
    /// Inclusive month range animated in every year.
    pub animation_months: (u32, u32),
    pub ndvi_threshold: f64,
    pub events_threshold: f64,
    pub mowing: MowingParams,
    pub pipeline: PipelineConfig,
    /// Timestamp stamped on catalog and knowledge-base records.
    pub timestamp: NaiveDateTime,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let synth = SyntheticConfig {
            grid: GridSpec::new(500_000.0, 4_400_000.0, 10.0, 96, 96, "EPSG:32634").expect("valid grid"),
            n_parcels: 36,
            start: Day::from_ymd(2020, 1, 1).expect("valid date"),
            end: Day::from_ymd(2021, 12, 31).expect("valid date"),
            revisit_days: 5,
            s1_revisit_days: Some(6),
            crop_mix: [("grassland".to_string(), 0.4), ("maize".to_string(), 0.3), ("wheat".to_string(), 0.2), ("sunflower".to_string(), 0.1)].into(),
            cloud_probability: 0.3,
            ..SyntheticConfig::demo(42)
        };
        ScenarioConfig {
            synth,
            n_mismatches: 3,
            mowing_depth: 0.4,
            feature_bands: vec![BandId::COHERENCE_VV, BandId::NDVI],
            buffer_inward_m: 5.0,
            cloud_buffer_m: 50.0,
            animation_step_days: 10,
            animation_months: (6, 10),
            ndvi_threshold: 0.4,
            events_threshold: 1.0,
            mowing: MowingParams::default(),
            pipeline: PipelineConfig { step_days: 5, window_points: 3, value_min: -1.0, value_max: 1.0, ..Default::default() },
            timestamp: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("valid time"),
        }
    }
}

impl ScenarioConfig {
    pub fn years(&self) -> Vec<i32> {
        (self.synth.start.year()..=self.synth.end.year()).collect()
    }
}

/// Anomalies planted into the dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub mismatches: Vec<i32>,
    /// Grassland parcel → year → planted mowing events.
    pub mowing: BTreeMap<i32, BTreeMap<i32, usize>>,
}

/// Choose anomaly parcels from a clean first pass. Mismatched parcels keep
/// their drawn crop and get a maize declaration, so the random draws of every
/// other parcel are unchanged. Grassland parcel `k` (in id order) is mowed
/// never (`k % 3 == 0`), once in the first year (`1`) or twice every year (`2`).
pub fn plant_anomalies(cfg: &ScenarioConfig) -> Result<(SyntheticConfig, Planted)> {
    let mut clean = cfg.synth.clone();
    clean.mismatches.clear();
    clean.mowing.clear();
    let first = generate_synthetic_dataset(&clean)?;
    let mut planted = Planted::default();
    let mut synth = clean.clone();
    for t in first.truth.values().filter(|t| t.crop != "maize" && t.crop != "grassland").take(cfg.n_mismatches) {
        synth.mismatches.push(MismatchSpec { parcel_id: t.id, declared: "maize".into(), actual: t.crop.clone() });
        planted.mismatches.push(t.id);
    }
    if planted.mismatches.len() < cfg.n_mismatches {
        return Err(Error::Config(format!("only {} non-maize arable parcels for {} planted mismatches", planted.mismatches.len(), cfg.n_mismatches)));
    }
    let years = cfg.years();
    for (k, t) in first.truth.values().filter(|t| t.crop == "grassland").enumerate() {
        let c = t.curve;
        // inside the growing season, far enough apart for full recovery
        let d1 = (c.sos + 25.0).round() as i32;
        let d2 = d1 + 62;
        let mut per_year = BTreeMap::new();
        for (yi, &year) in years.iter().enumerate() {
            let jan1 = Day::from_ymd(year, 1, 1)?;
            let days: Vec<i32> = match k % 3 {
                1 if yi == 0 => vec![d1],
                2 => vec![d1, d2],
                _ => vec![],
            };
            for &d in &days {
                let day = jan1.plus(d);
                if day >= synth.start && day <= synth.end {
                    synth.mowing.push(MowingSpec { parcel_id: t.id, day, depth: cfg.mowing_depth });
                }
            }
            per_year.insert(year, days.len());
        }
        planted.mowing.insert(t.id, per_year);
    }
    let second = generate_synthetic_dataset(&synth)?;
    if second.truth.values().zip(first.truth.values()).any(|(a, b)| a.crop != b.crop || a.curve != b.curve) {
        return Err(Error::Config("planting anomalies changed the drawn crops".into()));
    }
    Ok((synth, planted))
}

/// Prepared data shared by the three scenarios.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub planted: Planted,
    pub dataset: SyntheticDataset,
    pub cube: CubeArray,
    pub labels: LabelRaster,
    pub kb: KnowledgeBase,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: ScenarioName,
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

fn clock(cfg: &ScenarioConfig) -> Box<FixedClock> {
    Box::new(FixedClock(cfg.timestamp))
}

impl Scenario {
    /// Generate and ingest the dataset under `data_dir`, run the processing
    /// steps, build the analysis cube and feed the knowledge base with the
    /// parcel register, crop predictions and detected mowing events. Work
    /// already present in `data_dir` is reused.
    pub fn prepare(cfg: &ScenarioConfig, data_dir: &Path) -> Result<Scenario> {
        let (synth, planted) = plant_anomalies(cfg)?;
        let dataset = generate_synthetic_dataset(&synth)?;
        std::fs::create_dir_all(data_dir)?;
        let mut catalog = Catalog::open_with_clock(&data_dir.join("catalog"), clock(cfg))?;
        for (sensor, day) in dataset.scenes() {
            if catalog.get(&dataset.product_id(sensor, day)).is_none() {
                let (rec, rasters) = dataset.render_scene(sensor, day)?;
                catalog.ingest_product(rec, &rasters)?;
            }
        }
        process_pending(&mut catalog)?;
        let cube = build_cube(
            &catalog,
            &CubeRequest {
                grid: synth.grid.clone(),
                bands: vec![BandId::NDVI, BandId::SCL, BandId::COHERENCE_VV],
                time_range: Some((synth.start, synth.end)),
                resample: ResampleMethod::Nearest,
            },
        )?;
        write_parcels(&data_dir.join("parcels.json"), &dataset.parcels)?;
        write_atomic(&data_dir.join("truth.json"), serde_json::to_string_pretty(&dataset.truth_json())?.as_bytes())?;

        let mut kb = KnowledgeBase::open_with_clock(&data_dir.join("kb.jsonl"), clock(cfg))?;
        kb.register_parcels(&dataset.parcels, &RunInfo::new("lpis-import", "lpis"))?;
        // stands in for an external crop classifier
        let predicted: Vec<KbRow> = dataset.truth.values().map(|t| KbRow::new(t.id, ATTR_CROP_PREDICTED, t.crop.as_str())).collect();
        kb.update(&predicted, &RunInfo::new("crop-classification", "crop-classifier"))?;
        let labels = dataset.labels.clone();
        let mut scenario = Scenario { config: cfg.clone(), planted, dataset, cube, labels, kb };
        let counts = scenario.detect_mowing_counts()?;
        let rows: Vec<KbRow> = counts
            .iter()
            .flat_map(|(&id, years)| years.iter().map(move |(y, &n)| KbRow::new(id, format!("{ATTR_MOWING_PREFIX}{y}"), n as f64)))
            .collect();
        scenario.kb.update(&rows, &RunInfo::new("mowing-detection", "mowing-detector"))?;
        Ok(scenario)
    }

    /// Mowing events per calendar year for every parcel declared grassland,
    /// from its prepared daily NDVI mean series.
    pub fn detect_mowing_counts(&self) -> Result<BTreeMap<i32, BTreeMap<i32, usize>>> {
        let req = StatRequest {
            statistics: vec![Statistic::Mean],
            period: Period::Day,
            bands: vec![BandId::NDVI],
            buffer_inward_m: self.config.buffer_inward_m,
            cloud_buffer_m: self.config.cloud_buffer_m,
            ..Default::default()
        };
        let table = zonal_stats_grouped(&self.cube, &self.labels, &req)?;
        let mut series: BTreeMap<i32, SeriesParts> = BTreeMap::new();
        for r in &table.records {
            let s = series.entry(r.parcel_id).or_default();
            s.0.push(r.period_start);
            s.1.push(r.value.unwrap_or(0.0));
            s.2.push(r.value.is_some());
        }
        let mut out = BTreeMap::new();
        for p in self.dataset.parcels.iter().filter(|p| p.crop_declared == "grassland") {
            let mut per_year: BTreeMap<i32, usize> = self.config.years().into_iter().map(|y| (y, 0)).collect();
            if let Some((t, v, ok)) = series.remove(&p.id) {
                let ts = prepare(&TimeSeries::new(t, v, ok)?, &self.config.pipeline)?;
                for e in detect_mowing(p.id, &ts, &self.config.mowing) {
                    *per_year.entry(e.event_day.year()).or_default() += 1;
                }
            }
            out.insert(p.id, per_year);
        }
        Ok(out)
    }

    pub fn run(&mut self, name: ScenarioName, out_dir: &Path) -> Result<ScenarioReport> {
        let dir = out_dir.join(name.to_string());
        std::fs::create_dir_all(&dir)?;
        let (files, summary) = match name {
            ScenarioName::Query1 => self.query1(&dir)?,
            ScenarioName::Query2 => self.query2(&dir)?,
            ScenarioName::Query3 => self.query3(&dir)?,
        };
        let summary_path = dir.join("summary.json");
        write_atomic(&summary_path, format!("{}\n", serde_json::to_string_pretty(&summary)?).as_bytes())?;
        let mut files = files;
        files.push(summary_path);
        Ok(ScenarioReport { name, files, summary })
    }

    fn query1(&self, dir: &Path) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let spec = FeatureSpec {
            bands: self.config.feature_bands.clone(),
            period: Period::Month,
            stats: vec![Statistic::Mean],
            phenology: false,
            buffer_inward_m: self.config.buffer_inward_m,
            cloud_buffer_m: self.config.cloud_buffer_m,
            ..Default::default()
        };
        let fs = build_feature_space(FeatureLevel::Parcel, &spec, &self.cube, Some(&self.labels))?;
        let path = dir.join("features.csv");
        write_atomic(&path, fs.to_csv().as_bytes())?;
        let months = Period::Month.enumerate(self.config.synth.start, self.config.synth.end, &SeasonScheme::default()).len();
        let summary = serde_json::json!({
            "rows": fs.keys.len(),
            "feature_columns": fs.names.len(),
            "expected_feature_columns": spec.bands.len() * months,
            "bands": spec.bands,
            "months": months,
        });
        Ok((vec![path], summary))
    }

    fn query2(&mut self, dir: &Path) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let spec = QuerySpec {
            region: Region::All,
            predicate: "crop_declared = maize AND crop_predicted != maize".into(),
            select: vec!["crop_declared".into(), ATTR_CROP_PREDICTED.into()],
            ..Default::default()
        };
        let result = run_query(&mut self.kb, &self.dataset.parcels, &spec, None, &RunInfo::new("query2", "query"))?;
        let list = dir.join("mismatches.csv");
        write_atomic(&list, result.to_csv().as_bytes())?;
        let mut files = vec![list];
        let (m0, m1) = self.config.animation_months;
        let mut animations = Vec::new();
        for &id in &result.parcel_ids {
            for year in self.config.years() {
                let to = Day::from_ymd(year, m1, 1)?.next_month().plus(-1);
                let anim = AnimationSpec {
                    target: AnimationTarget::Parcel(id),
                    band: BandId::NDVI,
                    step: AnimationStep::Days(self.config.animation_step_days),
                    from: Day::from_ymd(year, m0, 1)?,
                    to,
                    seasons: SeasonScheme::default(),
                    buffer_inward_m: self.config.buffer_inward_m,
                    cloud_buffer_m: self.config.cloud_buffer_m,
                };
                let frames = animate(&self.cube, &self.dataset.parcels, &anim)?;
                let sub = dir.join("animations").join(format!("parcel_{id}_{year}"));
                frames.write(&sub, 0.0, 1.0)?;
                files.push(sub.join("frames.csv"));
                animations.push(serde_json::json!({
                    "parcel_id": id,
                    "year": year,
                    "frames": frames.frames.len(),
                    "reason": frames.reason,
                }));
            }
        }
        let summary = serde_json::json!({
            "predicate": spec.predicate,
            "flagged": result.parcel_ids,
            "planted": self.planted.mismatches,
            "animations": animations,
        });
        Ok((files, summary))
    }

    fn query3(&mut self, dir: &Path) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let detected = self.detect_mowing_counts()?;
        let mut csv = String::from("parcel_id,year,detected,planted\n");
        for (id, years) in &detected {
            for (year, n) in years {
                let planted = self.planted.mowing.get(id).and_then(|m| m.get(year)).copied().unwrap_or(0);
                let _ = writeln!(csv, "{id},{year},{n},{planted}");
            }
        }
        let counts = dir.join("mowing_counts.csv");
        write_atomic(&counts, csv.as_bytes())?;

        let spec = QuerySpec {
            region: Region::All,
            time_window: Some((self.config.synth.start, self.config.synth.end)),
            predicate: format!(
                "crop_declared = grassland AND NDVI_mean < {} AND {} < {}",
                self.config.ndvi_threshold,
                super::ATTR_MOWING_PER_YEAR,
                self.config.events_threshold
            ),
            max_cloud_cover: None,
            select: vec![],
        };
        let ctx = QueryContext {
            cube: &self.cube,
            labels: &self.labels,
            buffer_inward_m: self.config.buffer_inward_m,
            cloud_buffer_m: self.config.cloud_buffer_m,
        };
        let result = run_query(&mut self.kb, &self.dataset.parcels, &spec, Some(&ctx), &RunInfo::new("query3", "query"))?;
        let hotspots = dir.join("hotspots.csv");
        write_atomic(&hotspots, result.to_csv().as_bytes())?;
        let agree = detected
            .iter()
            .flat_map(|(id, ys)| ys.iter().map(move |(y, n)| (id, y, n)))
            .filter(|(id, y, n)| self.planted.mowing.get(id).and_then(|m| m.get(y)) == Some(n))
            .count();
        let total: usize = detected.values().map(|m| m.len()).sum();
        let summary = serde_json::json!({
            "predicate": spec.predicate,
            "grassland_parcels": detected.len(),
            "hotspots": result.parcel_ids,
            "mowing_years_matching_plan": agree,
            "mowing_years_total": total,
        });
        Ok((vec![counts, hotspots], summary))
    }
}
