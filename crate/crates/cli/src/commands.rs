// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::Deserialize;

use adc_core::catalog::tiles::{read_tiled, write_atomic, write_labels};
use adc_core::catalog::{Catalog, Clock, FixedClock, ProductRecord, Sensor, SyntheticConfig, SystemClock};
use adc_core::catalog::generate_synthetic_dataset;
use adc_core::features::{build_feature_space, FeatureLevel, FeatureSpec};
use adc_core::grid::{BBox, BandId, CubeArray, GridSpec, ResampleMethod};
use adc_core::parcels::{load_parcels, rasterize_parcels, Parcel};
use adc_core::query::scenario::{Scenario, ScenarioConfig, ScenarioName};
use adc_core::query::{animate, bands_to_compute, run_query, AnimationSpec, AnimationStep, AnimationTarget, KnowledgeBase, QueryContext, QuerySpec, RunInfo};
use adc_core::sits::{prepare, PipelineConfig, TimeSeries};
use adc_core::time::SeasonScheme;
use adc_core::workflow::{build_cube, process_pending, CubeRequest};
use adc_core::zonal::bench::{run_benchmark, BenchConfig};
use adc_core::zonal::{zonal_stats_grouped, zonal_stats_serial, StatRequest, Statistic};
use adc_core::{Day, Error, Period, Result};

use crate::manifest::{sha256_hex, RunManifest};
use crate::{AnimateArgs, BenchArgs, Command, Engine, Level, ScenarioArg, StatsArgs};

/// Fixed layout of the data directory.
pub struct Workspace {
    pub root: PathBuf,
    pub clock: Option<NaiveDateTime>,
}

impl Workspace {
    pub fn new(root: PathBuf, clock: Option<NaiveDateTime>) -> Workspace {
        Workspace { root, clock }
    }

    fn catalog_dir(&self) -> PathBuf {
        self.root.join("catalog")
    }

    fn grid_path(&self) -> PathBuf {
        self.root.join("grid.json")
    }

    fn parcels_path(&self) -> PathBuf {
        self.root.join("parcels.json")
    }

    fn kb_path(&self) -> PathBuf {
        self.root.join("kb.jsonl")
    }

    fn clock(&self) -> Box<dyn Clock> {
        match self.clock {
            Some(t) => Box::new(FixedClock(t)),
            None => Box::new(SystemClock),
        }
    }

    fn open_catalog(&self) -> Result<Catalog> {
        Catalog::open_with_clock(&self.catalog_dir(), self.clock())
    }

    fn require(&self, path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Precondition(format!("{} not found; run `adc synth` or `adc ingest` first", path.display())))
        }
    }

    fn grid(&self) -> Result<GridSpec> {
        self.require(&self.grid_path())?;
        read_json(&self.grid_path())
    }

    fn parcels(&self) -> Result<Vec<Parcel>> {
        self.require(&self.parcels_path())?;
        load_parcels(&self.parcels_path())
    }

    /// Cube of `bands` on the workspace grid, with the scene-class band when
    /// optical products are present.
    fn cube(&self, bands: &[BandId], time_range: Option<(Day, Day)>) -> Result<CubeArray> {
        let catalog = self.open_catalog()?;
        if catalog.is_empty() {
            return Err(Error::Precondition(format!("no products in {}; run `adc synth` or `adc ingest` first", self.catalog_dir().display())));
        }
        let mut want = bands.to_vec();
        if !want.contains(&BandId::SCL) && catalog.records().iter().any(|r| r.sensor == Sensor::S2) {
            want.push(BandId::SCL);
        }
        build_cube(&catalog, &CubeRequest { grid: self.grid()?, bands: want, time_range, resample: ResampleMethod::Nearest })
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(path, text.as_bytes())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn config_digest(m: &mut RunManifest, path: &Path) -> Result<()> {
    m.config_sha256 = Some(sha256_hex(&fs::read(path)?));
    Ok(())
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T> {
    s.parse()
}

fn range(from: &Option<String>, to: &Option<String>) -> Result<Option<(Day, Day)>> {
    match (from, to) {
        (None, None) => Ok(None),
        (Some(a), Some(b)) => Ok(Some((parse(a)?, parse(b)?))),
        _ => Err(Error::InvalidArgument("--from and --to go together".into())),
    }
}

/// Where the run manifest of `cmd` goes: beside its main output.
pub fn manifest_path(cmd: &Command, ws: &Workspace) -> PathBuf {
    match cmd {
        Command::Ingest { .. } => ws.root.join("ingest.manifest.json"),
        Command::Synth { .. } => ws.root.join("synth.manifest.json"),
        Command::Rasterize { out, .. } => sibling(&out.clone().unwrap_or_else(|| ws.root.join("labels.tiles")), ".manifest.json"),
        Command::Stats(a) => sibling(&a.out, ".manifest.json"),
        Command::Bench(a) => sibling(&a.out, ".manifest.json"),
        Command::Sits { out, .. } | Command::Features { out, .. } | Command::Query { out, .. } => sibling(out, ".manifest.json"),
        Command::Scenario { name, out_dir, .. } => {
            out_dir.clone().unwrap_or_else(|| ws.root.join("scenario").join("out")).join(scenario_name(*name).to_string()).join("manifest.json")
        }
        Command::Animate(a) => a.out_dir.join("manifest.json"),
    }
}

fn scenario_name(a: ScenarioArg) -> ScenarioName {
    match a {
        ScenarioArg::Query1 => ScenarioName::Query1,
        ScenarioArg::Query2 => ScenarioName::Query2,
        ScenarioArg::Query3 => ScenarioName::Query3,
    }
}

pub fn run(cmd: &Command, ws: &Workspace, m: &mut RunManifest) -> Result<()> {
    match cmd {
        Command::Ingest { config } => ingest(ws, config, m),
        Command::Synth { config, seed } => synth(ws, config, *seed, m),
        Command::Rasterize { parcels, grid, out } => rasterize(ws, parcels.as_deref(), grid.as_deref(), out.as_deref(), m),
        Command::Stats(a) => stats(ws, a, m),
        Command::Bench(a) => bench(ws, a, m),
        Command::Sits { parcel, band, pipeline, inward_buffer, cloud_buffer, out } => {
            sits(ws, *parcel, band, pipeline.as_deref(), (*inward_buffer, *cloud_buffer), out, m)
        }
        Command::Features { level, spec, out } => features(ws, *level, spec.as_deref(), out, m),
        Command::Query { spec, inward_buffer, cloud_buffer, out } => query(ws, spec, (*inward_buffer, *cloud_buffer), out, m),
        Command::Scenario { name, config, seed, out_dir } => scenario(ws, scenario_name(*name), config.as_deref(), *seed, out_dir.as_deref(), m),
        Command::Animate(a) => animation(ws, a, m),
    }
}

#[derive(Debug, Deserialize)]
struct IngestConfig {
    products: Vec<IngestProduct>,
}

#[derive(Debug, Deserialize)]
struct IngestProduct {
    product_id: String,
    sensor: Sensor,
    acquisition_time: NaiveDateTime,
    tile_id: String,
    crs_id: String,
    #[serde(default)]
    footprint: Option<BBox>,
    /// Band name → tile file, relative to the configuration file.
    bands: BTreeMap<String, PathBuf>,
}

fn ingest(ws: &Workspace, config: &Path, m: &mut RunManifest) -> Result<()> {
    config_digest(m, config)?;
    let cfg: IngestConfig = read_json(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let mut catalog = ws.open_catalog()?;
    let mut grid: Option<GridSpec> = None;
    for p in &cfg.products {
        let mut rasters = Vec::new();
        for (name, path) in &p.bands {
            let band: BandId = name.parse()?;
            let mut r = read_tiled(&base.join(path), &p.crs_id, None)?;
            r.categorical = band.is_categorical();
            grid.get_or_insert_with(|| r.grid.clone());
            rasters.push((band, r));
        }
        let footprint = match (&p.footprint, rasters.first()) {
            (Some(f), _) => *f,
            (None, Some((_, r))) => r.grid.extent(),
            (None, None) => return Err(Error::Config(format!("{}: no bands listed", p.product_id))),
        };
        let rec = ProductRecord::new(&p.product_id, p.sensor, p.acquisition_time, footprint, &p.tile_id, &p.crs_id);
        catalog.ingest_product(rec, &rasters)?;
    }
    let report = process_pending(&mut catalog)?;
    if let (Some(g), false) = (grid, ws.grid_path().exists()) {
        write_text(&ws.grid_path(), &serde_json::to_string_pretty(&g)?)?;
        m.add_output(&ws.grid_path())?;
    }
    println!("{}", serde_json::json!({ "ingested": cfg.products.len(), "steps": report }));
    m.add_output(&ws.catalog_dir().join(adc_core::catalog::store::CATALOG_FILE))?;
    if report.failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Storage(format!("{} processing steps failed", report.failed.len())))
    }
}

fn synth(ws: &Workspace, config: &Path, seed: Option<u64>, m: &mut RunManifest) -> Result<()> {
    config_digest(m, config)?;
    let mut cfg: SyntheticConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    m.seed = Some(cfg.rng_seed);
    let ds = generate_synthetic_dataset(&cfg)?;
    let mut catalog = ws.open_catalog()?;
    if !catalog.is_empty() {
        return Err(Error::Precondition(format!("{} already holds a catalog; use a fresh --data-dir", ws.root.display())));
    }
    let n = ds.write_to_catalog(&mut catalog)?;
    process_pending(&mut catalog)?;
    write_text(&ws.grid_path(), &serde_json::to_string_pretty(&cfg.grid)?)?;
    adc_core::parcels::write_parcels(&ws.parcels_path(), &ds.parcels)?;
    let truth = ws.root.join("truth.json");
    write_text(&truth, &serde_json::to_string_pretty(&ds.truth_json())?)?;
    let labels = ws.root.join("labels.tiles");
    write_labels(&ds.labels, &labels)?;
    for p in [ws.grid_path(), ws.parcels_path(), truth, labels] {
        m.add_output(&p)?;
    }
    m.add_tree(&ws.catalog_dir().join("cube"))?;
    println!("{}", serde_json::json!({ "products": n, "parcels": ds.parcels.len(), "seed": cfg.rng_seed }));
    Ok(())
}

fn rasterize(ws: &Workspace, parcels: Option<&Path>, grid: Option<&Path>, out: Option<&Path>, m: &mut RunManifest) -> Result<()> {
    let parcels = load_parcels(parcels.unwrap_or(&ws.parcels_path()))?;
    let grid: GridSpec = read_json(grid.unwrap_or(&ws.grid_path()))?;
    grid.validate()?;
    let r = rasterize_parcels(&parcels, &grid)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| ws.root.join("labels.tiles"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_labels(&r.labels, &out)?;
    m.add_output(&out)?;
    let counts = r.labels.pixel_counts();
    let empty: Vec<i32> = parcels.iter().map(|p| p.id).filter(|id| !counts.contains_key(id)).collect();
    println!(
        "{}",
        serde_json::json!({
            "parcels": parcels.len(),
            "labelled_pixels": counts.values().sum::<usize>(),
            "overlap_pixels": r.overlap_pixels,
            "parcels_without_pixels": empty,
        })
    );
    Ok(())
}

fn stats(ws: &Workspace, a: &StatsArgs, m: &mut RunManifest) -> Result<()> {
    let req = StatRequest {
        statistics: a.stats.iter().map(|s| parse::<Statistic>(s)).collect::<Result<_>>()?,
        period: parse(&a.period)?,
        seasons: SeasonScheme::default(),
        bands: a.bands.iter().map(|s| parse::<BandId>(s)).collect::<Result<_>>()?,
        buffer_inward_m: a.inward_buffer,
        cloud_buffer_m: a.cloud_buffer,
        max_cloud_cover_fraction: a.max_cloud,
    };
    req.validate()?;
    let parcels = ws.parcels()?;
    let cube = ws.cube(&req.bands, range(&a.from, &a.to)?)?;
    let table = match a.engine {
        Engine::Grouped => {
            let labels = rasterize_parcels(&parcels, &cube.grid)?.labels;
            zonal_stats_grouped(&cube, &labels, &req)?
        }
        Engine::Serial => zonal_stats_serial(&cube, &parcels, &req)?,
    };
    write_text(&a.out, &table.to_csv())?;
    m.add_output(&a.out)?;
    println!("{}", serde_json::json!({ "records": table.records.len(), "parcels": table.parcel_ids().len() }));
    Ok(())
}

fn bench(ws: &Workspace, a: &BenchArgs, m: &mut RunManifest) -> Result<()> {
    let cfg = BenchConfig {
        sizes: a.sizes.clone(),
        grid_side: a.grid_side,
        months: a.months,
        serial_max_parcels: if a.serial_all { usize::MAX } else { a.serial_max_parcels },
        serial_budget_s: a.serial_budget_s,
        seed: a.seed,
        repeats: a.repeats,
    };
    m.seed = Some(cfg.seed);
    let work = a.work_dir.clone().unwrap_or_else(|| ws.root.join("bench"));
    let report = run_benchmark(&cfg, &work)?;
    write_text(&a.out, &report.to_csv())?;
    let md = sibling(&a.out, ".md");
    write_text(&md, &report.to_markdown())?;
    m.add_output(&a.out)?;
    m.add_output(&md)?;
    println!("{}", report.to_markdown());
    Ok(())
}

fn sits(ws: &Workspace, parcel: i32, band: &str, pipeline: Option<&Path>, buffers: (f64, f64), out: &Path, m: &mut RunManifest) -> Result<()> {
    let band: BandId = band.parse()?;
    let cfg: PipelineConfig = match pipeline {
        Some(p) => {
            config_digest(m, p)?;
            read_json(p)?
        }
        None => PipelineConfig::default(),
    };
    let parcels = ws.parcels()?;
    let p = parcels.iter().find(|p| p.id == parcel).ok_or_else(|| Error::InvalidArgument(format!("unknown parcel {parcel}")))?;
    let cube = ws.cube(&[band], None)?;
    let req = StatRequest {
        statistics: vec![Statistic::Mean],
        period: Period::Day,
        bands: vec![band],
        buffer_inward_m: buffers.0,
        cloud_buffer_m: buffers.1,
        ..Default::default()
    };
    let table = zonal_stats_serial(&cube, std::slice::from_ref(p), &req)?;
    let times = table.records.iter().map(|r| r.period_start).collect();
    let values = table.records.iter().map(|r| r.value.unwrap_or(0.0)).collect();
    let valid = table.records.iter().map(|r| r.value.is_some()).collect();
    let raw = TimeSeries::new(times, values, valid)?;
    if raw.n_valid() == 0 {
        return Err(Error::Precondition(format!("parcel {parcel} has no valid {band} observations")));
    }
    let prepared = prepare(&raw, &cfg)?;
    write_text(out, &prepared.to_csv())?;
    m.add_output(out)?;
    println!("{}", serde_json::json!({ "raw_points": raw.len(), "raw_valid": raw.n_valid(), "prepared_points": prepared.len() }));
    Ok(())
}

fn features(ws: &Workspace, level: Level, spec: Option<&Path>, out: &Path, m: &mut RunManifest) -> Result<()> {
    let spec: FeatureSpec = match spec {
        Some(p) => {
            config_digest(m, p)?;
            read_json(p)?
        }
        None => FeatureSpec::default(),
    };
    let mut bands = spec.bands.clone();
    if spec.phenology && !bands.contains(&spec.phenology_band) {
        bands.push(spec.phenology_band);
    }
    let cube = ws.cube(&bands, None)?;
    let parcels = ws.parcels()?;
    let labels = rasterize_parcels(&parcels, &cube.grid)?.labels;
    let level = match level {
        Level::Parcel => FeatureLevel::Parcel,
        Level::Pixel => FeatureLevel::Pixel,
    };
    let fs = build_feature_space(level, &spec, &cube, Some(&labels))?;
    write_text(out, &fs.to_csv())?;
    m.add_output(out)?;
    println!("{}", serde_json::json!({ "rows": fs.keys.len(), "features": fs.names.len() }));
    Ok(())
}

fn query(ws: &Workspace, spec_path: &Path, buffers: (f64, f64), out: &Path, m: &mut RunManifest) -> Result<()> {
    config_digest(m, spec_path)?;
    let spec: QuerySpec = read_json(spec_path)?;
    let parcels = ws.parcels()?;
    let mut kb = KnowledgeBase::open_with_clock(&ws.kb_path(), ws.clock())?;
    kb.register_parcels(&parcels, &RunInfo::new("lpis-import", "lpis"))?;
    let bands = bands_to_compute(&kb, &spec)?;
    let run = RunInfo::new(format!("query-{}", &sha256_hex(&fs::read(spec_path)?)[..12]), "query");
    let result = if bands.is_empty() {
        run_query(&mut kb, &parcels, &spec, None, &run)?
    } else {
        let cube = ws.cube(&bands, spec.time_window)?;
        let labels = rasterize_parcels(&parcels, &cube.grid)?.labels;
        let ctx = QueryContext { cube: &cube, labels: &labels, buffer_inward_m: buffers.0, cloud_buffer_m: buffers.1 };
        run_query(&mut kb, &parcels, &spec, Some(&ctx), &run)?
    };
    write_text(out, &result.to_csv())?;
    m.add_output(out)?;
    println!("{}", serde_json::json!({ "matches": result.parcel_ids.len(), "parcel_ids": result.parcel_ids }));
    Ok(())
}

fn scenario(ws: &Workspace, name: ScenarioName, config: Option<&Path>, seed: Option<u64>, out_dir: Option<&Path>, m: &mut RunManifest) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            config_digest(m, p)?;
            read_json(p)?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.synth.rng_seed = s;
    }
    if let Some(t) = ws.clock {
        cfg.timestamp = t;
    }
    m.seed = Some(cfg.synth.rng_seed);
    let data = ws.root.join("scenario").join("data");
    let out = out_dir.map(Path::to_path_buf).unwrap_or_else(|| ws.root.join("scenario").join("out"));
    let mut s = Scenario::prepare(&cfg, &data)?;
    let report = s.run(name, &out)?;
    for f in &report.files {
        if f.extension().is_some_and(|e| e == "csv" || e == "json") {
            m.add_output(f)?;
        }
    }
    if name == ScenarioName::Query2 {
        m.add_tree(&out.join(name.to_string()).join("animations"))?;
    }
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    Ok(())
}

fn animation(ws: &Workspace, a: &AnimateArgs, m: &mut RunManifest) -> Result<()> {
    let band: BandId = a.band.parse()?;
    let (from, to): (Day, Day) = (parse(&a.from)?, parse(&a.to)?);
    let target = match (&a.parcel, &a.bbox) {
        (Some(id), _) => AnimationTarget::Parcel(*id),
        (None, Some(b)) => AnimationTarget::Bbox(BBox::new(b[0], b[1], b[2], b[3])),
        (None, None) => return Err(Error::InvalidArgument("give --parcel or --bbox".into())),
    };
    let step = match (&a.step_days, &a.period) {
        (Some(d), _) => AnimationStep::Days(*d),
        (None, Some(p)) => AnimationStep::Period(parse::<Period>(p)?),
        (None, None) => return Err(Error::InvalidArgument("give --step-days or --period".into())),
    };
    let spec = AnimationSpec {
        target,
        band,
        step,
        from,
        to,
        seasons: SeasonScheme::default(),
        buffer_inward_m: a.inward_buffer,
        cloud_buffer_m: a.cloud_buffer,
    };
    let parcels = if matches!(spec.target, AnimationTarget::Parcel(_)) { ws.parcels()? } else { Vec::new() };
    let cube = ws.cube(&[band], Some((from, to)))?;
    let frames = animate(&cube, &parcels, &spec)?;
    frames.write(&a.out_dir, a.range[0], a.range[1])?;
    m.add_tree(&a.out_dir)?;
    if let Some(reason) = &frames.reason {
        return Err(Error::Precondition(format!("no frames: {reason}")));
    }
    println!("{}", serde_json::json!({ "frames": frames.frames.len(), "out_dir": a.out_dir }));
    Ok(())
}
