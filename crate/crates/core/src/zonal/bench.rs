// SPDX-License-Identifier: Apache-2.0

//! Timing harness: monthly means of one band over one tile, grouped engine
//! versus per-parcel queries, for a list of parcel counts.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{zonal_stats_grouped, zonal_stats_serial_until, StatRequest, Statistic};
use crate::catalog::synth::{generate_synthetic_dataset, SyntheticConfig};
use crate::catalog::tiles::{write_tiled, DType};
use crate::catalog::TiledCube;
use crate::error::{Error, Result};
use crate::grid::{BandId, GridSpec, Raster};
use crate::parcels::rasterize_parcels;
use crate::time::{Day, Period};

const NODATA: f32 = -9999.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    /// Square grid side in pixels.
    pub grid_side: usize,
    pub months: usize,
    /// Serial runs above this parcel count are skipped.
    pub serial_max_parcels: usize,
    /// Wall-clock budget per serial run.
    pub serial_budget_s: f64,
    pub seed: u64,
    /// Each measurement is the fastest of this many runs.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![1_000, 10_000, 100_000],
            grid_side: 2048,
            months: 12,
            serial_max_parcels: 10_000,
            serial_budget_s: 600.0,
            seed: 7,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    BudgetExceeded,
    Skipped,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::BudgetExceeded => "budget-exceeded",
            RunStatus::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_parcels: usize,
    pub method: String,
    pub wall_time_s: Option<f64>,
    pub status: RunStatus,
    pub n_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    /// Largest |grouped - serial| over sizes where both ran.
    pub max_abs_diff: Option<f64>,
    pub environment: String,
}

impl BenchReport {
    pub fn time(&self, n: usize, method: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.n_parcels == n && r.method == method && r.status == RunStatus::Ok)?.wall_time_s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n_parcels,method,wall_time_s,status\n");
        for r in &self.rows {
            let t = r.wall_time_s.map(|t| format!("{t:.3}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.n_parcels, r.method, t, r.status.as_str());
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| parcels | grouped (s) | serial (s) |\n|---:|---:|---:|\n");
        for &n in &self.config.sizes {
            let cell = |m: &str| {
                let row = self.rows.iter().find(|r| r.n_parcels == n && r.method == m);
                match row {
                    Some(BenchRow { status: RunStatus::Ok, wall_time_s: Some(t), .. }) => format!("{t:.2}"),
                    Some(r) => r.status.as_str().to_string(),
                    None => "-".into(),
                }
            };
            let _ = writeln!(s, "| {n} | {} | {} |", cell("grouped"), cell("serial"));
        }
        let _ = writeln!(s, "\n{}", self.environment);
        s
    }
}

/// Write the benchmark cube under `dir`: `months` monthly scenes of B04, a
/// smooth field with noise and about 5% nodata.
pub fn write_bench_cube(dir: &Path, grid: &GridSpec, months: usize, seed: u64) -> Result<TiledCube> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.01).expect("valid sigma");
    let mut entries = Vec::with_capacity(months);
    let mut day = Day::from_ymd(2020, 1, 10)?;
    for m in 0..months {
        let phase = m as f32 * 0.5;
        let values = Array2::from_shape_fn((grid.height, grid.width), |(r, c)| {
            if rng.random::<f32>() < 0.05 {
                NODATA
            } else {
                let base = 0.1 + 0.04 * ((r as f32 * 0.013 + phase).sin() + (c as f32 * 0.009 - phase).cos());
                base + noise.sample(&mut rng)
            }
        });
        let raster = Raster::new(grid.clone(), values, NODATA)?;
        let path = dir.join(day.to_string()).join("B04.tiles");
        write_tiled(&raster, &path, DType::F32)?;
        entries.push((day, BandId::B04, path));
        day = day.next_month().plus(9);
    }
    TiledCube::new(grid.clone(), entries)
}

pub fn bench_request() -> StatRequest {
    StatRequest {
        statistics: vec![Statistic::Mean],
        period: Period::Month,
        bands: vec![BandId::B04],
        buffer_inward_m: 0.0,
        cloud_buffer_m: 0.0,
        max_cloud_cover_fraction: 1.0,
        ..Default::default()
    }
}

/// Run both engines for every size on the same cube, stored under `work_dir`.
pub fn run_benchmark(cfg: &BenchConfig, work_dir: &Path) -> Result<BenchReport> {
    if cfg.sizes.is_empty() || cfg.months == 0 {
        return Err(Error::Config("benchmark needs at least one size and one month".into()));
    }
    let grid = GridSpec::new(500_000.0, 4_600_000.0, 10.0, cfg.grid_side, cfg.grid_side, "EPSG:32634")?;
    let cube = write_bench_cube(work_dir, &grid, cfg.months, cfg.seed)?;
    let req = bench_request();
    let mut rows = Vec::new();
    let mut max_diff: Option<f64> = None;
    for &n in &cfg.sizes {
        let synth = SyntheticConfig { grid: grid.clone(), n_parcels: n, rng_seed: cfg.seed ^ n as u64, ..SyntheticConfig::demo(cfg.seed) };
        let parcels = generate_synthetic_dataset(&synth)?.parcels;

        let mut tg = f64::INFINITY;
        let mut grouped = None;
        for _ in 0..cfg.repeats.max(1) {
            let t0 = Instant::now();
            let dense = cube.load_all()?;
            let labels = rasterize_parcels(&parcels, &grid)?.labels;
            let table = zonal_stats_grouped(&dense, &labels, &req)?;
            tg = tg.min(t0.elapsed().as_secs_f64());
            grouped = Some(table);
        }
        let grouped = grouped.expect("at least one run");
        log::info!("grouped n={n}: {tg:.2}s");
        rows.push(BenchRow { n_parcels: n, method: "grouped".into(), wall_time_s: Some(tg), status: RunStatus::Ok, n_records: grouped.records.len() });

        if n > cfg.serial_max_parcels {
            rows.push(BenchRow { n_parcels: n, method: "serial".into(), wall_time_s: None, status: RunStatus::Skipped, n_records: 0 });
            continue;
        }
        let mut best: Option<(f64, super::ZonalStatsTable)> = None;
        for _ in 0..cfg.repeats.max(1) {
            let t0 = Instant::now();
            let deadline = t0 + Duration::from_secs_f64(cfg.serial_budget_s);
            let Some(table) = zonal_stats_serial_until(&cube, &parcels, &req, Some(deadline))? else {
                best = None;
                break;
            };
            let ts = t0.elapsed().as_secs_f64();
            if best.as_ref().is_none_or(|(b, _)| ts < *b) {
                best = Some((ts, table));
            }
        }
        let Some((ts, serial)) = best else {
            rows.push(BenchRow { n_parcels: n, method: "serial".into(), wall_time_s: None, status: RunStatus::BudgetExceeded, n_records: 0 });
            continue;
        };
        log::info!("serial n={n}: {ts:.2}s");
        let d = if grouped.records.len() == serial.records.len() {
            grouped
                .records
                .iter()
                .zip(&serial.records)
                .map(|(a, b)| match (a.value, b.value) {
                    (Some(x), Some(y)) => (x - y).abs(),
                    (None, None) => 0.0,
                    _ => f64::INFINITY,
                })
                .fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        max_diff = Some(max_diff.map_or(d, |m| m.max(d)));
        rows.push(BenchRow { n_parcels: n, method: "serial".into(), wall_time_s: Some(ts), status: RunStatus::Ok, n_records: serial.records.len() });
    }
    Ok(BenchReport { config: cfg.clone(), rows, max_abs_diff: max_diff, environment: environment_note() })
}

pub fn environment_note() -> String {
    format!(
        "{} {}, {} worker threads, release={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        rayon::current_num_threads(),
        !cfg!(debug_assertions)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_benchmark_runs_and_agrees() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchConfig { sizes: vec![20, 60], grid_side: 128, months: 3, serial_max_parcels: 20, ..Default::default() };
        let rep = run_benchmark(&cfg, dir.path()).unwrap();
        assert_eq!(rep.rows.len(), 4);
        assert_eq!(rep.rows[3].status, RunStatus::Skipped);
        assert_eq!(rep.max_abs_diff, Some(0.0));
        assert!(rep.time(20, "grouped").is_some());
        assert!(rep.to_csv().contains("60,serial,,skipped"));
        assert!(rep.to_markdown().contains("| 60 |"));
    }

    #[test]
    fn zero_budget_is_marked() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchConfig { sizes: vec![30], grid_side: 64, months: 2, serial_budget_s: 0.0, ..Default::default() };
        let rep = run_benchmark(&cfg, dir.path()).unwrap();
        assert_eq!(rep.rows[1].status, RunStatus::BudgetExceeded);
    }
}
