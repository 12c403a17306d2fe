// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Exit status is non-zero on failure only when `ADC_ACCEPTANCE_STRICT=1`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use adc_core::catalog::tiles::{write_tiled, DType, TiledReader, HEADER_LEN};
use adc_core::catalog::{generate_synthetic_dataset, read_tiled, Catalog, FixedClock, SyntheticConfig};
use adc_core::features::phenology;
use adc_core::grid::{BBox, BandId, CubeArray, GridSpec, PixelWindow, Raster, ResampleMethod};
use adc_core::masking::{dilate_mask, erode_labels, squared_distance_transform, PixelMask};
use adc_core::parcels::{rasterize_parcels, LabelRaster};
use adc_core::query::scenario::{Scenario, ScenarioConfig, ScenarioName};
use adc_core::query::{animate, AnimationSpec, AnimationStep, AnimationTarget};
use adc_core::sits::{interpolate, prepare, resample_series, smooth, Aggregator, Interpolation, PipelineConfig, TimeSeries};
use adc_core::time::SeasonScheme;
use adc_core::workflow::{build_cube, process_pending, CubeRequest};
use adc_core::zonal::bench::{bench_request, run_benchmark, write_bench_cube, BenchConfig};
use adc_core::zonal::{zonal_stats_grouped, zonal_stats_serial, StatRequest, Statistic, ZonalStatsTable};
use adc_core::{Day, Error, Period};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

// NaN conditions count as failures
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn compare_tables(a: &ZonalStatsTable, b: &ZonalStatsTable, tol: f64) -> Result<f64, String> {
    ensure!(a.records.len() == b.records.len(), "record counts differ: {} vs {}", a.records.len(), b.records.len());
    let key = |t: &ZonalStatsTable| {
        let mut m = BTreeMap::new();
        for r in &t.records {
            m.insert((r.parcel_id, r.period_start, r.band, r.statistic), (r.value, r.n_valid_pixels));
        }
        m
    };
    let (ka, kb) = (key(a), key(b));
    ensure!(ka.len() == a.records.len(), "duplicate record keys");
    let mut max = 0.0f64;
    for (k, (va, na)) in &ka {
        let Some((vb, nb)) = kb.get(k) else { return Err(format!("record {k:?} missing from second table")) };
        ensure!(na == nb, "n_valid differs for {k:?}: {na} vs {nb}");
        match (va, vb) {
            (Some(x), Some(y)) => max = max.max((x - y).abs()),
            (None, None) => {}
            _ => return Err(format!("presence differs for {k:?}")),
        }
    }
    ensure!(max <= tol, "max |diff| {max:e} exceeds {tol:e}");
    Ok(max)
}

fn grouped_equals_serial() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(e2s)?;
    let grid = GridSpec::new(500_000.0, 4_600_000.0, 10.0, 2048, 2048, "EPSG:32634").map_err(e2s)?;
    let tiled = write_bench_cube(dir.path(), &grid, 12, 3).map_err(e2s)?;
    let synth = SyntheticConfig { grid: grid.clone(), n_parcels: 1000, ..SyntheticConfig::demo(3) };
    let parcels = generate_synthetic_dataset(&synth).map_err(e2s)?.parcels;
    let req = bench_request();

    let dense = tiled.load_all().map_err(e2s)?;
    let labels = rasterize_parcels(&parcels, &grid).map_err(e2s)?.labels;
    let grouped = zonal_stats_grouped(&dense, &labels, &req).map_err(e2s)?;
    drop(dense);
    let serial = zonal_stats_serial(&tiled, &parcels, &req).map_err(e2s)?;
    let max = compare_tables(&grouped, &serial, 1e-9)?;
    ensure!(grouped.parcel_ids().len() == 1000, "{} parcels in output", grouped.parcel_ids().len());
    ensure!(grouped.records.len() == 1000 * 12, "{} records", grouped.records.len());
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{} records, max |diff| {max:e}, {secs:.1}s", grouped.records.len()))
}

// ---------------------------------------------------------------- 2

fn table_one_trend() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(e2s)?;
    let cfg = BenchConfig::default();
    let rep = run_benchmark(&cfg, dir.path()).map_err(e2s)?;
    let secs = t0.elapsed().as_secs_f64();
    let t = |n, m| rep.time(n, m).ok_or_else(|| format!("no {m} timing at {n}"));
    let (g1, g10, g100) = (t(1_000, "grouped")?, t(10_000, "grouped")?, t(100_000, "grouped")?);
    let (s1, s10) = (t(1_000, "serial")?, t(10_000, "serial")?);
    let grouped_growth = g100 / g1;
    let serial_growth = s10 / s1;
    let speedup = s10 / g10;
    let detail = format!(
        "grouped {g1:.2}/{g10:.2}/{g100:.2}s (x{grouped_growth:.1}), serial {s1:.2}/{s10:.2}s (x{serial_growth:.1}), speedup@10k x{speedup:.1}, total {secs:.0}s"
    );
    let mut failed = Vec::new();
    if grouped_growth > 5.0 {
        failed.push("grouped growth > 5");
    }
    if serial_growth < 5.0 {
        failed.push("serial growth < 5");
    }
    if speedup < 10.0 {
        failed.push("speedup at 10k < 10");
    }
    if secs > 600.0 {
        failed.push("over 10 minutes");
    }
    if rep.max_abs_diff.is_none_or(|d| d > 1e-9) {
        failed.push("engines disagree");
    }
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}: {detail}", failed.join(", ")))
    }
}

// ---------------------------------------------------------------- 3

fn test_grid(n: usize) -> GridSpec {
    GridSpec::new(0.0, 0.0, 10.0, n, n, "EPSG:32634").unwrap()
}

fn random_bits(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |_| rng.random_bool(density))
}

fn brute_force_sq_distance(bits: &Array2<bool>) -> Array2<f64> {
    let set: Vec<(usize, usize)> = bits.indexed_iter().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    Array2::from_shape_fn(bits.dim(), |(r, c)| {
        set.iter()
            .map(|&(a, b)| {
                let (dr, dc) = (r as f64 - a as f64, c as f64 - b as f64);
                dr * dr + dc * dc
            })
            .fold(f64::INFINITY, f64::min)
    })
}

fn subset(a: &Array2<bool>, b: &Array2<bool>) -> bool {
    a.iter().zip(b).all(|(&x, &y)| !x || y)
}

fn morphology_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let grid = test_grid(64);
    let mut checked = 0;
    for i in 0..200 {
        let density = [0.002, 0.01, 0.05, 0.2][i % 4];
        let bits = random_bits(&mut rng, 64, density);
        if bits.iter().any(|&b| b) {
            let dt = squared_distance_transform(bits.view());
            let bf = brute_force_sq_distance(&bits);
            ensure!(dt.iter().zip(&bf).all(|(a, b)| a.to_bits() == b.to_bits()), "distance transform differs on mask {i}");
            checked += 1;
        }

        let radius = rng.random_range(0.0..40.0);
        let mask = PixelMask::new(grid.clone(), bits.clone()).map_err(e2s)?;
        let extra = random_bits(&mut rng, 64, 0.02);
        let bigger = PixelMask::new(grid.clone(), Array2::from_shape_fn((64, 64), |p| bits[p] || extra[p])).map_err(e2s)?;
        let d = dilate_mask(&mask, radius).map_err(e2s)?;
        let db = dilate_mask(&bigger, radius).map_err(e2s)?;
        ensure!(subset(&mask.bits, &d.bits), "dilation not extensive (mask {i}, r {radius:.1})");
        ensure!(subset(&d.bits, &db.bits), "dilation not monotone (mask {i}, r {radius:.1})");
        ensure!(dilate_mask(&mask, 0.0).map_err(e2s)?.bits == mask.bits, "radius-0 dilation changed mask {i}");

        // one parcel id over the mask, a second over the rest of a block
        let to_labels = |b: &Array2<bool>| LabelRaster {
            grid: grid.clone(),
            labels: Array2::from_shape_fn((64, 64), |(r, c)| if b[(r, c)] { 7 } else if r < 32 { 9 } else { -1 }),
        };
        let small = Array2::from_shape_fn((64, 64), |p| !bits[p] && rng.random_bool(0.9));
        let large = Array2::from_shape_fn((64, 64), |p| small[p] || extra[p] && !bits[p]);
        let lab_small = LabelRaster { grid: grid.clone(), labels: small.mapv(|b| if b { 7 } else { -1 }) };
        let lab_large = LabelRaster { grid: grid.clone(), labels: large.mapv(|b| if b { 7 } else { -1 }) };
        let es = erode_labels(&lab_small, radius).map_err(e2s)?;
        let el = erode_labels(&lab_large, radius).map_err(e2s)?;
        ensure!(es.labels.iter().zip(&lab_small.labels).all(|(&e, &o)| e == -1 || e == o), "erosion not anti-extensive (mask {i})");
        ensure!(
            es.labels.iter().zip(&el.labels).all(|(&a, &b)| a == -1 || a == b),
            "erosion not monotone (mask {i}, r {radius:.1})"
        );
        let mixed = to_labels(&bits);
        ensure!(erode_labels(&mixed, 0.0).map_err(e2s)? == mixed, "radius-0 erosion changed labels {i}");
        let em = erode_labels(&mixed, radius).map_err(e2s)?;
        ensure!(em.labels.iter().zip(&mixed.labels).all(|(&e, &o)| e == -1 || e == o), "multi-label erosion relabelled pixels");
    }
    ensure!(checked >= 190, "only {checked} non-empty masks");

    let mut one = Array2::from_elem((9, 9), false);
    one[(4, 4)] = true;
    let single = PixelMask::new(test_grid(9), one).map_err(e2s)?;
    let n = dilate_mask(&single, 10.0).map_err(e2s)?.count();
    ensure!(n == 5, "single pixel at radius 1 px dilates to {n} pixels");
    Ok(format!("{checked} distance transforms bit-equal, 200 buffer property cases, single-pixel dilation = 5"))
}

// ---------------------------------------------------------------- 4

fn ts_from(days: &[i32], vals: &[f64], valid: &[bool]) -> TimeSeries {
    TimeSeries::new(days.iter().map(|&d| Day(d)).collect(), vals.to_vec(), valid.to_vec()).unwrap()
}

fn sits_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // observed points survive interpolation
    for case in 0..100 {
        let n = rng.random_range(13..40);
        let mut d = 0;
        let days: Vec<i32> = (0..n)
            .map(|_| {
                d += rng.random_range(1..9);
                d
            })
            .collect();
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let valid: Vec<bool> = (0..n).map(|i| i % 4 == 0 || rng.random_bool(0.6)).collect();
        let ts = ts_from(&days, &vals, &valid);
        for method in [Interpolation::Linear, Interpolation::Cubic] {
            let out = interpolate(&ts, method).map_err(e2s)?;
            for i in 0..n {
                if valid[i] {
                    ensure!(out.valid[i] && out.values[i].to_bits() == vals[i].to_bits(), "case {case}: observed point {i} changed by {method:?}");
                }
            }
        }
    }

    let spike = TimeSeries::from_points(&[(Day(0), 1.0), (Day(1), 9.0), (Day(2), 1.0), (Day(3), 1.0)]).map_err(e2s)?;
    let sm = smooth(&spike, 3).map_err(e2s)?;
    ensure!(sm.values == vec![1.0; 4], "rolling median gave {:?}", sm.values);

    let daily = TimeSeries::from_points(&(0..=30).map(|d| (Day(d), d as f64)).collect::<Vec<_>>()).map_err(e2s)?;
    let r = resample_series(&daily, 10, Aggregator::Mean, true).map_err(e2s)?;
    ensure!(r.times == vec![Day(0), Day(10), Day(20), Day(30)], "resampled days {:?}", r.times);
    for _ in 0..200 {
        let len = rng.random_range(1..400);
        let step = rng.random_range(1..40);
        let ts = TimeSeries::from_points(&[(Day(0), 0.0), (Day(len), 1.0)]).map_err(e2s)?;
        let got = resample_series(&ts, step, Aggregator::Mean, true).map_err(e2s)?.len();
        ensure!(got == (len / step) as usize + 1, "span {len} step {step}: {got} samples");
    }

    // noisy, gappy synthetic curves against the noise-free generator curve
    let synth = SyntheticConfig { n_parcels: 60, ..SyntheticConfig::demo(17) };
    let ds = generate_synthetic_dataset(&synth).map_err(e2s)?;
    let noise = Normal::new(0.0, 0.03).unwrap();
    let cfg = PipelineConfig { step_days: 5, window_points: 3, ..Default::default() };
    let (mut se, mut n) = (0.0, 0usize);
    for truth in ds.truth.values() {
        let days = synth.s2_days();
        let vals: Vec<f64> = days.iter().map(|&d| truth.ndvi(d) + noise.sample(&mut rng)).collect();
        let valid: Vec<bool> = days.iter().enumerate().map(|(i, _)| i == 0 || i + 1 == days.len() || !rng.random_bool(0.3)).collect();
        let ts = TimeSeries::new(days, vals, valid).map_err(e2s)?;
        let out = prepare(&ts, &cfg).map_err(e2s)?;
        for i in 0..out.len() {
            if out.valid[i] {
                se += (out.values[i] - truth.ndvi(out.times[i])).powi(2);
                n += 1;
            }
        }
    }
    let rmse = (se / n as f64).sqrt();
    ensure!(rmse <= 0.05, "prepare RMSE {rmse:.4}");
    Ok(format!("interpolation exact on 200 series, spike removed, 200 resample counts, prepare RMSE {rmse:.4} over {n} samples"))
}

// ---------------------------------------------------------------- 5

fn phenology_suite() -> Outcome {
    let jan1 = Day::from_ymd(2021, 1, 1).unwrap();
    let tri = TimeSeries::from_points(&(0..=100).map(|d| (jan1.plus(d), 1.0 - (d as f64 - 50.0).abs() / 50.0)).collect::<Vec<_>>())
        .map_err(e2s)?;
    let m = phenology(&tri, 0.5).map_err(e2s)?;
    let near = |v: Option<f64>, t: f64| v.is_some_and(|v| (v - t).abs() <= 1e-9);
    ensure!(near(m.sos_day, 25.0) && near(m.pos_day, 50.0) && near(m.eos_day, 75.0), "triangle markers {:?}", (m.sos_day, m.pos_day, m.eos_day));
    ensure!((m.integral - 50.0).abs() <= 1e-9, "triangle integral {}", m.integral);

    let grid = GridSpec::new(500_000.0, 4_400_000.0, 10.0, 160, 160, "EPSG:32634").unwrap();
    let mix = [("maize", 0.3), ("wheat", 0.2), ("barley", 0.1), ("sunflower", 0.2), ("grassland", 0.2)];
    let synth = SyntheticConfig {
        grid,
        n_parcels: 500,
        crop_mix: mix.iter().map(|&(c, f)| (c.to_string(), f)).collect(),
        ..SyntheticConfig::demo(5)
    };
    let ds = generate_synthetic_dataset(&synth).map_err(e2s)?;
    ensure!(ds.truth.len() == 500, "{} parcels generated", ds.truth.len());
    let marker_error = |got: &adc_core::features::PhenologyMetrics, truth: &adc_core::catalog::ParcelTruth| {
        let want = truth.curve.phenology_truth(0.5);
        [(got.sos_day, want.sos), (got.pos_day, want.pos), (got.eos_day, want.eos)]
            .iter()
            .map(|&(g, w)| g.map_or(f64::INFINITY, |g| (g - w).abs()))
            .fold(0.0, f64::max)
    };

    // generator curves at the revisit cadence
    let days = synth.s2_days();
    let mut ok = 0;
    let mut misses = Vec::new();
    for truth in ds.truth.values() {
        let ts = TimeSeries::from_points(&days.iter().map(|&d| (d, truth.ndvi(d))).collect::<Vec<_>>()).map_err(e2s)?;
        let err = marker_error(&phenology(&ts, 0.5).map_err(e2s)?, truth);
        if err <= 5.0 {
            ok += 1;
        } else {
            misses.push((truth.id, err));
        }
    }
    ensure!(ok as f64 >= 0.95 * 500.0, "{ok}/500 within 5 days; misses {:?}", &misses[..misses.len().min(5)]);

    // informational: rendered scenes with pixel noise and clouds, parcel means, prepared
    let dir = tempfile::tempdir().map_err(e2s)?;
    let clock = FixedClock(synth.start.date().and_hms_opt(0, 0, 0).unwrap());
    let mut cat = Catalog::open_with_clock(dir.path(), Box::new(clock)).map_err(e2s)?;
    ds.write_to_catalog(&mut cat).map_err(e2s)?;
    process_pending(&mut cat).map_err(e2s)?;
    let req = CubeRequest { grid: synth.grid.clone(), bands: vec![BandId::NDVI, BandId::SCL], time_range: None, resample: ResampleMethod::Nearest };
    let cube = build_cube(&cat, &req).map_err(e2s)?;
    let daily = zonal_stats_grouped(&cube, &ds.labels, &StatRequest { period: Period::Day, ..Default::default() }).map_err(e2s)?;
    let mut series: BTreeMap<i32, Vec<(Day, Option<f64>)>> = BTreeMap::new();
    for r in &daily.records {
        series.entry(r.parcel_id).or_default().push((r.period_start, r.value));
    }
    let cfg = PipelineConfig { interpolation: Interpolation::Cubic, step_days: 5, window_points: 1, ..Default::default() };
    let (mut e2e, mut arable, mut n_arable) = (0, 0, 0);
    for truth in ds.truth.values() {
        let s = &series[&truth.id];
        let ts = TimeSeries::new(s.iter().map(|p| p.0).collect(), s.iter().map(|p| p.1.unwrap_or(f64::NAN)).collect(), s.iter().map(|p| p.1.is_some()).collect())
            .map_err(e2s)?;
        let hit = phenology(&prepare(&ts, &cfg).map_err(e2s)?, 0.5).is_ok_and(|m| marker_error(&m, truth) <= 5.0);
        e2e += hit as usize;
        if truth.crop != "grassland" {
            n_arable += 1;
            arable += hit as usize;
        }
    }
    Ok(format!(
        "triangle exact, {ok}/500 generator curves within 5 days (end-to-end with pixel noise and clouds: {e2e}/500, arable {arable}/{n_arable})"
    ))
}

// ---------------------------------------------------------------- 6

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_all_scenarios(data: &Path, out: &Path) -> Result<Scenario, String> {
    let mut s = Scenario::prepare(&ScenarioConfig::default(), data).map_err(e2s)?;
    for name in ScenarioName::ALL {
        s.run(name, out).map_err(e2s)?;
    }
    Ok(s)
}

fn scenario_suite() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let out_a = dir.path().join("a/out");
    let s = run_all_scenarios(&dir.path().join("a/data"), &out_a)?;
    let summary = |n: &str| -> Result<serde_json::Value, String> {
        serde_json::from_slice(&fs::read(out_a.join(n).join("summary.json")).map_err(e2s)?).map_err(e2s)
    };

    let q2 = summary("query2")?;
    let flagged: Vec<i32> = serde_json::from_value(q2["flagged"].clone()).map_err(e2s)?;
    ensure!(s.planted.mismatches.len() == 3, "{} mismatches planted", s.planted.mismatches.len());
    ensure!(flagged == s.planted.mismatches, "query2 flagged {flagged:?}, planted {:?}", s.planted.mismatches);

    // brute force: serial-engine mean over the whole range, detected counts per year
    let cfg = &s.config;
    let req = StatRequest {
        statistics: vec![Statistic::Mean],
        period: Period::WholeRange,
        bands: vec![BandId::NDVI],
        buffer_inward_m: cfg.buffer_inward_m,
        cloud_buffer_m: cfg.cloud_buffer_m,
        ..Default::default()
    };
    let means = zonal_stats_serial(&s.cube, &s.dataset.parcels, &req).map_err(e2s)?;
    let counts_csv = fs::read_to_string(out_a.join("query3/mowing_counts.csv")).map_err(e2s)?;
    let mut per_parcel: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    for line in counts_csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        per_parcel.entry(f[0].parse().map_err(e2s)?).or_default().push(f[2].parse().map_err(e2s)?);
    }
    let expected: Vec<i32> = s
        .dataset
        .parcels
        .iter()
        .filter(|p| p.crop_declared == "grassland")
        .filter(|p| means.records.iter().find(|r| r.parcel_id == p.id).and_then(|r| r.value).is_some_and(|v| v < cfg.ndvi_threshold))
        .filter(|p| per_parcel.get(&p.id).is_some_and(|c| c.iter().sum::<f64>() / (c.len() as f64) < cfg.events_threshold))
        .map(|p| p.id)
        .collect();
    let q3 = summary("query3")?;
    let hot: Vec<i32> = serde_json::from_value(q3["hotspots"].clone()).map_err(e2s)?;
    ensure!(hot == expected, "query3 hotspots {hot:?}, brute force {expected:?}");

    let q1 = summary("query1")?;
    let header = fs::read_to_string(out_a.join("query1/features.csv")).map_err(e2s)?.lines().next().unwrap_or("").to_string();
    let feature_cols = header.split(',').skip(1).filter(|c| !c.starts_with("missing_")).count();
    let months = (cfg.synth.end.year() - cfg.synth.start.year() + 1) as usize * 12;
    let formula = cfg.feature_bands.len() * months;
    ensure!(feature_cols == formula && q1["feature_columns"] == formula, "query1 has {feature_cols} feature columns, formula gives {formula}");

    let out_b = dir.path().join("b/out");
    run_all_scenarios(&dir.path().join("b/data"), &out_b)?;
    let (ta, tb) = (read_tree(&out_a), read_tree(&out_b));
    ensure!(ta.len() > 10, "only {} output files", ta.len());
    ensure!(ta == tb, "second run differs in {:?}", ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect::<Vec<_>>());
    Ok(format!("query2 = planted {flagged:?}, query3 = brute force {hot:?}, query1 {feature_cols} columns, {} files byte-identical", ta.len()))
}

// ---------------------------------------------------------------- 7

fn animation_suite() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let july = (Day::from_ymd(2020, 7, 1).unwrap(), Day::from_ymd(2020, 7, 31).unwrap());
    let synth = SyntheticConfig { overcast: vec![july], ..SyntheticConfig::demo(21) };
    let ds = generate_synthetic_dataset(&synth).map_err(e2s)?;
    let clock = FixedClock(synth.start.date().and_hms_opt(0, 0, 0).unwrap());
    let mut cat = Catalog::open_with_clock(dir.path(), Box::new(clock)).map_err(e2s)?;
    ds.write_to_catalog(&mut cat).map_err(e2s)?;
    process_pending(&mut cat).map_err(e2s)?;
    let req = CubeRequest { grid: synth.grid.clone(), bands: vec![BandId::NDVI, BandId::SCL], time_range: None, resample: ResampleMethod::Nearest };
    let cube: CubeArray = build_cube(&cat, &req).map_err(e2s)?;

    let stats = zonal_stats_grouped(
        &cube,
        &ds.labels,
        &StatRequest { statistics: vec![Statistic::Mean], period: Period::Month, bands: vec![BandId::NDVI], ..Default::default() },
    )
    .map_err(e2s)?;
    let mut compared = 0;
    for parcel in &ds.parcels {
        let spec = AnimationSpec {
            target: AnimationTarget::Parcel(parcel.id),
            band: BandId::NDVI,
            step: AnimationStep::Period(Period::Month),
            from: synth.start,
            to: synth.end,
            seasons: SeasonScheme::default(),
            buffer_inward_m: 5.0,
            cloud_buffer_m: 50.0,
        };
        let frames = animate(&cube, &ds.parcels, &spec).map_err(e2s)?;
        ensure!(frames.frames.len() == 12, "parcel {}: {} frames", parcel.id, frames.frames.len());
        for f in &frames.frames {
            let rec = stats.get(parcel.id, f.start, BandId::NDVI, Statistic::Mean);
            let want = rec.and_then(|r| r.value);
            match (f.aggregate, want) {
                (Some(a), Some(b)) => ensure!((a - b).abs() <= 1e-9, "parcel {} {}: frame {a} vs zonal {b}", parcel.id, f.start),
                (None, None) => {}
                (a, b) => return Err(format!("parcel {} {}: frame {a:?} vs zonal {b:?}", parcel.id, f.start)),
            }
            compared += 1;
            if f.start == july.0 {
                ensure!(f.n_scenes > 0, "overcast month has no scenes");
                ensure!(f.aggregate.is_none() && f.composite.iter().all(|v| v.is_nan()), "overcast frame of parcel {} has valid pixels", parcel.id);
            }
        }
    }
    Ok(format!("{} parcels x 12 frames, {compared} aggregates equal zonal records, July all-invalid", ds.parcels.len()))
}

// ---------------------------------------------------------------- 8

fn storage_suite() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let grid = GridSpec::new(300_000.0, 5_000_000.0, 10.0, 600, 700, "EPSG:32633").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let values = Array2::from_shape_fn((grid.height, grid.width), |_| match rng.random_range(0..20) {
        0 => -9999.0,
        1 => f32::MIN_POSITIVE / 4.0,
        2 => -0.0,
        _ => rng.random_range(-1e6f32..1e6),
    });
    let raster = Raster::new(grid.clone(), values, -9999.0).map_err(e2s)?;
    let path = dir.path().join("r.tiles");
    write_tiled(&raster, &path, DType::F32).map_err(e2s)?;
    let back = read_tiled(&path, &grid.crs_id, None).map_err(e2s)?;
    ensure!(back.grid == grid, "grid changed on round trip");
    ensure!(back.values.iter().zip(&raster.values).all(|(a, b)| a.to_bits() == b.to_bits()), "values not bit-exact");

    // windowed reads against the tile lattice
    let reader = TiledReader::open(&path, &grid.crs_id).map_err(e2s)?;
    let (th, tw) = (reader.header().tile_rows as usize, reader.header().tile_cols as usize);
    let mut total = 0;
    for _ in 0..50 {
        let r0 = rng.random_range(0..grid.height);
        let c0 = rng.random_range(0..grid.width);
        let win = PixelWindow { row0: r0, col0: c0, rows: rng.random_range(1..=grid.height - r0), cols: rng.random_range(1..=grid.width - c0) };
        let (x0, y0) = (grid.origin_x + c0 as f64 * 10.0 + 1.0, grid.origin_y + r0 as f64 * 10.0 + 1.0);
        let bbox = BBox::new(x0, y0, x0 + win.cols as f64 * 10.0 - 2.0, y0 + win.rows as f64 * 10.0 - 2.0);
        ensure!(grid.window_for_bbox(&bbox) == win, "bbox {bbox:?} maps to {:?}, not {win:?}", grid.window_for_bbox(&bbox));
        let before = reader.tiles_read();
        let part = reader.read_raster_window(&grid.window_for_bbox(&bbox)).map_err(e2s)?;
        let touched = reader.tiles_read() - before;
        let expect = ((r0 + win.rows - 1) / th - r0 / th + 1) * ((c0 + win.cols - 1) / tw - c0 / tw + 1);
        ensure!(touched == expect, "window {win:?} read {touched} tiles, intersects {expect}");
        let full = raster.values.slice(ndarray::s![r0..r0 + win.rows, c0..c0 + win.cols]);
        ensure!(part.values.iter().zip(full.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "window {win:?} values differ");
        total += touched;
    }

    // damaged files fail with a format or storage error, never a panic
    let good = fs::read(&path).map_err(e2s)?;
    let mut cases: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut bad_magic = good.clone();
    bad_magic[0] ^= 0xff;
    cases.push(("magic", bad_magic));
    let mut bad_dtype = good.clone();
    bad_dtype[6] = 0xee;
    cases.push(("dtype", bad_dtype));
    let mut bad_version = good.clone();
    bad_version[4] = 0x7f;
    cases.push(("version", bad_version));
    cases.push(("short header", good[..HEADER_LEN / 2].to_vec()));
    cases.push(("truncated body", good[..good.len() - 17].to_vec()));
    let mut zero_tile = good.clone();
    zero_tile[7..9].copy_from_slice(&[0, 0]);
    cases.push(("zero tile size", zero_tile));
    cases.push(("empty", vec![]));
    for (name, bytes) in cases {
        let p = dir.path().join(format!("{}.tiles", name.replace(' ', "_")));
        fs::write(&p, bytes).map_err(e2s)?;
        let res = panic::catch_unwind(|| read_tiled(&p, "EPSG:32633", None));
        match res {
            Ok(Err(Error::Format(_) | Error::Storage(_))) => {}
            Ok(Err(e)) => return Err(format!("{name}: unexpected error kind {e:?}")),
            Ok(Ok(_)) => return Err(format!("{name}: corrupt file accepted")),
            Err(_) => return Err(format!("{name}: reader panicked")),
        }
    }
    Ok(format!("bit-exact {}x{} round trip, 50 windowed reads ({total} tiles) matched the lattice, 7 corrupt files rejected", grid.height, grid.width))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 8] = [
        ("grouped/serial equivalence", grouped_equals_serial),
        ("grouped vs serial scaling", table_one_trend),
        ("morphology properties", morphology_suite),
        ("time-series pipeline", sits_suite),
        ("phenology", phenology_suite),
        ("end-to-end scenarios", scenario_suite),
        ("animation", animation_suite),
        ("tiled storage", storage_suite),
    ];
    let only: Option<Vec<usize>> = std::env::var("ADC_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {n} {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failures += 1;
                println!("FAIL {n} {name} ({secs:.1}s): {d}");
            }
        }
    }
    println!("acceptance: {failures} failing");
    if failures > 0 && std::env::var("ADC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
