// SPDX-License-Identifier: Apache-2.0

//! Cube backed by per-scene tiled files on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use ndarray::{s, Zip};

use crate::catalog::tiles::TiledReader;
use crate::error::{Error, Result};
use crate::grid::{BandId, CubeArray, CubeSource, GridSpec, PixelWindow};
use crate::time::Day;

/// Every window load opens the slice files afresh and reads whole tiles, the
/// way a chunked store answers independent queries.
#[derive(Debug)]
pub struct TiledCube {
    grid: GridSpec,
    times: Vec<Day>,
    bands: Vec<BandId>,
    slots: Vec<Option<PathBuf>>,
    cloud: Vec<OnceLock<f64>>,
    tiles_read: AtomicUsize,
}

impl TiledCube {
    /// Build from `(day, band, file)` entries; each file must lie on `grid`.
    pub fn new(grid: GridSpec, entries: Vec<(Day, BandId, PathBuf)>) -> Result<TiledCube> {
        let mut map: BTreeMap<(Day, BandId), PathBuf> = BTreeMap::new();
        for (day, band, path) in entries {
            let reader = TiledReader::open(&path, &grid.crs_id)?;
            if reader.grid() != &grid {
                return Err(Error::GridMismatch(format!("{} is not on the cube grid", path.display())));
            }
            if map.insert((day, band), path).is_some() {
                return Err(Error::ConflictingSlice { day: day.to_string(), band: band.to_string() });
            }
        }
        let mut times: Vec<Day> = map.keys().map(|k| k.0).collect();
        times.dedup();
        let mut bands: Vec<BandId> = map.keys().map(|k| k.1).collect();
        bands.sort();
        bands.dedup();
        let mut slots = vec![None; times.len() * bands.len()];
        for ((day, band), path) in map {
            let t = times.binary_search(&day).unwrap();
            let b = bands.binary_search(&band).unwrap();
            slots[t * bands.len() + b] = Some(path);
        }
        let cloud = (0..slots.len()).map(|_| OnceLock::new()).collect();
        Ok(TiledCube { grid, times, bands, slots, cloud, tiles_read: AtomicUsize::new(0) })
    }

    /// Scan `<root>/<YYYY-MM-DD>/<BAND>.tiles`.
    pub fn open_dir(root: &Path, grid: GridSpec) -> Result<TiledCube> {
        let mut entries = Vec::new();
        for day_dir in std::fs::read_dir(root)? {
            let day_dir = day_dir?;
            let Ok(day) = day_dir.file_name().to_string_lossy().parse::<Day>() else { continue };
            for f in std::fs::read_dir(day_dir.path())? {
                let p = f?.path();
                if p.extension().is_some_and(|e| e == "tiles") {
                    let stem = p.file_stem().unwrap().to_string_lossy().to_string();
                    if let Ok(band) = stem.parse::<BandId>() {
                        entries.push((day, band, p));
                    }
                }
            }
        }
        TiledCube::new(grid, entries)
    }

    pub fn tiles_read(&self) -> usize {
        self.tiles_read.load(Ordering::Relaxed)
    }

    fn slot(&self, t: usize, band: BandId) -> Option<&Path> {
        let b = self.bands.iter().position(|&x| x == band)?;
        self.slots[t * self.bands.len() + b].as_deref()
    }

    pub fn load_all(&self) -> Result<CubeArray> {
        self.load_window(&self.grid.full_window(), &self.bands)
    }
}

impl CubeSource for TiledCube {
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
        let keep: Vec<BandId> = self.bands.iter().copied().filter(|b| bands.contains(b)).collect();
        let mut cube = CubeArray::empty(self.grid.subgrid(win), self.times.clone(), keep.clone());
        if win.is_empty() {
            return Ok(cube);
        }
        for t in 0..self.times.len() {
            for (bi, &band) in keep.iter().enumerate() {
                let Some(path) = self.slot(t, band) else { continue };
                let reader = TiledReader::open(path, &self.grid.crs_id)?;
                let r = reader.read_raster_window(win)?;
                self.tiles_read.fetch_add(reader.tiles_read(), Ordering::Relaxed);
                cube.values.slice_mut(s![t, bi, .., ..]).assign(&r.values);
                Zip::from(cube.valid.slice_mut(s![t, bi, .., ..]))
                    .and(&r.values)
                    .for_each(|ok, &v| *ok = !r.is_nodata(v));
            }
        }
        Ok(cube)
    }

    fn scene_cloud_fraction(&self, t: usize, band: BandId) -> f64 {
        let Some(b) = self.bands.iter().position(|&x| x == band) else { return 1.0 };
        *self.cloud[t * self.bands.len() + b].get_or_init(|| {
            let mut wanted = vec![band];
            if self.slot(t, BandId::SCL).is_some() {
                wanted.push(BandId::SCL);
            }
            let full = self.grid.full_window();
            let keep: Vec<BandId> = self.bands.iter().copied().filter(|b| wanted.contains(b)).collect();
            let mut one = CubeArray::empty(self.grid.clone(), vec![self.times[t]], keep.clone());
            for (bi, &bd) in keep.iter().enumerate() {
                let Some(path) = self.slot(t, bd) else { continue };
                let Ok(r) = TiledReader::open(path, &self.grid.crs_id).and_then(|rd| rd.read_raster_window(&full)) else {
                    continue;
                };
                one.values.slice_mut(s![0, bi, .., ..]).assign(&r.values);
                Zip::from(one.valid.slice_mut(s![0, bi, .., ..]))
                    .and(&r.values)
                    .for_each(|ok, &v| *ok = !r.is_nodata(v));
            }
            crate::grid::scene_cloud_fraction(&one, 0, band)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::tiles::{write_tiled, DType};
    use crate::grid::Raster;
    use ndarray::Array2;

    #[test]
    fn tiled_cube_matches_memory_cube() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new(0.0, 0.0, 10.0, 300, 260, "EPSG:32633").unwrap();
        let mut entries = Vec::new();
        let mut slices = Vec::new();
        for (k, day) in [Day(10), Day(20), Day(30)].into_iter().enumerate() {
            let v = Array2::from_shape_fn((260, 300), |(r, c)| if (r + c + k) % 11 == 0 { -1.0 } else { (r * 3 + c + k) as f32 * 0.001 });
            let r = Raster::new(g.clone(), v, -1.0).unwrap();
            let p = dir.path().join(format!("{day}/B04.tiles"));
            write_tiled(&r, &p, DType::F32).unwrap();
            entries.push((day, BandId::B04, p));
            slices.push((day, BandId::B04, r));
            if k != 1 {
                let scl = Raster::new(g.clone(), Array2::from_shape_fn((260, 300), |(r, _)| if r < 26 { 2.0 } else { 1.0 }), 0.0).unwrap().categorical();
                let p = dir.path().join(format!("{day}/SCL.tiles"));
                write_tiled(&scl, &p, DType::I16).unwrap();
                entries.push((day, BandId::SCL, p));
                slices.push((day, BandId::SCL, scl));
            }
        }
        let tiled = TiledCube::new(g.clone(), entries).unwrap();
        let mem = crate::grid::stack_cube(slices, &g, crate::grid::ResampleMethod::Nearest).unwrap();
        assert_eq!(tiled.load_all().unwrap(), mem);
        let win = PixelWindow { row0: 250, col0: 250, rows: 10, cols: 30 };
        let before = tiled.tiles_read();
        assert_eq!(tiled.load_window(&win, &[BandId::B04]).unwrap(), mem.load_window(&win, &[BandId::B04]).unwrap());
        assert_eq!(tiled.tiles_read() - before, 3 * 4);
        for t in 0..3 {
            assert_eq!(tiled.scene_cloud_fraction(t, BandId::B04), mem.scene_cloud_fraction(t, BandId::B04));
        }
        let reopened = TiledCube::open_dir(dir.path(), g).unwrap();
        assert_eq!(reopened.times(), tiled.times());
    }
}
