// SPDX-License-Identifier: Apache-2.0

//! Tiled binary raster files.
//!
//! Layout: a fixed 51-byte little-endian header followed by full tiles in
//! row-then-column tile order, each tile row-major. Edge tiles are padded with
//! the nodata value so every tile has the same byte size and any tile can be
//! located by arithmetic alone.

use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{BBox, BandId, GridSpec, PixelWindow, Raster};
use crate::masking::PixelMask;
use crate::parcels::{LabelRaster, BACKGROUND};

pub const MAGIC: &[u8; 4] = b"ADC1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 51;
pub const TILE_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    U8 = 1,
    I16 = 2,
    I32 = 3,
    F32 = 4,
    F64 = 5,
}

impl DType {
    pub fn from_code(code: u8) -> Option<DType> {
        Some(match code {
            1 => DType::U8,
            2 => DType::I16,
            3 => DType::I32,
            4 => DType::F32,
            5 => DType::F64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I16 => 2,
            DType::I32 | DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, DType::U8 | DType::I16 | DType::I32)
    }

    fn int_range(self) -> (f64, f64) {
        match self {
            DType::U8 => (0.0, u8::MAX as f64),
            DType::I16 => (i16::MIN as f64, i16::MAX as f64),
            DType::I32 => (i32::MIN as f64, i32::MAX as f64),
            DType::F32 | DType::F64 => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Stored type for a band: 16-bit integers for class layers, 32-bit float otherwise.
    pub fn for_band(band: BandId) -> DType {
        if band.is_categorical() {
            DType::I16
        } else {
            DType::F32
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileHeader {
    pub dtype: DType,
    pub tile_rows: u16,
    pub tile_cols: u16,
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
    pub width: u32,
    pub height: u32,
    pub nodata: f64,
}

impl TileHeader {
    pub fn for_grid(grid: &GridSpec, dtype: DType, nodata: f64) -> TileHeader {
        TileHeader {
            dtype,
            tile_rows: TILE_SIZE as u16,
            tile_cols: TILE_SIZE as u16,
            origin_x: grid.origin_x,
            origin_y: grid.origin_y,
            pixel_size: grid.pixel_size,
            width: grid.width as u32,
            height: grid.height as u32,
            nodata,
        }
    }

    pub fn tiles_down(&self) -> usize {
        (self.height as usize).div_ceil(self.tile_rows as usize)
    }

    pub fn tiles_across(&self) -> usize {
        (self.width as usize).div_ceil(self.tile_cols as usize)
    }

    pub fn tile_bytes(&self) -> usize {
        self.tile_rows as usize * self.tile_cols as usize * self.dtype.size()
    }

    pub fn file_len(&self) -> u64 {
        (HEADER_LEN + self.tiles_down() * self.tiles_across() * self.tile_bytes()) as u64
    }

    pub fn grid(&self, crs_id: &str) -> Result<GridSpec> {
        GridSpec::new(
            self.origin_x,
            self.origin_y,
            self.pixel_size,
            self.width as usize,
            self.height as usize,
            crs_id,
        )
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(MAGIC);
        b[4..6].copy_from_slice(&VERSION.to_le_bytes());
        b[6] = self.dtype as u8;
        b[7..9].copy_from_slice(&self.tile_rows.to_le_bytes());
        b[9..11].copy_from_slice(&self.tile_cols.to_le_bytes());
        b[11..19].copy_from_slice(&self.origin_x.to_le_bytes());
        b[19..27].copy_from_slice(&self.origin_y.to_le_bytes());
        b[27..35].copy_from_slice(&self.pixel_size.to_le_bytes());
        b[35..39].copy_from_slice(&self.width.to_le_bytes());
        b[39..43].copy_from_slice(&self.height.to_le_bytes());
        b[43..51].copy_from_slice(&self.nodata.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Result<TileHeader> {
        if b.len() < HEADER_LEN {
            return Err(Error::Format(format!("header truncated: {} of {HEADER_LEN} bytes", b.len())));
        }
        if &b[0..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dtype = DType::from_code(b[6]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", b[6])))?;
        let f = |i: usize| f64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let h = TileHeader {
            dtype,
            tile_rows: u16::from_le_bytes([b[7], b[8]]),
            tile_cols: u16::from_le_bytes([b[9], b[10]]),
            origin_x: f(11),
            origin_y: f(19),
            pixel_size: f(27),
            width: u32_at(35),
            height: u32_at(39),
            nodata: f(43),
        };
        if h.tile_rows == 0 || h.tile_cols == 0 || h.width == 0 || h.height == 0 {
            return Err(Error::Format("zero tile or raster dimension".into()));
        }
        if !(h.pixel_size.is_finite() && h.pixel_size > 0.0) || !h.origin_x.is_finite() || !h.origin_y.is_finite() {
            return Err(Error::Format("invalid georeferencing".into()));
        }
        Ok(h)
    }
}

fn put_value(dtype: DType, v: f64, out: &mut Vec<u8>) {
    match dtype {
        DType::U8 => out.push(v as u8),
        DType::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
        DType::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
        DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
    }
}

fn get_value(dtype: DType, b: &[u8]) -> f64 {
    match dtype {
        DType::U8 => b[0] as f64,
        DType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
        DType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
        DType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
        DType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
    }
}

/// Assemble and atomically write a tiled file; `cell(row, col, out)` appends
/// the encoded bytes of one in-bounds pixel.
fn write_cells(path: &Path, header: &TileHeader, mut cell: impl FnMut(usize, usize, &mut Vec<u8>)) -> Result<()> {
    let (th, tw) = (header.tile_rows as usize, header.tile_cols as usize);
    let (h, w) = (header.height as usize, header.width as usize);
    let mut pad = Vec::with_capacity(header.dtype.size());
    put_value(header.dtype, header.nodata, &mut pad);
    let mut buf = Vec::with_capacity(header.file_len() as usize);
    buf.extend_from_slice(&header.encode());
    for tr in 0..header.tiles_down() {
        for tc in 0..header.tiles_across() {
            for r in tr * th..(tr + 1) * th {
                for c in tc * tw..(tc + 1) * tw {
                    if r < h && c < w {
                        cell(r, c, &mut buf);
                    } else {
                        buf.extend_from_slice(&pad);
                    }
                }
            }
        }
    }
    debug_assert_eq!(buf.len() as u64, header.file_len());
    write_atomic(path, &buf)
}

/// Write to a sibling temporary file and rename, so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp: PathBuf = path.to_path_buf();
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    tmp.set_file_name(name);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn check_storable(dtype: DType, v: f64, what: &str) -> Result<()> {
    if !dtype.is_integer() {
        return Ok(());
    }
    let (lo, hi) = dtype.int_range();
    if !v.is_finite() || v.fract() != 0.0 || v < lo || v > hi {
        return Err(Error::InvalidArgument(format!("{what} {v} is not representable as {dtype:?}")));
    }
    Ok(())
}

/// Write a raster. Integer types require integral in-range values and an
/// integral nodata; nodata pixels (including NaN) are stored as the nodata value.
pub fn write_tiled(raster: &Raster, path: &Path, dtype: DType) -> Result<()> {
    check_storable(dtype, raster.nodata as f64, "nodata")?;
    if dtype.is_integer() {
        for &v in raster.values.iter() {
            if !raster.is_nodata(v) {
                check_storable(dtype, v as f64, "value")?;
            }
        }
    }
    let header = TileHeader::for_grid(&raster.grid, dtype, raster.nodata as f64);
    let values = &raster.values;
    match dtype {
        DType::F32 => write_cells(path, &header, |r, c, out| out.extend_from_slice(&values[(r, c)].to_le_bytes())),
        _ => write_cells(path, &header, |r, c, out| {
            let v = values[(r, c)];
            let v = if raster.is_nodata(v) { raster.nodata as f64 } else { v as f64 };
            put_value(dtype, v, out)
        }),
    }
}

pub fn write_labels(labels: &LabelRaster, path: &Path) -> Result<()> {
    let header = TileHeader::for_grid(&labels.grid, DType::I32, BACKGROUND as f64);
    write_cells(path, &header, |r, c, out| out.extend_from_slice(&labels.labels[(r, c)].to_le_bytes()))
}

pub fn write_mask(mask: &PixelMask, path: &Path) -> Result<()> {
    let header = TileHeader::for_grid(&mask.grid, DType::U8, 0.0);
    write_cells(path, &header, |r, c, out| out.push(mask.bits[(r, c)] as u8))
}

/// Random-access reader over one tiled file. Counts tile reads so callers can
/// verify that windowed reads touch only intersecting tiles.
#[derive(Debug)]
pub struct TiledReader {
    header: TileHeader,
    grid: GridSpec,
    file: Mutex<File>,
    tiles_read: AtomicUsize,
}

impl TiledReader {
    pub fn open(path: &Path, crs_id: &str) -> Result<TiledReader> {
        let mut file = File::open(path).map_err(|e| Error::Storage(format!("{}: {e}", path.display())))?;
        let mut hb = [0u8; HEADER_LEN];
        let n = read_up_to(&mut file, &mut hb)?;
        let header = TileHeader::decode(&hb[..n]).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let len = file.metadata()?.len();
        if len != header.file_len() {
            return Err(Error::Format(format!(
                "{}: file is {len} bytes, header implies {}",
                path.display(),
                header.file_len()
            )));
        }
        let grid = header.grid(crs_id).map_err(|e| Error::Format(e.to_string()))?;
        Ok(TiledReader { header, grid, file: Mutex::new(file), tiles_read: AtomicUsize::new(0) })
    }

    pub fn header(&self) -> &TileHeader {
        &self.header
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn tiles_read(&self) -> usize {
        self.tiles_read.load(Ordering::Relaxed)
    }

    fn read_tile(&self, tr: usize, tc: usize, buf: &mut [u8]) -> Result<()> {
        let idx = tr * self.header.tiles_across() + tc;
        let offset = (HEADER_LEN + idx * self.header.tile_bytes()) as u64;
        let mut f = self.file.lock().expect("tile file lock poisoned");
        f.seek(SeekFrom::Start(offset))?;
        f.read_exact(buf).map_err(|e| Error::Format(format!("tile ({tr},{tc}) unreadable: {e}")))?;
        self.tiles_read.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Decode the pixels of `win`, touching only the tiles it intersects.
    pub fn read_window_with<T: Clone>(&self, win: &PixelWindow, fill: T, decode: impl Fn(&[u8]) -> T) -> Result<Array2<T>> {
        let mut out = Array2::from_elem((win.rows, win.cols), fill);
        if win.is_empty() {
            return Ok(out);
        }
        if win.row_end() > self.grid.height || win.col_end() > self.grid.width {
            return Err(Error::InvalidArgument(format!("window {win:?} exceeds raster")));
        }
        let (th, tw) = (self.header.tile_rows as usize, self.header.tile_cols as usize);
        let size = self.header.dtype.size();
        let mut buf = vec![0u8; self.header.tile_bytes()];
        for tr in win.row0 / th..=(win.row_end() - 1) / th {
            for tc in win.col0 / tw..=(win.col_end() - 1) / tw {
                self.read_tile(tr, tc, &mut buf)?;
                let r0 = win.row0.max(tr * th);
                let r1 = win.row_end().min((tr + 1) * th);
                let c0 = win.col0.max(tc * tw);
                let c1 = win.col_end().min((tc + 1) * tw);
                for r in r0..r1 {
                    let o = ((r - tr * th) * tw + c0 - tc * tw) * size;
                    let src = buf[o..o + (c1 - c0) * size].chunks_exact(size);
                    let mut row = out.row_mut(r - win.row0);
                    let dst = row.slice_mut(ndarray::s![c0 - win.col0..c1 - win.col0]);
                    for (d, b) in dst.into_iter().zip(src) {
                        *d = decode(b);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn read_raster_window(&self, win: &PixelWindow) -> Result<Raster> {
        let dtype = self.header.dtype;
        let nodata = self.header.nodata as f32;
        let values = match dtype {
            DType::F32 => self.read_window_with(win, nodata, |b| f32::from_le_bytes(b[..4].try_into().unwrap()))?,
            _ => self.read_window_with(win, nodata, |b| get_value(dtype, b) as f32)?,
        };
        let mut r = Raster::new(self.grid.subgrid(win), values, nodata)?;
        r.categorical = dtype.is_integer();
        Ok(r)
    }
}

fn read_up_to(f: &mut File, buf: &mut [u8]) -> Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match f.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// Read a tiled raster, optionally restricted to the pixels whose centers fall
/// in `bbox`. The file header carries no CRS, so the caller supplies it.
pub fn read_tiled(path: &Path, crs_id: &str, bbox: Option<&BBox>) -> Result<Raster> {
    let reader = TiledReader::open(path, crs_id)?;
    let win = match bbox {
        Some(b) => reader.grid().window_for_bbox(b),
        None => reader.grid().full_window(),
    };
    reader.read_raster_window(&win)
}

pub fn read_labels(path: &Path, crs_id: &str) -> Result<LabelRaster> {
    let reader = TiledReader::open(path, crs_id)?;
    if reader.header().dtype != DType::I32 {
        return Err(Error::Format(format!("{}: label raster must be I32", path.display())));
    }
    let labels = reader.read_window_with(&reader.grid().full_window(), BACKGROUND, |b| {
        i32::from_le_bytes(b[..4].try_into().unwrap())
    })?;
    Ok(LabelRaster { grid: reader.grid().clone(), labels })
}

pub fn read_mask(path: &Path, crs_id: &str) -> Result<PixelMask> {
    let reader = TiledReader::open(path, crs_id)?;
    if reader.header().dtype != DType::U8 {
        return Err(Error::Format(format!("{}: mask must be U8", path.display())));
    }
    let mask = reader.read_window_with(&reader.grid().full_window(), false, |b| b[0] != 0)?;
    PixelMask::new(reader.grid().clone(), mask)
}
