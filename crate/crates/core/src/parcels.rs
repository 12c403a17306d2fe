// SPDX-License-Identifier: Apache-2.0

//! Parcel registry model, planar polygon operations and label rasterization.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::grid::{BBox, GridSpec, PixelWindow};

pub type Point = [f64; 2];

/// Label of pixels that belong to no parcel.
pub const BACKGROUND: i32 = -1;

const BLOCK_ROWS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    exterior: Vec<Point>,
    holes: Vec<Vec<Point>>,
}

impl Polygon {
    pub fn new(exterior: Vec<Point>, holes: Vec<Vec<Point>>) -> Result<Polygon> {
        validate_ring(&exterior, "exterior ring")?;
        for (i, h) in holes.iter().enumerate() {
            validate_ring(h, &format!("hole {i}"))?;
        }
        Ok(Polygon { exterior, holes })
    }

    /// Axis-aligned rectangle, handy for tests and synthetic layouts.
    pub fn rect(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Polygon> {
        Polygon::new(
            vec![[min_x, min_y], [max_x, min_y], [max_x, max_y], [min_x, max_y], [min_x, min_y]],
            vec![],
        )
    }

    pub fn exterior(&self) -> &[Point] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Vec<Point>] {
        &self.holes
    }

    pub fn rings(&self) -> impl Iterator<Item = &[Point]> {
        std::iter::once(self.exterior.as_slice()).chain(self.holes.iter().map(|h| h.as_slice()))
    }

    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        self.rings().flat_map(|r| r.windows(2).map(|w| (w[0], w[1])))
    }

    pub fn bbox(&self) -> BBox {
        ring_bbox(&self.exterior)
    }

    pub fn area(&self) -> f64 {
        let holes: f64 = self.holes.iter().map(|h| ring_area(h).abs()).sum();
        (ring_area(&self.exterior).abs() - holes).max(0.0)
    }

    /// Even-odd point-in-polygon test over all rings; points on any ring
    /// boundary count as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if on_segment([x, y], a, b) {
                return true;
            }
            if (a[1] <= y) != (b[1] <= y) {
                let xc = crossing_x(a, b, y);
                if x < xc {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Polygon {
        let mv = |r: &Vec<Point>| r.iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
        Polygon { exterior: mv(&self.exterior), holes: self.holes.iter().map(mv).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Polygon(Polygon),
    MultiPolygon(Vec<Polygon>),
}

impl Geometry {
    pub fn parts(&self) -> &[Polygon] {
        match self {
            Geometry::Polygon(p) => std::slice::from_ref(p),
            Geometry::MultiPolygon(ps) => ps,
        }
    }

    pub fn bbox(&self) -> BBox {
        let mut it = self.parts().iter().map(|p| p.bbox());
        let first = it.next().unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0));
        it.fold(first, |acc, b| acc.union(&b))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.parts().iter().any(|p| p.contains(x, y))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Geometry {
        match self {
            Geometry::Polygon(p) => Geometry::Polygon(p.translate(dx, dy)),
            Geometry::MultiPolygon(ps) => Geometry::MultiPolygon(ps.iter().map(|p| p.translate(dx, dy)).collect()),
        }
    }
}

impl From<Polygon> for Geometry {
    fn from(p: Polygon) -> Self {
        Geometry::Polygon(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parcel {
    pub id: i32,
    pub geometry: Geometry,
    pub crop_declared: String,
    pub crop_predicted: Option<String>,
    pub attributes: BTreeMap<String, Value>,
}

impl Parcel {
    pub fn new(id: i32, geometry: impl Into<Geometry>, crop_declared: impl Into<String>) -> Result<Parcel> {
        let p = Parcel {
            id,
            geometry: geometry.into(),
            crop_declared: crop_declared.into(),
            crop_predicted: None,
            attributes: BTreeMap::new(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_prediction(mut self, crop: impl Into<String>) -> Parcel {
        self.crop_predicted = Some(crop.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.id <= 0 {
            return Err(Error::InvalidArgument(format!("parcel id must be positive, got {}", self.id)));
        }
        if self.geometry.parts().is_empty() || polygon_area(&self.geometry)? <= 0.0 {
            return Err(Error::InvalidGeometry {
                context: format!("parcel {}", self.id),
                reason: "zero area".into(),
            });
        }
        Ok(())
    }
}

/// Integer raster of parcel ids, [`BACKGROUND`] elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRaster {
    pub grid: GridSpec,
    pub labels: Array2<i32>,
}

impl LabelRaster {
    pub fn background(grid: GridSpec) -> LabelRaster {
        let labels = Array2::from_elem((grid.height, grid.width), BACKGROUND);
        LabelRaster { grid, labels }
    }

    /// Pixel count per parcel id (background excluded).
    pub fn pixel_counts(&self) -> BTreeMap<i32, usize> {
        let mut m = BTreeMap::new();
        for &l in self.labels.iter() {
            if l != BACKGROUND {
                *m.entry(l).or_insert(0) += 1;
            }
        }
        m
    }

    pub fn ids(&self) -> BTreeSet<i32> {
        self.labels.iter().copied().filter(|&l| l != BACKGROUND).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Rasterized {
    pub labels: LabelRaster,
    /// Pixels whose center lies in more than one parcel.
    pub overlap_pixels: usize,
}

/// Burn parcels into a label raster: a pixel takes a parcel's id when its
/// center lies inside the parcel (boundary inclusive, holes excluded). On
/// overlaps the lowest id wins.
pub fn rasterize_parcels(parcels: &[Parcel], grid: &GridSpec) -> Result<Rasterized> {
    let mut seen = BTreeSet::new();
    for p in parcels {
        p.validate()?;
        if !seen.insert(p.id) {
            return Err(Error::DuplicateParcel(p.id));
        }
    }
    let mut order: Vec<&Parcel> = parcels.iter().collect();
    order.sort_by_key(|p| p.id);

    let n_blocks = grid.height.div_ceil(BLOCK_ROWS);
    let mut per_block: Vec<Vec<&Parcel>> = vec![Vec::new(); n_blocks];
    for p in &order {
        let win = grid.window_for_bbox(&p.geometry.bbox());
        if win.is_empty() {
            continue;
        }
        for blk in per_block.iter_mut().take((win.row_end() - 1) / BLOCK_ROWS + 1).skip(win.row0 / BLOCK_ROWS) {
            blk.push(p);
        }
    }

    let mut labels = Array2::from_elem((grid.height, grid.width), BACKGROUND);
    let width = grid.width;
    let overlaps: usize = labels
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(BLOCK_ROWS * width)
        .enumerate()
        .map(|(bi, chunk)| {
            let row0 = bi * BLOCK_ROWS;
            let rows = chunk.len() / width;
            let mut overlapped = vec![false; chunk.len()];
            let mut count = 0usize;
            let mut spans = Vec::new();
            for p in &per_block[bi] {
                for r in row0..row0 + rows {
                    let (_, cy) = grid.center(r, 0);
                    spans.clear();
                    for part in p.geometry.parts() {
                        row_spans(part, cy, &mut spans);
                    }
                    for &(x0, x1) in &spans {
                        let (c0, c1) = column_span(grid, x0, x1);
                        for c in c0..c1 {
                            let i = (r - row0) * width + c;
                            if chunk[i] == BACKGROUND {
                                chunk[i] = p.id;
                            } else if chunk[i] != p.id && !overlapped[i] {
                                overlapped[i] = true;
                                count += 1;
                            }
                        }
                    }
                }
            }
            count
        })
        .sum();
    Ok(Rasterized { labels: LabelRaster { grid: grid.clone(), labels }, overlap_pixels: overlaps })
}

/// Rasterize only `win` of `grid`, using the parent grid's pixel centers so the
/// result equals the same window of a full-grid rasterization.
pub fn rasterize_window(parcels: &[Parcel], grid: &GridSpec, win: &PixelWindow) -> Result<LabelRaster> {
    let mut order: Vec<&Parcel> = parcels.iter().collect();
    order.sort_by_key(|p| p.id);
    for (i, p) in order.iter().enumerate() {
        p.validate()?;
        if i > 0 && order[i - 1].id == p.id {
            return Err(Error::DuplicateParcel(p.id));
        }
    }
    let mut labels = Array2::from_elem((win.rows, win.cols), BACKGROUND);
    let mut spans = Vec::new();
    for p in order {
        let pw = grid.window_for_bbox(&p.geometry.bbox());
        let r0 = pw.row0.max(win.row0);
        let r1 = pw.row_end().min(win.row_end());
        for r in r0..r1 {
            let (_, cy) = grid.center(r, 0);
            spans.clear();
            for part in p.geometry.parts() {
                row_spans(part, cy, &mut spans);
            }
            for &(x0, x1) in &spans {
                let (c0, c1) = column_span(grid, x0, x1);
                for c in c0.max(win.col0)..c1.min(win.col_end()) {
                    let cell = &mut labels[(r - win.row0, c - win.col0)];
                    if *cell == BACKGROUND {
                        *cell = p.id;
                    }
                }
            }
        }
    }
    Ok(LabelRaster { grid: grid.subgrid(win), labels })
}

/// Closed x-intervals of one polygon along the horizontal line `y`: even-odd
/// interior spans plus boundary points/segments lying on the line.
fn row_spans(poly: &Polygon, y: f64, out: &mut Vec<(f64, f64)>) {
    let mut xs: Vec<f64> = Vec::new();
    for (a, b) in poly.edges() {
        let (ylo, yhi) = if a[1] <= b[1] { (a[1], b[1]) } else { (b[1], a[1]) };
        if y < ylo || y > yhi {
            continue;
        }
        if (a[1] <= y) != (b[1] <= y) {
            xs.push(crossing_x(a, b, y));
        }
        if a[1] == b[1] {
            out.push((a[0].min(b[0]), a[0].max(b[0])));
        } else if y == a[1] {
            out.push((a[0], a[0]));
        } else if y == b[1] {
            out.push((b[0], b[0]));
        }
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    for pair in xs.chunks_exact(2) {
        out.push((pair[0], pair[1]));
    }
}

fn column_span(grid: &GridSpec, x0: f64, x1: f64) -> (usize, usize) {
    let lo = ((x0 - grid.origin_x) / grid.pixel_size - 0.5).ceil().max(0.0);
    let hi = ((x1 - grid.origin_x) / grid.pixel_size - 0.5).floor().min(grid.width as f64 - 1.0);
    if hi < lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize + 1)
    }
}

#[inline]
fn crossing_x(a: Point, b: Point, y: f64) -> f64 {
    a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    cross(a, b, p) == 0.0
        && p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    on_segment(p1, q1, q2) || on_segment(p2, q1, q2) || on_segment(q1, p1, p2) || on_segment(q2, p1, p2)
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

fn ring_area(ring: &[Point]) -> f64 {
    ring.windows(2).map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1]).sum::<f64>() * 0.5
}

fn ring_bbox(ring: &[Point]) -> BBox {
    ring.iter().fold(BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |b, p| {
        BBox::new(b.min_x.min(p[0]), b.min_y.min(p[1]), b.max_x.max(p[0]), b.max_y.max(p[1]))
    })
}

fn validate_ring(ring: &[Point], what: &str) -> Result<()> {
    let bad = |reason: String| Err(Error::InvalidGeometry { context: what.to_string(), reason });
    if ring.len() < 4 {
        return bad(format!("ring has {} points, need at least 4", ring.len()));
    }
    if ring.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return bad("non-finite coordinate".into());
    }
    if ring.first() != ring.last() {
        return bad("ring is not closed".into());
    }
    let mut distinct: Vec<Point> = ring[..ring.len() - 1].to_vec();
    distinct.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    distinct.dedup();
    if distinct.len() < 3 {
        return bad("degenerate ring (fewer than 3 distinct points)".into());
    }
    let n = ring.len() - 1;
    for i in 0..n {
        for j in i + 1..n {
            // adjacent edges share an endpoint
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_intersect(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                return bad(format!("self-intersection between edges {i} and {j}"));
            }
        }
    }
    Ok(())
}

/// Planar area in m²: shoelace on each exterior ring minus its holes.
pub fn polygon_area(g: &Geometry) -> Result<f64> {
    let mut total = 0.0;
    for p in g.parts() {
        for (i, r) in p.rings().enumerate() {
            if ring_area(r) == 0.0 {
                return Err(Error::InvalidGeometry {
                    context: if i == 0 { "exterior ring".into() } else { format!("hole {}", i - 1) },
                    reason: "degenerate ring".into(),
                });
            }
        }
        total += p.area();
    }
    Ok(total)
}

/// Minimum Euclidean distance between two geometries; zero when they touch,
/// cross or one contains the other.
pub fn geometry_distance(a: &Geometry, b: &Geometry) -> f64 {
    let mut best = f64::INFINITY;
    for pa in a.parts() {
        for pb in b.parts() {
            best = best.min(polygon_distance(pa, pb));
            if best == 0.0 {
                return 0.0;
            }
        }
    }
    best
}

fn polygon_distance(a: &Polygon, b: &Polygon) -> f64 {
    let ea: Vec<_> = a.edges().collect();
    let eb: Vec<_> = b.edges().collect();
    for &(p1, p2) in &ea {
        for &(q1, q2) in &eb {
            if segments_intersect(p1, p2, q1, q2) {
                return 0.0;
            }
        }
    }
    if b.contains(a.exterior[0][0], a.exterior[0][1]) || a.contains(b.exterior[0][0], b.exterior[0][1]) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for &(p1, p2) in &ea {
        for &(q1, q2) in &eb {
            let d = point_segment_distance(p1, q1, q2)
                .min(point_segment_distance(p2, q1, q2))
                .min(point_segment_distance(q1, p1, p2))
                .min(point_segment_distance(q2, p1, p2));
            best = best.min(d);
        }
    }
    best
}

fn parse_ring(v: &Value) -> Option<Vec<Point>> {
    v.as_array()?
        .iter()
        .map(|p| {
            let a = p.as_array()?;
            (a.len() >= 2).then(|| Some([a[0].as_f64()?, a[1].as_f64()?]))?
        })
        .collect()
}

fn parse_polygon(v: &Value) -> std::result::Result<Polygon, String> {
    let rings = v.as_array().ok_or("polygon coordinates must be an array of rings")?;
    let mut parsed = Vec::with_capacity(rings.len());
    for r in rings {
        parsed.push(parse_ring(r).ok_or("ring must be an array of [x, y] positions")?);
    }
    if parsed.is_empty() {
        return Err("polygon has no rings".into());
    }
    let exterior = parsed.remove(0);
    Polygon::new(exterior, parsed).map_err(|e| e.to_string())
}

/// Parse a GeoJSON-style feature collection of Polygon/MultiPolygon parcels.
pub fn parse_parcels(text: &str) -> Result<Vec<Parcel>> {
    let doc: Value = serde_json::from_str(text)?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Format("expected a FeatureCollection with a 'features' array".into()))?;
    let mut out = Vec::with_capacity(features.len());
    let mut ids = BTreeSet::new();
    for (i, f) in features.iter().enumerate() {
        let bad = |reason: String| Error::InvalidGeometry { context: format!("feature {i}"), reason };
        let geom = f.get("geometry").ok_or_else(|| bad("missing geometry".into()))?;
        let coords = geom.get("coordinates").ok_or_else(|| bad("missing coordinates".into()))?;
        let geometry = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => Geometry::Polygon(parse_polygon(coords).map_err(bad)?),
            Some("MultiPolygon") => {
                let parts = coords.as_array().ok_or_else(|| bad("MultiPolygon coordinates must be an array".into()))?;
                let polys = parts.iter().map(parse_polygon).collect::<std::result::Result<Vec<_>, _>>().map_err(bad)?;
                if polys.is_empty() {
                    return Err(bad("empty MultiPolygon".into()));
                }
                Geometry::MultiPolygon(polys)
            }
            other => return Err(bad(format!("unsupported geometry type {other:?}"))),
        };
        let props = f.get("properties").and_then(Value::as_object);
        let id = props
            .and_then(|p| p.get("id"))
            .and_then(Value::as_i64)
            .ok_or_else(|| Error::Format(format!("feature {i}: missing integer 'id' property")))?;
        let id = i32::try_from(id).map_err(|_| Error::Format(format!("feature {i}: id {id} out of range")))?;
        if !ids.insert(id) {
            return Err(Error::DuplicateParcel(id));
        }
        let crop_declared = props
            .and_then(|p| p.get("crop_declared"))
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Format(format!("feature {i}: missing 'crop_declared'")))?
            .to_string();
        let crop_predicted = props.and_then(|p| p.get("crop_predicted")).and_then(Value::as_str).map(String::from);
        let mut attributes = BTreeMap::new();
        if let Some(p) = props {
            for (k, v) in p {
                if matches!(k.as_str(), "id" | "crop_declared" | "crop_predicted") {
                    continue;
                }
                if v.is_object() || v.is_array() {
                    return Err(Error::Format(format!("feature {i}: attribute '{k}' is not a scalar")));
                }
                attributes.insert(k.clone(), v.clone());
            }
        }
        let parcel = Parcel { id, geometry, crop_declared, crop_predicted, attributes };
        parcel.validate().map_err(|e| match e {
            Error::InvalidGeometry { reason, .. } => bad(reason),
            other => other,
        })?;
        out.push(parcel);
    }
    Ok(out)
}

pub fn load_parcels(path: &Path) -> Result<Vec<Parcel>> {
    parse_parcels(&fs::read_to_string(path)?)
}

fn polygon_json(p: &Polygon) -> Value {
    Value::Array(p.rings().map(|r| json!(r)).collect())
}

pub fn parcels_to_json(parcels: &[Parcel]) -> Value {
    let features: Vec<Value> = parcels
        .iter()
        .map(|p| {
            let geometry = match &p.geometry {
                Geometry::Polygon(poly) => json!({"type": "Polygon", "coordinates": polygon_json(poly)}),
                Geometry::MultiPolygon(ps) => json!({
                    "type": "MultiPolygon",
                    "coordinates": ps.iter().map(polygon_json).collect::<Vec<_>>()
                }),
            };
            let mut props = serde_json::Map::new();
            props.insert("id".into(), json!(p.id));
            props.insert("crop_declared".into(), json!(p.crop_declared));
            if let Some(c) = &p.crop_predicted {
                props.insert("crop_predicted".into(), json!(c));
            }
            for (k, v) in &p.attributes {
                props.insert(k.clone(), v.clone());
            }
            json!({"type": "Feature", "geometry": geometry, "properties": props})
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

pub fn write_parcels(path: &Path, parcels: &[Parcel]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&parcels_to_json(parcels))?)?;
    Ok(())
}
