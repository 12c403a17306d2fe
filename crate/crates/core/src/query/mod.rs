// SPDX-License-Identifier: Apache-2.0

//! Parcel queries: conjunctive predicates over knowledge-base attributes,
//! with statistics computed from the cube when the store lacks them.

mod animate;
mod kb;
pub mod scenario;

pub use animate::{animate, AnimationSpec, AnimationStep, AnimationTarget, Frame, FrameSet, COLORMAP};
pub use kb::{AttrValue, KbRecord, KbRow, KnowledgeBase, RunInfo, UpsertReport, ATTR_CROP_DECLARED, ATTR_CROP_PREDICTED, ATTR_MOWING_PREFIX};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BBox, BandId, CubeArray, Selection};
use crate::parcels::{LabelRaster, Parcel};
use crate::time::{Day, Period};
use crate::zonal::{zonal_stats_grouped, StatRequest, Statistic};

/// Average of the yearly `mowing_events:<year>` counts.
pub const ATTR_MOWING_PER_YEAR: &str = "mowing_events_per_year";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    const TOKENS: [(&'static str, CmpOp); 10] = [
        ("!=", CmpOp::Ne),
        ("≠", CmpOp::Ne),
        ("<=", CmpOp::Le),
        ("≤", CmpOp::Le),
        (">=", CmpOp::Ge),
        ("≥", CmpOp::Ge),
        ("==", CmpOp::Eq),
        ("=", CmpOp::Eq),
        ("<", CmpOp::Lt),
        (">", CmpOp::Gt),
    ];

    fn holds(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

/// Right-hand side of a comparison. A bare word names an attribute when one
/// of that name exists, otherwise it is a text literal; quoted words are
/// always literals.
#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Number(f64),
    Quoted(String),
    Word(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub field: String,
    pub op: CmpOp,
    pub rhs: Operand,
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rhs = match &self.rhs {
            Operand::Number(v) => v.to_string(),
            Operand::Quoted(s) => format!("'{s}'"),
            Operand::Word(s) => s.clone(),
        };
        write!(f, "{} {} {}", self.field, self.op.symbol(), rhs)
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_alphanumeric() || matches!(c, '_' | ':' | '-' | '.'))
}

impl FromStr for Predicate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Predicate> {
        let bad = |m: &str| Error::InvalidArgument(format!("predicate '{s}': {m}"));
        let (pos, tok, op) = s
            .char_indices()
            .find_map(|(i, _)| CmpOp::TOKENS.iter().find(|(t, _)| s[i..].starts_with(t)).map(|&(t, op)| (i, t, op)))
            .ok_or_else(|| bad("no comparison operator"))?;
        let field = s[..pos].trim();
        let rhs = s[pos + tok.len()..].trim();
        if !is_ident(field) {
            return Err(bad("left side must be an attribute name"));
        }
        let rhs = if let Some(q) = rhs.strip_prefix('\'').and_then(|r| r.strip_suffix('\'')).or_else(|| rhs.strip_prefix('"').and_then(|r| r.strip_suffix('"'))) {
            Operand::Quoted(q.to_string())
        } else if let Ok(v) = rhs.parse::<f64>() {
            Operand::Number(v)
        } else if is_ident(rhs) {
            Operand::Word(rhs.to_string())
        } else {
            return Err(bad("right side must be a number, a word or a quoted string"));
        };
        Ok(Predicate { field: field.to_string(), op, rhs })
    }
}

/// Split `a AND b && c` into predicates.
pub fn parse_predicates(text: &str) -> Result<Vec<Predicate>> {
    let mut out = Vec::new();
    let mut rest = text.trim();
    if rest.is_empty() {
        return Ok(out);
    }
    loop {
        let upper = rest.to_ascii_uppercase();
        let cut = [upper.find(" AND "), rest.find("&&")].into_iter().flatten().min();
        match cut {
            Some(i) => {
                out.push(rest[..i].trim().parse()?);
                let skip = if rest[i..].starts_with("&&") { 2 } else { 5 };
                rest = rest[i + skip..].trim();
            }
            None => {
                out.push(rest.parse()?);
                return Ok(out);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    #[default]
    All,
    Bbox(BBox),
    Parcels(Vec<i32>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySpec {
    pub region: Region,
    /// Inclusive date range used for on-demand statistics and yearly counts.
    pub time_window: Option<(Day, Day)>,
    /// Conjunction, e.g. `crop_declared = maize AND NDVI_mean < 0.4`.
    #[serde(rename = "where")]
    pub predicate: String,
    /// Scene cloud-cover limit for on-demand statistics.
    pub max_cloud_cover: Option<f64>,
    /// Extra attributes reported per parcel.
    pub select: Vec<String>,
}

/// Cube and label raster used to compute missing statistics.
#[derive(Debug, Clone, Copy)]
pub struct QueryContext<'a> {
    pub cube: &'a CubeArray,
    pub labels: &'a LabelRaster,
    pub buffer_inward_m: f64,
    pub cloud_buffer_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub parcel_ids: Vec<i32>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<AttrValue>>>,
}

impl QueryResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("parcel_id");
        for c in &self.columns {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (id, row) in self.parcel_ids.iter().zip(&self.rows) {
            let _ = write!(s, "{id}");
            for v in row {
                let _ = write!(s, ",{}", v.as_ref().map(|v| v.to_string()).unwrap_or_default());
            }
            s.push('\n');
        }
        s
    }
}

/// `<BAND>_<statistic>`, e.g. `NDVI_mean` or `SIGMA0_VV_max`.
fn computable(attr: &str) -> Option<(BandId, Statistic)> {
    Statistic::ALL.into_iter().find_map(|st| {
        let band = attr.strip_suffix(st.name())?.strip_suffix('_')?;
        Some((band.parse().ok()?, st))
    })
}

/// Attribute lookup with the virtual yearly-mowing average.
fn lookup(kb: &KnowledgeBase, id: i32, attr: &str, window: Option<(Day, Day)>) -> Option<AttrValue> {
    if attr == ATTR_MOWING_PER_YEAR {
        let years: Vec<f64> = kb
            .row(id)
            .into_iter()
            .filter_map(|(k, v)| {
                let year: i32 = k.strip_prefix(ATTR_MOWING_PREFIX)?.parse().ok()?;
                let inside = window.is_none_or(|(a, b)| year >= a.year() && year <= b.year());
                inside.then(|| v.as_f64()).flatten()
            })
            .collect();
        return (!years.is_empty()).then(|| AttrValue::Number(years.iter().sum::<f64>() / years.len() as f64));
    }
    kb.value(id, attr).cloned()
}

fn compare(a: &AttrValue, b: &AttrValue) -> Option<Ordering> {
    match (a, b) {
        (AttrValue::Number(x), AttrValue::Number(y)) => x.partial_cmp(y),
        (AttrValue::Text(x), AttrValue::Text(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

enum Rhs {
    Value(AttrValue),
    Field(String),
}

fn known_attribute(kb: &KnowledgeBase, attr: &str) -> bool {
    attr == ATTR_MOWING_PER_YEAR || kb.attributes().contains(attr)
}

/// Bands needed to compute the `<BAND>_<stat>` attributes that `spec`
/// references and the store lacks.
pub fn bands_to_compute(kb: &KnowledgeBase, spec: &QuerySpec) -> Result<Vec<BandId>> {
    let mut names: Vec<String> = spec.select.clone();
    for p in parse_predicates(&spec.predicate)? {
        names.push(p.field);
        if let Operand::Word(w) = p.rhs {
            names.push(w);
        }
    }
    let mut bands: Vec<BandId> = names.iter().filter(|n| !known_attribute(kb, n)).filter_map(|n| computable(n)).map(|(b, _)| b).collect();
    bands.sort();
    bands.dedup();
    Ok(bands)
}

/// Evaluate `spec` over `parcels`. Statistics named `<BAND>_<stat>` that the
/// store lacks are computed from `ctx` over the time window and written back
/// under `run`. Results are sorted by parcel id.
pub fn run_query(kb: &mut KnowledgeBase, parcels: &[Parcel], spec: &QuerySpec, ctx: Option<&QueryContext<'_>>, run: &RunInfo) -> Result<QueryResult> {
    let preds = parse_predicates(&spec.predicate)?;
    let mut region: Vec<&Parcel> = match &spec.region {
        Region::All => parcels.iter().collect(),
        Region::Bbox(bb) => parcels.iter().filter(|p| p.geometry.bbox().intersects(bb)).collect(),
        Region::Parcels(ids) => {
            let want: BTreeSet<i32> = ids.iter().copied().collect();
            parcels.iter().filter(|p| want.contains(&p.id)).collect()
        }
    };
    region.sort_by_key(|p| p.id);
    region.dedup_by_key(|p| p.id);
    if region.is_empty() {
        return Err(Error::InvalidArgument("query region contains no parcels".into()));
    }

    let mut referenced: Vec<String> = Vec::new();
    for p in &preds {
        referenced.push(p.field.clone());
        if let Operand::Word(w) = &p.rhs {
            if known_attribute(kb, w) || computable(w).is_some() {
                referenced.push(w.clone());
            }
        }
    }
    referenced.extend(spec.select.iter().cloned());
    let mut missing: Vec<(BandId, Statistic, String)> = Vec::new();
    for attr in &referenced {
        if known_attribute(kb, attr) || missing.iter().any(|m| &m.2 == attr) {
            continue;
        }
        match (computable(attr), ctx) {
            (Some((b, s)), Some(_)) => missing.push((b, s, attr.clone())),
            _ => return Err(Error::UnknownAttribute(attr.clone())),
        }
    }
    if let Some(ctx) = ctx.filter(|_| !missing.is_empty()) {
        compute_statistics(kb, ctx, spec, &missing, run)?;
    }

    let rhs: Vec<Rhs> = preds
        .iter()
        .map(|p| match &p.rhs {
            Operand::Number(v) => Rhs::Value(AttrValue::Number(*v)),
            Operand::Quoted(s) => Rhs::Value(AttrValue::Text(s.clone())),
            Operand::Word(w) if known_attribute(kb, w) => Rhs::Field(w.clone()),
            Operand::Word(w) => Rhs::Value(AttrValue::Text(w.clone())),
        })
        .collect();
    let kb_ref = &*kb;
    let hits: Vec<i32> = region
        .par_iter()
        .filter(|p| {
            preds.iter().zip(&rhs).all(|(pred, r)| {
                let Some(lhs) = lookup(kb_ref, p.id, &pred.field, spec.time_window) else { return false };
                let rv = match r {
                    Rhs::Value(v) => v.clone(),
                    Rhs::Field(f) => match lookup(kb_ref, p.id, f, spec.time_window) {
                        Some(v) => v,
                        None => return false,
                    },
                };
                compare(&lhs, &rv).is_some_and(|o| pred.op.holds(o))
            })
        })
        .map(|p| p.id)
        .collect();

    let mut columns: Vec<String> = Vec::new();
    for c in referenced {
        if !columns.contains(&c) {
            columns.push(c);
        }
    }
    let rows = hits.iter().map(|&id| columns.iter().map(|c| lookup(kb, id, c, spec.time_window)).collect()).collect();
    Ok(QueryResult { parcel_ids: hits, columns, rows })
}

fn compute_statistics(kb: &mut KnowledgeBase, ctx: &QueryContext<'_>, spec: &QuerySpec, wanted: &[(BandId, Statistic, String)], run: &RunInfo) -> Result<()> {
    let sel = Selection { time_range: spec.time_window.map(|(a, b)| (a, b.plus(1))), ..Default::default() };
    let cube = ctx.cube.select(&sel);
    let mut by_band: BTreeMap<BandId, Vec<Statistic>> = BTreeMap::new();
    for (b, s, _) in wanted {
        by_band.entry(*b).or_default().push(*s);
    }
    let mut rows = Vec::new();
    for (band, stats) in by_band {
        let req = StatRequest {
            statistics: stats,
            period: Period::WholeRange,
            bands: vec![band],
            buffer_inward_m: ctx.buffer_inward_m,
            cloud_buffer_m: ctx.cloud_buffer_m,
            max_cloud_cover_fraction: spec.max_cloud_cover.unwrap_or(1.0),
            ..Default::default()
        };
        let table = zonal_stats_grouped(&cube, ctx.labels, &req)?;
        for rec in table.records {
            if let Some(v) = rec.value {
                rows.push(KbRow::new(rec.parcel_id, format!("{}_{}", rec.band, rec.statistic), v));
            }
        }
    }
    kb.update(&rows, run)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parcels::Polygon;
    use proptest::prelude::*;

    #[test]
    fn parse_forms() {
        let p = parse_predicates("crop_declared = maize AND crop_predicted ≠ 'maize' && NDVI_mean<0.4").unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[1].op, CmpOp::Ne);
        assert_eq!(p[1].rhs, Operand::Quoted("maize".into()));
        assert_eq!(p[2].rhs, Operand::Number(0.4));
        assert_eq!(p[2].to_string(), "NDVI_mean < 0.4");
        assert_eq!("a >= 2".parse::<Predicate>().unwrap().op, CmpOp::Ge);
        assert_eq!("a ≤ 2".parse::<Predicate>().unwrap().op, CmpOp::Le);
        assert!("no operator".parse::<Predicate>().is_err());
        assert!(" = 3".parse::<Predicate>().is_err());
        assert!(parse_predicates("").unwrap().is_empty());
    }

    #[test]
    fn computable_names() {
        assert_eq!(computable("NDVI_mean"), Some((BandId::NDVI, Statistic::Mean)));
        assert_eq!(computable("SIGMA0_VV_max"), Some((BandId::SIGMA0_VV, Statistic::Max)));
        assert_eq!(computable("NDVI_valid_fraction"), Some((BandId::NDVI, Statistic::ValidFraction)));
        assert_eq!(computable("crop_declared"), None);
    }

    fn setup(n: i32) -> (KnowledgeBase, Vec<Parcel>) {
        let crops = ["maize", "wheat", "grassland"];
        let parcels: Vec<Parcel> = (1..=n)
            .map(|i| {
                let x = (i % 10) as f64 * 100.0;
                let y = (i / 10) as f64 * 100.0;
                Parcel::new(i, Polygon::rect(x, y, x + 90.0, y + 90.0).unwrap(), crops[(i % 3) as usize]).unwrap()
            })
            .collect();
        let mut kb = KnowledgeBase::in_memory();
        let run = RunInfo::new("r", "test");
        kb.register_parcels(&parcels, &run).unwrap();
        let mut rows = Vec::new();
        for p in &parcels {
            let pred = if p.id % 7 == 0 { "wheat" } else { p.crop_declared.as_str() };
            rows.push(KbRow::new(p.id, ATTR_CROP_PREDICTED, pred));
            rows.push(KbRow::new(p.id, "NDVI_mean", (p.id % 10) as f64 / 10.0));
            rows.push(KbRow::new(p.id, "mowing_events:2020", (p.id % 3) as f64));
            rows.push(KbRow::new(p.id, "mowing_events:2021", (p.id % 2) as f64));
        }
        kb.update(&rows, &run).unwrap();
        (kb, parcels)
    }

    fn q(kb: &mut KnowledgeBase, parcels: &[Parcel], text: &str) -> Result<Vec<i32>> {
        let spec = QuerySpec { predicate: text.into(), ..Default::default() };
        run_query(kb, parcels, &spec, None, &RunInfo::new("q", "query")).map(|r| r.parcel_ids)
    }

    #[test]
    fn mismatch_query_and_tautology() {
        let (mut kb, parcels) = setup(30);
        let ids = q(&mut kb, &parcels, "crop_declared = maize AND crop_predicted != maize").unwrap();
        assert_eq!(ids, vec![21]);
        assert_eq!(q(&mut kb, &parcels, "crop_declared != crop_predicted").unwrap(), vec![14, 21]);
        assert_eq!(q(&mut kb, &parcels, "").unwrap().len(), 30);
        assert_eq!(q(&mut kb, &parcels, "NDVI_mean >= 0").unwrap().len(), 30);
        assert!(matches!(q(&mut kb, &parcels, "bogus < 1"), Err(Error::UnknownAttribute(_))));
        assert!(matches!(q(&mut kb, &parcels, "NDVI_max < 1"), Err(Error::UnknownAttribute(_))));
        let empty = QuerySpec { region: Region::Parcels(vec![999]), ..Default::default() };
        assert!(run_query(&mut kb, &parcels, &empty, None, &RunInfo::new("q", "query")).is_err());
    }

    #[test]
    fn regions_and_output_columns() {
        let (mut kb, parcels) = setup(30);
        let spec = QuerySpec {
            region: Region::Bbox(BBox::new(0.0, 0.0, 250.0, 50.0)),
            predicate: "NDVI_mean < 0.25".into(),
            select: vec!["crop_declared".into()],
            ..Default::default()
        };
        let r = run_query(&mut kb, &parcels, &spec, None, &RunInfo::new("q", "query")).unwrap();
        assert_eq!(r.parcel_ids, vec![1, 2]);
        assert_eq!(r.columns, vec!["NDVI_mean", "crop_declared"]);
        assert_eq!(r.to_csv(), "parcel_id,NDVI_mean,crop_declared\n1,0.1,wheat\n2,0.2,grassland\n");
    }

    #[test]
    fn mowing_average_respects_window() {
        let (mut kb, parcels) = setup(12);
        let all = q(&mut kb, &parcels, "mowing_events_per_year < 1").unwrap();
        let oracle: Vec<i32> = (1..=12).filter(|i| ((i % 3) + (i % 2)) as f64 / 2.0 < 1.0).collect();
        assert_eq!(all, oracle);
        let spec = QuerySpec {
            predicate: "mowing_events_per_year < 1".into(),
            time_window: Some((Day::from_ymd(2021, 1, 1).unwrap(), Day::from_ymd(2021, 12, 31).unwrap())),
            ..Default::default()
        };
        let r = run_query(&mut kb, &parcels, &spec, None, &RunInfo::new("q", "query")).unwrap();
        assert_eq!(r.parcel_ids, (1..=12).filter(|i| i % 2 == 0).collect::<Vec<_>>());
    }

    #[test]
    fn on_demand_statistics_are_recorded() {
        use crate::grid::GridSpec;
        let g = GridSpec::new(0.0, 0.0, 10.0, 20, 10, "EPSG:32634").unwrap();
        let parcels = vec![
            Parcel::new(1, Polygon::rect(0.0, 0.0, 100.0, 100.0).unwrap(), "maize").unwrap(),
            Parcel::new(2, Polygon::rect(100.0, 0.0, 200.0, 100.0).unwrap(), "maize").unwrap(),
        ];
        let labels = crate::parcels::rasterize_parcels(&parcels, &g).unwrap().labels;
        let mut cube = CubeArray::empty(g, vec![Day(10), Day(20)], vec![BandId::NDVI]);
        cube.valid.fill(true);
        for x in 0..20 {
            cube.values.slice_mut(ndarray::s![.., 0, .., x]).fill(if x < 10 { 0.3 } else { 0.7 });
        }
        let mut kb = KnowledgeBase::in_memory();
        kb.register_parcels(&parcels, &RunInfo::new("r", "lpis")).unwrap();
        let ctx = QueryContext { cube: &cube, labels: &labels, buffer_inward_m: 0.0, cloud_buffer_m: 0.0 };
        let spec = QuerySpec { predicate: "NDVI_mean < 0.4".into(), ..Default::default() };
        let r = run_query(&mut kb, &parcels, &spec, Some(&ctx), &RunInfo::new("q1", "query")).unwrap();
        assert_eq!(r.parcel_ids, vec![1]);
        let rec = kb.get(2, "NDVI_mean").unwrap();
        assert_eq!(rec.run_id, "q1");
        assert!((rec.value.as_f64().unwrap() - 0.7).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn matches_linear_scan(seed in 0u64..1000, thr in 0.0f64..1.0, crop in prop::sample::select(vec!["maize", "wheat", "grassland"])) {
            let (mut kb, parcels) = setup(40 + (seed % 20) as i32);
            let text = format!("crop_declared = {crop} AND NDVI_mean <= {thr} AND mowing_events_per_year >= 0.5");
            let got = q(&mut kb, &parcels, &text).unwrap();
            let oracle: Vec<i32> = parcels
                .iter()
                .filter(|p| {
                    let row = kb.row(p.id);
                    let m = (row["mowing_events:2020"].as_f64().unwrap() + row["mowing_events:2021"].as_f64().unwrap()) / 2.0;
                    row["crop_declared"] == &AttrValue::from(crop) && row["NDVI_mean"].as_f64().unwrap() <= thr && m >= 0.5
                })
                .map(|p| p.id)
                .collect();
            prop_assert_eq!(got, oracle);
        }
    }
}
