//! Combine-harvester yield points: cleaning and rasterization onto the field grid.
//!
//! Cleaning applies the rules below in order; the first rule that matches a
//! point claims it, so the per-rule counts in [`CleanReport`] are disjoint.
//!
//! 1. non-finite or out-of-extent position, unparsable timestamp, non-finite
//!    yield or moisture
//! 2. harvester not activated
//! 3. yield ≤ 0
//! 4. yield outside the crop's feasibility bounds, moisture outside bounds
//! 5. |yield − mean| > 3σ, with mean and population σ computed once over the
//!    survivors of rule 4

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GeoGrid;
use crate::raster::Raster;

pub const YIELD_BAND: &str = "yield_t_ha";

#[derive(Debug, Clone, PartialEq)]
pub struct YieldPointRecord {
    pub field_id: String,
    pub farm_id: String,
    pub crop: String,
    pub x: f64,
    pub y: f64,
    /// `None` when the source timestamp could not be parsed.
    pub timestamp: Option<NaiveDateTime>,
    pub yield_t_ha: f64,
    pub moisture_pct: f64,
    pub harvester_active: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub input: usize,
    pub invalid_position: usize,
    pub invalid_timestamp: usize,
    pub invalid_yield_moisture: usize,
    pub inactive_harvester: usize,
    pub zero_yield: usize,
    pub infeasible_yield: usize,
    pub outlier_3sigma: usize,
    pub retained: usize,
}

impl CleanReport {
    pub fn removed(&self) -> usize {
        self.invalid_position
            + self.invalid_timestamp
            + self.invalid_yield_moisture
            + self.inactive_harvester
            + self.zero_yield
            + self.infeasible_yield
            + self.outlier_3sigma
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanRules {
    /// crop → (min, max) feasible yield in t/ha.
    pub crop_bounds: BTreeMap<String, (f64, f64)>,
    /// (min, max) grain moisture in percent.
    pub moisture_bounds: (f64, f64),
    /// Points outside this grid count as invalid positions.
    #[serde(default)]
    pub extent: Option<GeoGrid>,
}

impl Default for CleanRules {
    fn default() -> Self {
        let crop_bounds = ["wheat", "rapeseed", "soybean"]
            .iter()
            .map(|c| (c.to_string(), (0.5, 20.0)))
            .collect();
        CleanRules {
            crop_bounds,
            moisture_bounds: (5.0, 40.0),
            extent: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellAggregation {
    #[default]
    Mean,
    Median,
}

enum Verdict {
    Keep,
    Position,
    Timestamp,
    Value,
    Inactive,
    Zero,
    Infeasible,
}

fn classify(p: &YieldPointRecord, rules: &CleanRules, bounds: (f64, f64)) -> Verdict {
    let in_extent = match &rules.extent {
        Some(g) => g.world_to_cell(p.x, p.y).is_some(),
        None => true,
    };
    if !(p.x.is_finite() && p.y.is_finite()) || !in_extent {
        return Verdict::Position;
    }
    if p.timestamp.is_none() {
        return Verdict::Timestamp;
    }
    if !(p.yield_t_ha.is_finite() && p.moisture_pct.is_finite()) {
        return Verdict::Value;
    }
    if !p.harvester_active {
        return Verdict::Inactive;
    }
    if p.yield_t_ha <= 0.0 {
        return Verdict::Zero;
    }
    if p.yield_t_ha < bounds.0 || p.yield_t_ha > bounds.1 {
        return Verdict::Infeasible;
    }
    let (mlo, mhi) = rules.moisture_bounds;
    if p.moisture_pct < mlo || p.moisture_pct > mhi {
        return Verdict::Value;
    }
    Verdict::Keep
}

/// Cleans the points of a single field.
pub fn clean_yield_points(
    points: &[YieldPointRecord],
    rules: &CleanRules,
) -> Result<(Vec<YieldPointRecord>, CleanReport)> {
    let mut report = CleanReport {
        input: points.len(),
        ..CleanReport::default()
    };
    let Some(first) = points.first() else {
        return Ok((Vec::new(), report));
    };
    if let Some(p) = points.iter().find(|p| p.field_id != first.field_id) {
        return Err(Error::Ingest(format!(
            "points from several fields passed to one cleaning call ('{}' and '{}')",
            first.field_id, p.field_id
        )));
    }

    let mut kept: Vec<&YieldPointRecord> = Vec::with_capacity(points.len());
    for p in points {
        let bounds = *rules
            .crop_bounds
            .get(&p.crop)
            .ok_or_else(|| Error::UnknownCrop(p.crop.clone()))?;
        match classify(p, rules, bounds) {
            Verdict::Keep => kept.push(p),
            Verdict::Position => report.invalid_position += 1,
            Verdict::Timestamp => report.invalid_timestamp += 1,
            Verdict::Value => report.invalid_yield_moisture += 1,
            Verdict::Inactive => report.inactive_harvester += 1,
            Verdict::Zero => report.zero_yield += 1,
            Verdict::Infeasible => report.infeasible_yield += 1,
        }
    }

    let (mean, sd) = mean_sd(kept.iter().map(|p| p.yield_t_ha));
    let limit = 3.0 * sd;
    let out: Vec<YieldPointRecord> = kept
        .into_iter()
        .filter(|p| {
            let keep = (p.yield_t_ha - mean).abs() <= limit;
            if !keep {
                report.outlier_3sigma += 1;
            }
            keep
        })
        .cloned()
        .collect();
    report.retained = out.len();
    Ok((out, report))
}

/// Population mean and standard deviation, accumulated in input order.
fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Groups points by field (first-appearance order preserved within a field)
/// and cleans every field independently.
pub fn clean_by_field(
    points: &[YieldPointRecord],
    rules: &CleanRules,
) -> Result<BTreeMap<String, (Vec<YieldPointRecord>, CleanReport)>> {
    let mut groups: BTreeMap<String, Vec<YieldPointRecord>> = BTreeMap::new();
    for p in points {
        groups.entry(p.field_id.clone()).or_default().push(p.clone());
    }
    let cleaned: Vec<_> = groups
        .into_par_iter()
        .map(|(id, pts)| clean_yield_points(&pts, rules).map(|r| (id, r)))
        .collect::<Result<_>>()?;
    Ok(cleaned.into_iter().collect())
}

/// Single-band raster whose populated cells are strictly positive yields.
#[derive(Debug, Clone, PartialEq)]
pub struct YieldRaster(Raster);

impl YieldRaster {
    pub fn raster(&self) -> &Raster {
        &self.0
    }
    pub fn into_raster(self) -> Raster {
        self.0
    }
    pub fn grid(&self) -> &GeoGrid {
        self.0.grid()
    }
    /// Target at a linear cell index, `None` where no points landed.
    pub fn at(&self, idx: usize) -> Option<f32> {
        self.0.at(0, idx)
    }
}

impl TryFrom<Raster> for YieldRaster {
    type Error = Error;

    fn try_from(r: Raster) -> Result<Self> {
        if r.n_bands() != 1 {
            return Err(Error::Ingest(format!(
                "yield raster must have one band, got {}",
                r.n_bands()
            )));
        }
        if let Some(v) = (0..r.grid().len()).filter_map(|i| r.at(0, i)).find(|v| *v <= 0.0) {
            return Err(Error::Ingest(format!("yield raster holds non-positive value {v}")));
        }
        Ok(YieldRaster(r))
    }
}

/// Aggregates cleaned points per cell. Points outside the grid are ignored.
pub fn rasterize_yield(
    points: &[YieldPointRecord],
    grid: &GeoGrid,
    agg: CellAggregation,
) -> Result<YieldRaster> {
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    for p in points {
        if let Some((c, r)) = grid.world_to_cell(p.x, p.y) {
            cells[grid.index(c, r)].push(p.yield_t_ha);
        }
    }
    let values: Vec<Option<f32>> = cells
        .into_iter()
        .map(|mut v| {
            if v.is_empty() {
                return None;
            }
            let out = match agg {
                CellAggregation::Mean => v.iter().sum::<f64>() / v.len() as f64,
                CellAggregation::Median => {
                    v.sort_by(f64::total_cmp);
                    let m = v.len() / 2;
                    if v.len() % 2 == 1 {
                        v[m]
                    } else {
                        0.5 * (v[m - 1] + v[m])
                    }
                }
            };
            Some(out as f32)
        })
        .collect();
    let raster = Raster::from_fn(grid.clone(), vec![YIELD_BAND.into()], |_, c, r| {
        values[grid.index(c, r)]
    })?;
    YieldRaster::try_from(raster)
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    field_id: String,
    farm_id: String,
    crop: String,
    x: String,
    y: String,
    timestamp: String,
    yield_t_ha: String,
    moisture_pct: String,
    harvester_active: String,
}

pub const YIELD_CSV_HEADER: [&str; 9] = [
    "field_id",
    "farm_id",
    "crop",
    "x",
    "y",
    "timestamp",
    "yield_t_ha",
    "moisture_pct",
    "harvester_active",
];

/// ISO-8601 with or without an offset; offsets are dropped after conversion to UTC.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn parse_num(s: &str) -> f64 {
    s.trim().parse().unwrap_or(f64::NAN)
}

/// Reads the canonical yield CSV. Unparsable numbers become NaN and
/// unparsable timestamps `None`, so cleaning can account for them.
pub fn read_yield_csv(reader: impl Read) -> Result<Vec<YieldPointRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != YIELD_CSV_HEADER {
        return Err(Error::Ingest(format!(
            "unexpected yield CSV header: {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = row?;
        let harvester_active = match row.harvester_active.trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(Error::Ingest(format!(
                    "row {}: harvester_active must be 0 or 1, got '{other}'",
                    line + 2
                )))
            }
        };
        out.push(YieldPointRecord {
            x: parse_num(&row.x),
            y: parse_num(&row.y),
            timestamp: parse_timestamp(&row.timestamp),
            yield_t_ha: parse_num(&row.yield_t_ha),
            moisture_pct: parse_num(&row.moisture_pct),
            harvester_active,
            field_id: row.field_id,
            farm_id: row.farm_id,
            crop: row.crop,
        });
    }
    Ok(out)
}

pub fn read_yield_csv_file(path: impl AsRef<Path>) -> Result<Vec<YieldPointRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_yield_csv(std::io::BufReader::new(f))
}

pub fn write_yield_csv(w: impl std::io::Write, points: &[YieldPointRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(YIELD_CSV_HEADER)?;
    for p in points {
        let ts = p
            .timestamp
            .map(|t| t.format("%Y-%m-%dT%H:%M:%S").to_string())
            .unwrap_or_else(|| "invalid".into());
        wtr.write_record([
            p.field_id.as_str(),
            p.farm_id.as_str(),
            p.crop.as_str(),
            &p.x.to_string(),
            &p.y.to_string(),
            &ts,
            &p.yield_t_ha.to_string(),
            &p.moisture_pct.to_string(),
            if p.harvester_active { "1" } else { "0" },
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<yield csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(x: f64, y: f64, yld: f64) -> YieldPointRecord {
        YieldPointRecord {
            field_id: "f".into(),
            farm_id: "farm".into(),
            crop: "wheat".into(),
            x,
            y,
            timestamp: parse_timestamp("2021-07-15T10:00:00"),
            yield_t_ha: yld,
            moisture_pct: 14.0,
            harvester_active: true,
        }
    }

    fn wide_rules() -> CleanRules {
        let mut r = CleanRules::default();
        r.crop_bounds.insert("wheat".into(), (0.0, 100.0));
        r
    }

    #[test]
    fn zero_yield_removed() {
        let mut pts: Vec<_> = (0..5).map(|i| pt(i as f64, 0.0, 5.0)).collect();
        pts[2].yield_t_ha = 0.0;
        let (out, rep) = clean_yield_points(&pts, &CleanRules::default()).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(rep.zero_yield, 1);
        assert_eq!(rep.removed() + rep.retained, rep.input);
    }

    #[test]
    fn three_sigma_outlier_removed() {
        // mean 9.0909, population sd 12.935, 3 sd = 38.80 < |50 - 9.09| = 40.91
        let mut pts: Vec<_> = (0..10).map(|i| pt(i as f64, 0.0, 5.0)).collect();
        pts.push(pt(10.0, 0.0, 50.0));
        let (out, rep) = clean_yield_points(&pts, &wide_rules()).unwrap();
        assert_eq!(rep.outlier_3sigma, 1);
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|p| p.yield_t_ha == 5.0));
    }

    #[test]
    fn three_sigma_is_a_single_pass() {
        // 100 x 5.0, 6.0, 50.0: the first pass only sees 50.0 as extreme;
        // once it is gone sigma collapses and 6.0 would go on a second pass
        let mut pts: Vec<_> = (0..100).map(|i| pt(i as f64, 0.0, 5.0)).collect();
        pts.push(pt(100.0, 0.0, 6.0));
        pts.push(pt(101.0, 0.0, 50.0));
        let (out, rep) = clean_yield_points(&pts, &wide_rules()).unwrap();
        assert_eq!(rep.outlier_3sigma, 1);
        assert!(out.iter().any(|p| p.yield_t_ha == 6.0));
        let (_, again) = clean_yield_points(&out, &wide_rules()).unwrap();
        assert_eq!(again.outlier_3sigma, 1);
    }

    #[test]
    fn rule_order_claims_inactive_before_zero() {
        let mut p = pt(0.0, 0.0, 0.0);
        p.harvester_active = false;
        let (_, rep) = clean_yield_points(&[p], &CleanRules::default()).unwrap();
        assert_eq!(rep.inactive_harvester, 1);
        assert_eq!(rep.zero_yield, 0);
    }

    #[test]
    fn each_rule_counts() {
        let grid = GeoGrid::new("t", 0.0, 0.0, 10.0, 10, 10).unwrap();
        let rules = CleanRules {
            extent: Some(grid),
            ..CleanRules::default()
        };
        let mut pts = vec![pt(5.0, 5.0, 6.0); 8];
        pts[0].x = f64::NAN;
        pts[1].x = 500.0;
        pts[2].timestamp = None;
        pts[3].moisture_pct = f64::NAN;
        pts[4].yield_t_ha = 25.0;
        pts[5].moisture_pct = 60.0;
        pts[6].yield_t_ha = -1.0;
        let (out, rep) = clean_yield_points(&pts, &rules).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(rep.invalid_position, 2);
        assert_eq!(rep.invalid_timestamp, 1);
        assert_eq!(rep.invalid_yield_moisture, 2);
        assert_eq!(rep.infeasible_yield, 1);
        assert_eq!(rep.zero_yield, 1);
        assert_eq!(rep.retained, 1);
    }

    #[test]
    fn empty_and_unknown_crop() {
        let (out, rep) = clean_yield_points(&[], &CleanRules::default()).unwrap();
        assert!(out.is_empty());
        assert_eq!(rep, CleanReport::default());
        let mut p = pt(0.0, 0.0, 5.0);
        p.crop = "quinoa".into();
        assert!(matches!(
            clean_yield_points(&[p], &CleanRules::default()),
            Err(Error::UnknownCrop(c)) if c == "quinoa"
        ));
    }

    #[test]
    fn mixed_fields_rejected() {
        let mut b = pt(0.0, 0.0, 5.0);
        b.field_id = "g".into();
        assert!(clean_yield_points(&[pt(0.0, 0.0, 5.0), b], &CleanRules::default()).is_err());
    }

    #[test]
    fn rasterize_means_and_nodata() {
        let grid = GeoGrid::new("t", 0.0, 0.0, 10.0, 2, 2).unwrap();
        let pts = [pt(1.0, 11.0, 4.0), pt(9.0, 19.0, 6.0), pt(10.0, 0.0, 3.0)];
        let r = rasterize_yield(&pts, &grid, CellAggregation::Mean).unwrap();
        assert_eq!(r.raster().get(0, 0, 0), Some(5.0));
        // SW corner of cell (1, 1) lands in exactly that cell
        assert_eq!(r.raster().get(0, 1, 1), Some(3.0));
        assert_eq!(r.raster().get(0, 1, 0), None);
        assert_eq!(r.raster().get(0, 0, 1), None);
    }

    #[test]
    fn rasterize_median() {
        let grid = GeoGrid::new("t", 0.0, 0.0, 10.0, 1, 1).unwrap();
        let pts = [pt(1.0, 1.0, 4.0), pt(2.0, 2.0, 9.0), pt(3.0, 3.0, 5.0)];
        let r = rasterize_yield(&pts, &grid, CellAggregation::Median).unwrap();
        assert_eq!(r.at(0), Some(5.0));
    }

    #[test]
    fn csv_round_trip_and_bad_values() {
        let text = "field_id,farm_id,crop,x,y,timestamp,yield_t_ha,moisture_pct,harvester_active\n\
                    f,farm,wheat,1.5,2.5,2021-07-15T10:00:00,5.5,14,1\n\
                    f,farm,wheat,abc,2.5,not-a-date,5.5,14,0\n";
        let pts = read_yield_csv(text.as_bytes()).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].x, 1.5);
        assert!(pts[1].x.is_nan() && pts[1].timestamp.is_none() && !pts[1].harvester_active);
        let mut buf = Vec::new();
        write_yield_csv(&mut buf, &pts[..1]).unwrap();
        assert_eq!(read_yield_csv(&buf[..]).unwrap()[0], pts[0]);
        assert!(read_yield_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    proptest! {
        // rules 1-4 never re-fire on their own output, and the report adds up
        #[test]
        fn report_accounts_for_every_point(ys in prop::collection::vec(-2.0f64..30.0, 0..60), inactive in prop::collection::vec(any::<bool>(), 60)) {
            let pts: Vec<_> = ys.iter().enumerate().map(|(i, y)| {
                let mut p = pt(i as f64, 0.0, *y);
                p.harvester_active = !inactive[i] || i % 3 != 0;
                p
            }).collect();
            let (out, rep) = clean_yield_points(&pts, &CleanRules::default()).unwrap();
            prop_assert_eq!(rep.removed() + rep.retained, rep.input);
            prop_assert!(out.iter().all(|p| p.yield_t_ha > 0.0 && p.harvester_active));
            let (_, again) = clean_yield_points(&out, &CleanRules::default()).unwrap();
            let pre_sigma = again.removed() - again.outlier_3sigma;
            prop_assert_eq!(pre_sigma, 0);
        }

        // one point per cell: mean of populated cells equals mean of point yields
        #[test]
        fn rasterization_conserves_mean(ys in prop::collection::vec(0.5f64..20.0, 1..50)) {
            let grid = GeoGrid::new("t", 0.0, 0.0, 10.0, 10, 5).unwrap();
            let pts: Vec<_> = ys.iter().enumerate().map(|(i, y)| {
                let (x, yy) = grid.cell_center(i % 10, i / 10);
                pt(x, yy, *y)
            }).collect();
            let r = rasterize_yield(&pts, &grid, CellAggregation::Mean).unwrap();
            let cells: Vec<f64> = (0..grid.len()).filter_map(|i| r.at(i)).map(f64::from).collect();
            prop_assert_eq!(cells.len(), ys.len());
            let rm = cells.iter().sum::<f64>() / cells.len() as f64;
            let pm = ys.iter().map(|y| *y as f32 as f64).sum::<f64>() / ys.len() as f64;
            prop_assert!((rm - pm).abs() <= 1e-9);
            prop_assert!(cells.iter().all(|v| *v > 0.0));
        }
    }
}
