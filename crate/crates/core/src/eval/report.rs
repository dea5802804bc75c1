//! Per-field qualitative report: maps, scatter, error maps and distributions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldDescriptor;
use crate::grid::GeoGrid;
use crate::raster::Raster;
use crate::yield_ingest::YieldRaster;

/// Panel file names in display order.
pub const PANEL_FILES: [&str; 6] = [
    "target.ppm",
    "prediction.ppm",
    "scatter.svg",
    "rel_error_clipped.ppm",
    "rel_error_full.ppm",
    "distribution.svg",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub field_id: String,
    pub n_pixels: usize,
    pub target_mean: f64,
    pub prediction_mean: f64,
    pub target_std: f64,
    /// Zero for a constant predictor: no in-field variability.
    pub prediction_std: f64,
    pub std_ratio: f64,
    pub median_abs_rel_error: f64,
    pub max_abs_rel_error: f64,
    /// Two-sample Kolmogorov–Smirnov distance between the value distributions.
    pub ks_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub grid: GeoGrid,
    /// Cells where both target and prediction hold data.
    pub target: Vec<Option<f64>>,
    pub prediction: Vec<Option<f64>>,
    /// |prediction − target| / target
    pub rel_error: Vec<Option<f64>>,
    pub rel_error_clipped: Vec<Option<f64>>,
    pub summary: ReportSummary,
}

fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

pub fn field_report(field: &FieldDescriptor, target: &YieldRaster, prediction: &Raster) -> Result<ReportBundle> {
    let grid = target.grid();
    if !grid.same_frame(prediction.grid()) || !grid.same_frame(&field.grid) {
        return Err(Error::GridMismatch(format!("report for field '{}'", field.field_id)));
    }
    let n = grid.len();
    let mut t = vec![None; n];
    let mut p = vec![None; n];
    let mut e = vec![None; n];
    let mut ec = vec![None; n];
    for i in 0..n {
        if let (Some(y), Some(yh)) = (target.at(i), prediction.at(0, i)) {
            let (y, yh) = (y as f64, yh as f64);
            let rel = (yh - y).abs() / y;
            t[i] = Some(y);
            p[i] = Some(yh);
            e[i] = Some(rel);
            ec[i] = Some(rel.min(1.0));
        }
    }
    let ty: Vec<f64> = t.iter().flatten().copied().collect();
    if ty.is_empty() {
        return Err(Error::Eval(format!("field '{}': no pixel has both target and prediction", field.field_id)));
    }
    let py: Vec<f64> = p.iter().flatten().copied().collect();
    let errs: Vec<f64> = e.iter().flatten().copied().collect();
    let (ts, ps) = (std_dev(&ty), std_dev(&py));
    let summary = ReportSummary {
        field_id: field.field_id.clone(),
        n_pixels: ty.len(),
        target_mean: ty.iter().sum::<f64>() / ty.len() as f64,
        prediction_mean: py.iter().sum::<f64>() / py.len() as f64,
        target_std: ts,
        prediction_std: ps,
        std_ratio: if ts > 0.0 { ps / ts } else { f64::NAN },
        median_abs_rel_error: median(errs.clone()),
        max_abs_rel_error: errs.iter().cloned().fold(0.0, f64::max),
        ks_distance: ks_distance(&ty, &py),
    };
    Ok(ReportBundle {
        grid: grid.clone(),
        target: t,
        prediction: p,
        rel_error: e,
        rel_error_clipped: ec,
        summary,
    })
}

const NODATA_RGB: [u8; 3] = [40, 40, 40];

fn lerp_ramp(stops: &[[f64; 3]], x: f64) -> [u8; 3] {
    let x = x.clamp(0.0, 1.0) * (stops.len() - 1) as f64;
    let k = (x.floor() as usize).min(stops.len() - 2);
    let f = x - k as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (stops[k][c] + f * (stops[k + 1][c] - stops[k][c])).round() as u8;
    }
    out
}

/// Yield colours, low to high.
const YIELD_RAMP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];
/// Error colours, zero to maximum.
const ERROR_RAMP: [[f64; 3]; 3] = [[255.0, 255.0, 255.0], [253.0, 174.0, 97.0], [165.0, 0.0, 38.0]];

/// Binary PPM (P6) of a single-band map; each cell becomes a `scale`² block.
pub fn render_ppm(grid: &GeoGrid, values: &[Option<f64>], lo: f64, hi: f64, ramp: &[[f64; 3]], scale: usize) -> Vec<u8> {
    let (w, h) = (grid.cols() * scale, grid.rows() * scale);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    for y in 0..h {
        for x in 0..w {
            let v = values[grid.index(x / scale, y / scale)];
            let rgb = v.map_or(NODATA_RGB, |v| lerp_ramp(ramp, (v - lo) / span));
            out.extend_from_slice(&rgb);
        }
    }
    out
}

fn pixel_scale(grid: &GeoGrid) -> usize {
    (256 / grid.cols().max(grid.rows())).max(1)
}

fn scatter_svg(t: &[f64], p: &[f64]) -> String {
    let lo = t.iter().chain(p).cloned().fold(f64::INFINITY, f64::min);
    let hi = t.iter().chain(p).cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |v: f64| 40.0 + (v - lo) / span * 300.0;
    let py = |v: f64| 340.0 - (v - lo) / span * 300.0;
    let mut s = String::from(r#"<svg xmlns="http://www.w3.org/2000/svg" width="360" height="370" font-size="11">"#);
    s.push('\n');
    writeln!(s, r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="grey"/>"#, px(lo), py(lo), px(hi), py(hi)).unwrap();
    for (a, b) in t.iter().zip(p) {
        writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="steelblue" fill-opacity="0.5"/>"#, px(*a), py(*b)).unwrap();
    }
    writeln!(s, r#"<text x="150" y="362">target (t/ha)</text>"#).unwrap();
    writeln!(s, r#"<text x="4" y="20">prediction</text>"#).unwrap();
    writeln!(s, r#"<text x="40" y="352">{lo:.2}</text><text x="310" y="352">{hi:.2}</text>"#).unwrap();
    s.push_str("</svg>\n");
    s
}

fn histogram(v: &[f64], lo: f64, width: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for x in v {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        h[b] += 1.0 / v.len() as f64;
    }
    h
}

fn distribution_svg(t: &[f64], p: &[f64]) -> String {
    const BINS: usize = 30;
    let lo = t.iter().chain(p).cloned().fold(f64::INFINITY, f64::min);
    let hi = t.iter().chain(p).cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / BINS as f64 } else { 1.0 };
    let ht = histogram(t, lo, width, BINS);
    let hp = histogram(p, lo, width, BINS);
    let top = ht.iter().chain(&hp).cloned().fold(0.0, f64::max).max(1e-12);
    let mut s = String::from(r#"<svg xmlns="http://www.w3.org/2000/svg" width="360" height="260" font-size="11">"#);
    s.push('\n');
    for (hist, colour) in [(&ht, "grey"), (&hp, "steelblue")] {
        let pts: Vec<String> = hist
            .iter()
            .enumerate()
            .map(|(b, v)| format!("{:.2},{:.2}", 30.0 + (b as f64 + 0.5) * 10.0, 230.0 - v / top * 200.0))
            .collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, pts.join(" ")).unwrap();
    }
    writeln!(s, r#"<text x="30" y="250">{lo:.2}</text><text x="300" y="250">{hi:.2}</text>"#).unwrap();
    writeln!(s, r#"<text x="200" y="20" fill="grey">target</text><text x="260" y="20" fill="steelblue">prediction</text>"#).unwrap();
    s.push_str("</svg>\n");
    s
}

impl ReportBundle {
    /// The six rendered panels, keyed by [`PANEL_FILES`].
    pub fn render(&self) -> Vec<(&'static str, Vec<u8>)> {
        let t: Vec<f64> = self.target.iter().flatten().copied().collect();
        let p: Vec<f64> = self.prediction.iter().flatten().copied().collect();
        let lo = t.iter().chain(&p).cloned().fold(f64::INFINITY, f64::min);
        let hi = t.iter().chain(&p).cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = pixel_scale(&self.grid);
        let emax = self.summary.max_abs_rel_error.max(1e-12);
        vec![
            (PANEL_FILES[0], render_ppm(&self.grid, &self.target, lo, hi, &YIELD_RAMP, scale)),
            (PANEL_FILES[1], render_ppm(&self.grid, &self.prediction, lo, hi, &YIELD_RAMP, scale)),
            (PANEL_FILES[2], scatter_svg(&t, &p).into_bytes()),
            (PANEL_FILES[3], render_ppm(&self.grid, &self.rel_error_clipped, 0.0, 1.0, &ERROR_RAMP, scale)),
            (PANEL_FILES[4], render_ppm(&self.grid, &self.rel_error, 0.0, emax, &ERROR_RAMP, scale)),
            (PANEL_FILES[5], distribution_svg(&t, &p).into_bytes()),
        ]
    }

    /// Writes the panels and `summary.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, bytes) in self.render() {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        let path = dir.join("summary.json");
        fs::write(&path, serde_json::to_vec_pretty(&self.summary)?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(written)
    }
}
