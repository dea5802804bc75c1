//! Grouped K-fold cross-validation with field- and sub-field-level scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::folds::FoldAssignment;
use crate::eval::metrics::{mape, r2};
use crate::grid::GeoGrid;
use crate::raster::Raster;
use crate::yield_ingest::YIELD_BAND;
use crate::fusion::{flatten_for_trees, FusedCube, ModalitySelection, SequenceSet};
use crate::models::{gbdt_fit, lstm_fit, GbdtParams, LstmParams, ModelKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub gbdt: GbdtParams,
    pub lstm: LstmParams,
}

impl ModelSpec {
    pub fn gbdt(params: GbdtParams) -> Self {
        ModelSpec {
            kind: ModelKind::Gbdt,
            gbdt: params,
            lstm: LstmParams::default(),
        }
    }
    pub fn lstm(params: LstmParams) -> Self {
        ModelSpec {
            kind: ModelKind::Lstm,
            gbdt: GbdtParams::default(),
            lstm: params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub model: ModelKind,
    pub modalities: String,
    pub crop: String,
    pub country: String,
    pub seed: u64,
}

/// One row of scores. R² is `None` where it is undefined (fewer than two
/// fields in a fold, or a constant target).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub n_fields: usize,
    pub n_pixels: usize,
    pub field_mape: f64,
    pub field_r2: Option<f64>,
    pub subfield_mape: f64,
    pub subfield_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub info: RunInfo,
    pub k: usize,
    pub folds: Vec<MetricRow>,
    /// Arithmetic mean of the fold rows (R² over the folds where it is defined).
    pub mean: MetricRow,
}

pub const METRICS_CSV_HEADER: &str =
    "row,model,modalities,crop,country,seed,n_fields,n_pixels,field_mape,field_r2,subfield_mape,subfield_r2";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsTable {
    pub fn from_folds(info: RunInfo, folds: Vec<MetricRow>) -> Self {
        let n = folds.len() as f64;
        let mean_opt = |get: fn(&MetricRow) -> Option<f64>| {
            let vals: Vec<f64> = folds.iter().filter_map(get).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let mean = MetricRow {
            label: "mean".into(),
            n_fields: folds.iter().map(|r| r.n_fields).sum(),
            n_pixels: folds.iter().map(|r| r.n_pixels).sum(),
            field_mape: folds.iter().map(|r| r.field_mape).sum::<f64>() / n,
            field_r2: mean_opt(|r| r.field_r2),
            subfield_mape: folds.iter().map(|r| r.subfield_mape).sum::<f64>() / n,
            subfield_r2: mean_opt(|r| r.subfield_r2),
        };
        MetricsTable {
            k: folds.len(),
            info,
            folds,
            mean,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_CSV_HEADER);
        s.push('\n');
        for r in self.folds.iter().chain(std::iter::once(&self.mean)) {
            let i = &self.info;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.label,
                i.model,
                i.modalities,
                i.crop,
                i.country,
                i.seed,
                r.n_fields,
                r.n_pixels,
                r.field_mape,
                opt(r.field_r2),
                r.subfield_mape,
                opt(r.subfield_r2)
            )
            .unwrap();
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-pixel held-out predictions of one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldPrediction {
    pub field_id: String,
    pub fold: usize,
    pub pixel_coords: Vec<(u32, u32)>,
    pub target: Vec<f32>,
    pub prediction: Vec<f64>,
}

impl FieldPrediction {
    /// Target and prediction as single-band rasters on `grid`; pixels that
    /// were not predicted are nodata.
    pub fn to_rasters(&self, grid: &GeoGrid) -> Result<(Raster, Raster)> {
        let mut t = vec![None; grid.len()];
        let mut p = vec![None; grid.len()];
        for (k, (c, r)) in self.pixel_coords.iter().enumerate() {
            let (c, r) = (*c as usize, *r as usize);
            if c >= grid.cols() || r >= grid.rows() {
                return Err(Error::GridMismatch(format!("pixel ({c}, {r}) of field '{}' outside its grid", self.field_id)));
            }
            t[grid.index(c, r)] = Some(self.target[k]);
            p[grid.index(c, r)] = Some(self.prediction[k] as f32);
        }
        let target = Raster::from_fn(grid.clone(), vec![YIELD_BAND.into()], |_, c, r| t[grid.index(c, r)])?;
        let prediction = Raster::from_fn(grid.clone(), vec!["prediction".into()], |_, c, r| p[grid.index(c, r)])?;
        Ok((target, prediction))
    }
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub table: MetricsTable,
    pub predictions: Vec<FieldPrediction>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Scores one fold's held-out predictions.
pub fn score_fold(label: &str, preds: &[FieldPrediction]) -> Result<MetricRow> {
    let y: Vec<f64> = preds.iter().flat_map(|p| p.target.iter().map(|v| *v as f64)).collect();
    let yhat: Vec<f64> = preds.iter().flat_map(|p| p.prediction.iter().copied()).collect();
    let fy: Vec<f64> = preds.iter().map(|p| mean(p.target.iter().map(|v| *v as f64))).collect();
    let fyhat: Vec<f64> = preds.iter().map(|p| mean(p.prediction.iter().copied())).collect();
    let defined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::ConstantTarget) | Err(Error::Eval(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(MetricRow {
        label: label.to_string(),
        n_fields: preds.len(),
        n_pixels: y.len(),
        field_mape: mape(&fy, &fyhat)?,
        field_r2: defined(r2(&fy, &fyhat))?,
        subfield_mape: mape(&y, &yhat)?,
        subfield_r2: defined(r2(&y, &yhat))?,
    })
}

fn fit_predict(
    spec: &ModelSpec,
    train: &[&FusedCube],
    valid: &[&FusedCube],
    test: &[&FusedCube],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let split = |all: Vec<f64>| -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(test.len());
        let mut it = all.into_iter();
        for c in test {
            out.push(it.by_ref().take(c.n_pixels()).collect());
        }
        out
    };
    match spec.kind {
        ModelKind::Gbdt => {
            let m = gbdt_fit(&flatten_for_trees(train)?, &flatten_for_trees(valid)?, &spec.gbdt)?;
            Ok(split(m.predict(&flatten_for_trees(test)?)?))
        }
        ModelKind::Lstm => {
            let m = lstm_fit(
                &SequenceSet::from_cubes(train)?,
                &SequenceSet::from_cubes(valid)?,
                &spec.lstm,
                seed,
            )?;
            Ok(split(m.predict(&SequenceSet::from_cubes(test)?)?))
        }
    }
}

/// Runs the K-fold protocol. Within each iteration the lowest-index training
/// fold is held out for early stopping; the remaining folds train the model.
pub fn evaluate_cv(
    cubes: &[FusedCube],
    folds: &FoldAssignment,
    spec: &ModelSpec,
    sel: ModalitySelection,
    info: RunInfo,
) -> Result<CvOutcome> {
    let mut by_fold: Vec<Vec<FusedCube>> = vec![Vec::new(); folds.k];
    let mut seen = BTreeMap::new();
    for c in cubes {
        let f = folds
            .fold_of(c.field_id())
            .ok_or_else(|| Error::Eval(format!("field '{}' has no fold", c.field_id())))?;
        if seen.insert(c.field_id().to_string(), ()).is_some() {
            return Err(Error::Eval(format!("field '{}' appears twice", c.field_id())));
        }
        by_fold[f].push(c.select(sel)?);
    }
    if let Some(f) = by_fold.iter().position(|v| v.is_empty()) {
        return Err(Error::Eval(format!("fold {f} has no usable fields")));
    }
    let seed = info.seed;
    let results: Vec<Result<(MetricRow, Vec<FieldPrediction>)>> = (0..folds.k)
        .into_par_iter()
        .map(|test| {
            let es = folds.early_stopping_fold(test);
            let train: Vec<&FusedCube> = (0..folds.k)
                .filter(|f| *f != test && *f != es)
                .flat_map(|f| by_fold[f].iter())
                .collect();
            let valid: Vec<&FusedCube> = by_fold[es].iter().collect();
            let test_cubes: Vec<&FusedCube> = by_fold[test].iter().collect();
            let preds = fit_predict(spec, &train, &valid, &test_cubes, seed.wrapping_add(test as u64))?;
            let fp: Vec<FieldPrediction> = test_cubes
                .iter()
                .zip(preds)
                .map(|(c, p)| FieldPrediction {
                    field_id: c.field_id().to_string(),
                    fold: test,
                    pixel_coords: c.pixel_coords().to_vec(),
                    target: c.targets().to_vec(),
                    prediction: p,
                })
                .collect();
            Ok((score_fold(&format!("fold_{test}"), &fp)?, fp))
        })
        .collect();
    let mut rows = Vec::new();
    let mut predictions = Vec::new();
    for r in results {
        let (row, fp) = r?;
        rows.push(row);
        predictions.extend(fp);
    }
    predictions.sort_by(|a, b| a.field_id.cmp(&b.field_id));
    Ok(CvOutcome {
        table: MetricsTable::from_folds(info, rows),
        predictions,
    })
}

/// Averaged rows of several runs, one per modality subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub model: ModelKind,
    pub rows: Vec<(String, MetricRow)>,
}

impl AblationTable {
    pub fn from_tables(model: ModelKind, tables: &[MetricsTable]) -> Self {
        AblationTable {
            model,
            rows: tables.iter().map(|t| (t.info.modalities.clone(), t.mean.clone())).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,modalities,field_mape,field_r2,subfield_mape,subfield_r2\n");
        for (m, r) in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                self.model,
                m,
                r.field_mape,
                opt(r.field_r2),
                r.subfield_mape,
                opt(r.subfield_r2)
            )
            .unwrap();
        }
        s
    }

    /// Plain-text table with field and sub-field MAPE / R² columns.
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
        let w = self.rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max(10);
        let mut s = format!("{:w$} | {:^13} | {:^13}\n", self.model.to_string().to_uppercase(), "FIELD", "SUBFIELD");
        writeln!(s, "{:w$} | {:>6} {:>6} | {:>6} {:>6}", "", "MAPE", "R2", "MAPE", "R2").unwrap();
        for (m, r) in &self.rows {
            writeln!(
                s,
                "{m:w$} | {:>6} {:>6} | {:>6} {:>6}",
                f(Some(r.field_mape)),
                f(r.field_r2),
                f(Some(r.subfield_mape)),
                f(r.subfield_r2)
            )
            .unwrap();
        }
        s
    }
}
