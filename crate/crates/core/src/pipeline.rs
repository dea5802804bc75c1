//! From a dataset directory to fused cubes.
//!
//! A dataset directory holds `fields.json` (an array of field descriptors),
//! `yield.csv`, `weather.csv` and one sub-directory per field with
//! `s2/scenes.json` plus scene FGRs, `soil.fgr` and `dem.fgr`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adm::weather::{aggregate_weather, read_weather_csv_file, WeatherAggregation, WeatherDaily};
use crate::adm::{soil_to_field, terrain_to_field};
use crate::error::{Error, Result};
use crate::fgr;
use crate::field::{validate_fields, FieldDescriptor};
use crate::fusion::{assemble_cube, FusedCube, FusionInputs, ModalitySelection};
use crate::s2::{composite, read_scene_dir, CompositeConfig, SceneSeries};
use crate::yield_ingest::{
    clean_yield_points, rasterize_yield, read_yield_csv_file, CellAggregation, CleanReport, CleanRules,
    YieldPointRecord, YieldRaster,
};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub clean: CleanRules,
    pub aggregation: CellAggregation,
    pub composite: CompositeConfig,
    pub weather: WeatherAggregation,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub fields: Vec<FieldDescriptor>,
    pub points: BTreeMap<String, Vec<YieldPointRecord>>,
    pub weather: BTreeMap<String, Vec<WeatherDaily>>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let fp = root.join("fields.json");
        let mut fields: Vec<FieldDescriptor> =
            serde_json::from_slice(&fs::read(&fp).map_err(|e| Error::io(&fp, e))?)?;
        validate_fields(&fields)?;
        fields.sort_by(|a, b| a.field_id.cmp(&b.field_id));
        let mut points: BTreeMap<String, Vec<YieldPointRecord>> = BTreeMap::new();
        for p in read_yield_csv_file(root.join("yield.csv"))? {
            points.entry(p.field_id.clone()).or_default().push(p);
        }
        let mut weather: BTreeMap<String, Vec<WeatherDaily>> = BTreeMap::new();
        let wp = root.join("weather.csv");
        if wp.exists() {
            for w in read_weather_csv_file(&wp)? {
                weather.entry(w.field_id.clone()).or_default().push(w);
            }
        }
        Ok(Dataset { root, fields, points, weather })
    }

    pub fn field(&self, id: &str) -> Option<&FieldDescriptor> {
        self.fields.iter().find(|f| f.field_id == id)
    }

    pub fn field_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    /// Cleans and rasterizes one field's yield points.
    pub fn ingest(&self, field: &FieldDescriptor, cfg: &PipelineConfig) -> Result<(YieldRaster, CleanReport)> {
        let pts = self.points.get(&field.field_id).map(Vec::as_slice).unwrap_or(&[]);
        let rules = CleanRules {
            extent: Some(field.grid.clone()),
            ..cfg.clean.clone()
        };
        let (kept, report) = clean_yield_points(pts, &rules)?;
        Ok((rasterize_yield(&kept, &field.grid, cfg.aggregation)?, report))
    }
}

/// One field carried through every stage.
#[derive(Debug, Clone)]
pub struct PreparedField {
    pub descriptor: FieldDescriptor,
    pub report: CleanReport,
    pub target: YieldRaster,
    pub series: SceneSeries,
    pub cube: FusedCube,
}

/// Runs ingestion, compositing, weather/soil/terrain alignment and fusion for one field.
pub fn prepare_field(
    ds: &Dataset,
    field: &FieldDescriptor,
    cfg: &PipelineConfig,
    sel: ModalitySelection,
) -> Result<PreparedField> {
    let (target, report) = ds.ingest(field, cfg)?;
    let dir = ds.field_dir(&field.field_id);
    let scenes = read_scene_dir(dir.join("s2"))?;
    let series = composite(&scenes, &field.season, &cfg.composite)?;
    let weather = match (sel.weather, ds.weather.get(&field.field_id)) {
        (false, _) => None,
        (true, None) => return Err(Error::MissingModality("weather")),
        (true, Some(daily)) => Some(aggregate_weather(daily, &series, &field.season, cfg.weather)?),
    };
    let soil = if sel.soil {
        Some(soil_to_field(&fgr::read(dir.join("soil.fgr"))?, &field.grid)?)
    } else {
        None
    };
    let terrain = if sel.dem {
        Some(terrain_to_field(&fgr::read(dir.join("dem.fgr"))?, &field.grid)?)
    } else {
        None
    };
    let cube = assemble_cube(
        &FusionInputs {
            field_id: &field.field_id,
            series: &series,
            scenes: &scenes,
            weather: weather.as_ref(),
            soil: soil.as_ref(),
            terrain: terrain.as_ref(),
            target: &target,
        },
        sel,
    )?;
    Ok(PreparedField {
        descriptor: field.clone(),
        report,
        target,
        series,
        cube,
    })
}

/// Prepares every field. Fields that cannot be used (all timesteps masked,
/// no observed pixel) are returned separately with their error.
pub fn prepare_all(
    ds: &Dataset,
    cfg: &PipelineConfig,
    sel: ModalitySelection,
) -> Result<(Vec<PreparedField>, Vec<(String, Error)>)> {
    let results: Vec<(String, Result<PreparedField>)> = ds
        .fields
        .par_iter()
        .map(|f| (f.field_id.clone(), prepare_field(ds, f, cfg, sel)))
        .collect();
    let (mut ok, mut skipped) = (Vec::new(), Vec::new());
    for (id, r) in results {
        match r {
            Ok(p) if p.cube.n_pixels() > 0 => ok.push(p),
            Ok(_) => skipped.push((id.clone(), Error::Fusion(format!("field {id} has no usable pixel")))),
            Err(e @ Error::AllTimestepsMasked) => skipped.push((id, e)),
            Err(e) => return Err(e),
        }
    }
    Ok((ok, skipped))
}
