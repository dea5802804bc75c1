//! Early fusion: per-pixel multivariate time series built by concatenating
//! every selected modality at each monthly timestep.
//!
//! Feature order per timestep is `[S2 12][weather 4][soil 24][DEM 5]`, each
//! block in its own documented band order. Static layers (soil, terrain) are
//! repeated at every timestep. Masked pixel-timesteps are zero-filled and
//! flagged in the mask; the target raster decides which pixels exist.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adm::terrain::TERRAIN_BANDS;
use crate::adm::weather::{WeatherAggregate, WEATHER_FEATURES};
use crate::adm::soil_band_names;
use crate::error::{Error, Result};
use crate::fgr::{frame, read_f32s, split_frame};
use crate::raster::Raster;
use crate::s2::{Scene, SceneSeries, S2_BANDS, TIMESTEPS};
use crate::yield_ingest::YieldRaster;

pub const FCB_MAGIC: &[u8; 4] = b"FCB1";

/// Which additional modalities accompany Sentinel-2 (always present).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalitySelection {
    pub weather: bool,
    pub soil: bool,
    pub dem: bool,
}

impl ModalitySelection {
    pub const S2: ModalitySelection = ModalitySelection {
        weather: false,
        soil: false,
        dem: false,
    };
    pub const ALL: ModalitySelection = ModalitySelection {
        weather: true,
        soil: true,
        dem: true,
    };

    pub fn new(weather: bool, soil: bool, dem: bool) -> Self {
        ModalitySelection { weather, soil, dem }
    }

    pub fn n_features(&self) -> usize {
        12 + 4 * self.weather as usize + 24 * self.soil as usize + 5 * self.dem as usize
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = S2_BANDS.iter().map(|s| s.to_string()).collect();
        if self.weather {
            names.extend(WEATHER_FEATURES.iter().map(|s| s.to_string()));
        }
        if self.soil {
            names.extend(soil_band_names());
        }
        if self.dem {
            names.extend(TERRAIN_BANDS.iter().map(|s| s.to_string()));
        }
        names
    }

    /// Whether every modality of `other` is also in `self`.
    pub fn contains(&self, other: &ModalitySelection) -> bool {
        (self.weather || !other.weather) && (self.soil || !other.soil) && (self.dem || !other.dem)
    }

    /// Parses `s2[,weather][,soil][,dem]`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut sel = ModalitySelection::S2;
        let mut has_s2 = false;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "s2" => has_s2 = true,
                "weather" => sel.weather = true,
                "soil" => sel.soil = true,
                "dem" => sel.dem = true,
                other => {
                    return Err(Error::Fusion(format!("unknown modality '{other}'")));
                }
            }
        }
        if !has_s2 {
            return Err(Error::Fusion("modality list must include s2".into()));
        }
        Ok(sel)
    }

    /// Comma list accepted by [`ModalitySelection::parse`].
    pub fn key(&self) -> String {
        let mut parts = vec!["s2"];
        if self.weather {
            parts.push("weather");
        }
        if self.soil {
            parts.push("soil");
        }
        if self.dem {
            parts.push("dem");
        }
        parts.join(",")
    }

    /// Table label such as `S2-Weather-Soil-DEM`.
    pub fn label(&self) -> String {
        let mut parts = vec!["S2"];
        if self.weather {
            parts.push("Weather");
        }
        if self.soil {
            parts.push("Soil");
        }
        if self.dem {
            parts.push("DEM");
        }
        parts.join("-")
    }

    /// All eight subsets containing S2.
    pub fn all_subsets() -> Vec<ModalitySelection> {
        (0..8u8)
            .map(|b| ModalitySelection::new(b & 1 != 0, b & 2 != 0, b & 4 != 0))
            .collect()
    }

    /// The five rows of the modality ablation table.
    pub fn ablation_rows() -> Vec<ModalitySelection> {
        vec![
            ModalitySelection::ALL,
            ModalitySelection::new(false, false, true),
            ModalitySelection::new(false, true, false),
            ModalitySelection::new(true, false, false),
            ModalitySelection::S2,
        ]
    }
}

/// Per-field layers already on the field grid.
pub struct FusionInputs<'a> {
    pub field_id: &'a str,
    pub series: &'a SceneSeries,
    /// Candidate scenes; selected ones are looked up by date.
    pub scenes: &'a [Scene],
    pub weather: Option<&'a WeatherAggregate>,
    pub soil: Option<&'a Raster>,
    pub terrain: Option<&'a Raster>,
    pub target: &'a YieldRaster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedCube {
    field_id: String,
    selection: ModalitySelection,
    feature_names: Vec<String>,
    pixel_coords: Vec<(u32, u32)>,
    /// `[pixel][timestep][feature]`
    values: Vec<f32>,
    /// `[pixel][timestep]`, `true` = observed.
    mask: Vec<bool>,
    target: Vec<f32>,
}

impl FusedCube {
    pub fn field_id(&self) -> &str {
        &self.field_id
    }
    pub fn selection(&self) -> ModalitySelection {
        self.selection
    }
    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }
    pub fn n_pixels(&self) -> usize {
        self.target.len()
    }
    pub fn pixel_coords(&self) -> &[(u32, u32)] {
        &self.pixel_coords
    }
    pub fn targets(&self) -> &[f32] {
        &self.target
    }
    pub fn value(&self, p: usize, t: usize, f: usize) -> f32 {
        self.values[(p * TIMESTEPS + t) * self.n_features() + f]
    }
    /// `TIMESTEPS × n_features` values of one pixel, timestep-major.
    pub fn pixel_values(&self, p: usize) -> &[f32] {
        let w = TIMESTEPS * self.n_features();
        &self.values[p * w..(p + 1) * w]
    }
    pub fn pixel_mask(&self, p: usize) -> &[bool] {
        &self.mask[p * TIMESTEPS..(p + 1) * TIMESTEPS]
    }

    /// Drops feature blocks not in `sel`. Remaining values are bit-identical.
    pub fn select(&self, sel: ModalitySelection) -> Result<FusedCube> {
        if !self.selection.contains(&sel) {
            return Err(Error::Fusion(format!(
                "cube built with {} cannot provide {}",
                self.selection.label(),
                sel.label()
            )));
        }
        let names = sel.feature_names();
        let keep: Vec<usize> = names
            .iter()
            .map(|n| self.feature_names.iter().position(|m| m == n).unwrap())
            .collect();
        let f = self.n_features();
        let mut values = Vec::with_capacity(self.n_pixels() * TIMESTEPS * keep.len());
        for chunk in self.values.chunks_exact(f) {
            values.extend(keep.iter().map(|k| chunk[*k]));
        }
        Ok(FusedCube {
            field_id: self.field_id.clone(),
            selection: sel,
            feature_names: names,
            pixel_coords: self.pixel_coords.clone(),
            values,
            mask: self.mask.clone(),
            target: self.target.clone(),
        })
    }
}

fn check_frame(r: &Raster, target: &YieldRaster, what: &str) -> Result<()> {
    if !r.grid().same_frame(target.grid()) {
        return Err(Error::GridMismatch(what.to_string()));
    }
    Ok(())
}

/// Fuses one field's layers into a cube.
pub fn assemble_cube(inputs: &FusionInputs<'_>, sel: ModalitySelection) -> Result<FusedCube> {
    let grid = inputs.target.grid();
    let series = inputs.series;
    if series.intervals.len() != TIMESTEPS {
        return Err(Error::Fusion(format!(
            "scene series has {} timesteps, expected {TIMESTEPS}",
            series.intervals.len()
        )));
    }
    let mut selected: Vec<Option<&Scene>> = Vec::with_capacity(TIMESTEPS);
    for t in 0..TIMESTEPS {
        let scene = match series.selected_date(t) {
            Some(date) => {
                let s = inputs
                    .scenes
                    .iter()
                    .find(|s| s.date() == date)
                    .ok_or_else(|| Error::Fusion(format!("selected scene {date} not supplied")))?;
                check_frame(s.bands(), inputs.target, &format!("scene {date}"))?;
                Some(s)
            }
            None => None,
        };
        selected.push(scene);
    }
    let weather = match (sel.weather, inputs.weather) {
        (true, None) => return Err(Error::MissingModality("weather")),
        (true, Some(w)) => Some(w),
        _ => None,
    };
    let soil = match (sel.soil, inputs.soil) {
        (true, None) => return Err(Error::MissingModality("soil")),
        (true, Some(r)) => {
            check_frame(r, inputs.target, "soil")?;
            Some(r.select_bands(&soil_band_names().iter().map(String::as_str).collect::<Vec<_>>())?)
        }
        _ => None,
    };
    let terrain = match (sel.dem, inputs.terrain) {
        (true, None) => return Err(Error::MissingModality("dem")),
        (true, Some(r)) => {
            check_frame(r, inputs.target, "terrain")?;
            Some(r.select_bands(&TERRAIN_BANDS)?)
        }
        _ => None,
    };

    let nf = sel.n_features();
    let mut coords = Vec::new();
    let mut values = Vec::new();
    let mut mask = Vec::new();
    let mut target = Vec::new();
    let mut row = vec![0f32; TIMESTEPS * nf];
    let mut static_feats = Vec::with_capacity(29);
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            let idx = grid.index(c, r);
            let Some(y) = inputs.target.at(idx) else { continue };
            // static blocks; nodata (e.g. flat-cell aspect) becomes zero
            static_feats.clear();
            for layer in [&soil, &terrain].into_iter().flatten() {
                static_feats.extend((0..layer.n_bands()).map(|b| layer.at(b, idx).unwrap_or(0.0)));
            }
            row.fill(0.0);
            let mut pm = [false; TIMESTEPS];
            for (t, scene) in selected.iter().enumerate() {
                let Some(scene) = scene else { continue };
                if !scene.pixel_usable(idx) {
                    continue;
                }
                pm[t] = true;
                let out = &mut row[t * nf..(t + 1) * nf];
                let mut k = 0;
                for b in 0..S2_BANDS.len() {
                    out[k] = scene.bands().at(b, idx).unwrap();
                    k += 1;
                }
                if let Some(w) = weather {
                    for v in w.values[t] {
                        out[k] = v as f32;
                        k += 1;
                    }
                }
                out[k..].copy_from_slice(&static_feats);
            }
            if !pm.iter().any(|m| *m) {
                continue;
            }
            coords.push((c as u32, r as u32));
            values.extend_from_slice(&row);
            mask.extend_from_slice(&pm);
            target.push(y);
        }
    }
    Ok(FusedCube {
        field_id: inputs.field_id.to_string(),
        selection: sel,
        feature_names: sel.feature_names(),
        pixel_coords: coords,
        values,
        mask,
        target,
    })
}

/// Tree-model design matrix: one row per pixel, timestep-major columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major.
    pub values: Vec<f32>,
    pub col_names: Vec<String>,
    pub target: Vec<f64>,
}

impl DesignMatrix {
    /// Matrix with generic column names `c0`, `c1`, ...
    pub fn new(n_cols: usize, values: Vec<f32>, target: Vec<f64>) -> Result<Self> {
        if n_cols == 0 || values.len() != n_cols * target.len() {
            return Err(Error::Fusion(format!(
                "{} values do not form {} rows of {n_cols} columns",
                values.len(),
                target.len()
            )));
        }
        Ok(DesignMatrix {
            n_rows: target.len(),
            n_cols,
            values,
            col_names: (0..n_cols).map(|c| format!("c{c}")).collect(),
            target,
        })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }
}

pub fn column_names(feature_names: &[String]) -> Vec<String> {
    (0..TIMESTEPS)
        .flat_map(|t| feature_names.iter().map(move |f| format!("t{t:02}_{f}")))
        .collect()
}

/// Concatenates all timesteps of every pixel into one row; masked entries stay 0.
pub fn flatten_for_trees(cubes: &[&FusedCube]) -> Result<DesignMatrix> {
    let first = cubes
        .first()
        .ok_or_else(|| Error::Fusion("no cubes to flatten".into()))?;
    let names = first.feature_names().to_vec();
    if let Some(c) = cubes.iter().find(|c| c.feature_names() != names) {
        return Err(Error::Fusion(format!(
            "cube '{}' has a different feature layout",
            c.field_id()
        )));
    }
    let n_cols = TIMESTEPS * names.len();
    let n_rows = cubes.iter().map(|c| c.n_pixels()).sum();
    let mut values = Vec::with_capacity(n_rows * n_cols);
    let mut target = Vec::with_capacity(n_rows);
    for c in cubes {
        values.extend_from_slice(&c.values);
        target.extend(c.target.iter().map(|y| *y as f64));
    }
    Ok(DesignMatrix {
        n_rows,
        n_cols,
        values,
        col_names: column_names(&names),
        target,
    })
}

/// Pixels of several cubes pooled for sequence models.
#[derive(Debug, Clone)]
pub struct SequenceSet {
    pub n_features: usize,
    /// `[sample][timestep][feature]`
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
    pub target: Vec<f64>,
}

impl SequenceSet {
    pub fn from_cubes(cubes: &[&FusedCube]) -> Result<Self> {
        let first = cubes
            .first()
            .ok_or_else(|| Error::Fusion("no cubes to pool".into()))?;
        let nf = first.n_features();
        let mut out = SequenceSet {
            n_features: nf,
            values: Vec::new(),
            mask: Vec::new(),
            target: Vec::new(),
        };
        for c in cubes {
            if c.feature_names() != first.feature_names() {
                return Err(Error::Fusion(format!(
                    "cube '{}' has a different feature layout",
                    c.field_id()
                )));
            }
            out.values.extend_from_slice(&c.values);
            out.mask.extend_from_slice(&c.mask);
            out.target.extend(c.target.iter().map(|y| *y as f64));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }
    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
    pub fn sample(&self, i: usize) -> (&[f32], &[bool]) {
        let w = TIMESTEPS * self.n_features;
        (&self.values[i * w..(i + 1) * w], &self.mask[i * TIMESTEPS..(i + 1) * TIMESTEPS])
    }
}

/// Shuffled mini-batches for one epoch. The order is a pure function of
/// `seed ^ epoch`; the final partial batch is kept.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct FcbHeader {
    field_id: String,
    n_pixels: usize,
    timesteps: usize,
    n_features: usize,
    feature_names: Vec<String>,
    pixel_coords: Vec<(u32, u32)>,
}

pub fn encode_cube(cube: &FusedCube) -> Result<Vec<u8>> {
    let header = FcbHeader {
        field_id: cube.field_id.clone(),
        n_pixels: cube.n_pixels(),
        timesteps: TIMESTEPS,
        n_features: cube.n_features(),
        feature_names: cube.feature_names.clone(),
        pixel_coords: cube.pixel_coords.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let payload = cube.values.len() * 4 + cube.mask.len() + cube.target.len() * 4;
    let mut out = frame(FCB_MAGIC, &header, payload);
    for v in &cube.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(cube.mask.iter().map(|m| *m as u8));
    for v in &cube.target {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn selection_from_names(names: &[String]) -> Result<ModalitySelection> {
    ModalitySelection::all_subsets()
        .into_iter()
        .find(|s| s.feature_names() == names)
        .ok_or_else(|| Error::Format {
            format: "FCB",
            reason: "feature names do not match any modality layout".into(),
        })
}

pub fn decode_cube(bytes: &[u8]) -> Result<FusedCube> {
    let (header, payload) = split_frame("FCB", FCB_MAGIC, bytes)?;
    let h: FcbHeader = serde_json::from_slice(header)?;
    let bad = |reason: String| Error::Format {
        format: "FCB",
        reason,
    };
    if h.timesteps != TIMESTEPS || h.n_features != h.feature_names.len() || h.pixel_coords.len() != h.n_pixels {
        return Err(bad("inconsistent header".into()));
    }
    let nv = h.n_pixels * TIMESTEPS * h.n_features;
    let nm = h.n_pixels * TIMESTEPS;
    if payload.len() != nv * 4 + nm + h.n_pixels * 4 {
        return Err(bad(format!("payload length {} does not match header", payload.len())));
    }
    let values = read_f32s("FCB", payload, nv)?;
    let mask = payload[nv * 4..nv * 4 + nm].iter().map(|b| *b != 0).collect();
    let target = read_f32s("FCB", &payload[nv * 4 + nm..], h.n_pixels)?;
    Ok(FusedCube {
        selection: selection_from_names(&h.feature_names)?,
        field_id: h.field_id,
        feature_names: h.feature_names,
        pixel_coords: h.pixel_coords,
        values,
        mask,
        target,
    })
}

pub fn write_cube(path: impl AsRef<Path>, cube: &FusedCube) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_cube(cube)?).map_err(|e| Error::io(path, e))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<FusedCube> {
    let path = path.as_ref();
    decode_cube(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
