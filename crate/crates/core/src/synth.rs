//! Deterministic synthetic datasets with a known latent yield.
//!
//! Each field gets a value-noise DEM (30 m, two octaves), a coarse soil stack
//! (250 m), daily weather, Sentinel-2 scenes every ten days and a yield-point
//! CSV. The latent yield of a 10 m pixel is
//!
//! ```text
//! latent = base_field − 0.01 · (z_field − 150)
//!        + 2.5 · tanh((twi − 7.5) / 2.5)
//!        + 0.25 · (soc_0-5 − 30) / 6
//!        + 0.6 · (P_season − 480) / 480
//!        + 0.4 · vigor
//! ```
//!
//! where `base_field ~ 7 + N(0, 0.5²)`, `z_field` is the field's base
//! elevation (uniform 80..220 m, the DEM adds relief on top), `twi` and
//! `soc_0-5` are the field-grid layers produced by this
//! crate's own terrain and upsampling code, `P_season` is the precipitation
//! summed over (seeding, harvest], and `vigor` is a smooth per-pixel
//! phenology-peak anomaly. Latent values are clamped to ±2.4 σ of their field.
//! Observed point yields add Gaussian noise of `noise_sd` and are clamped to
//! ±2.5 σ of the field's point yields so that only injected points trip the
//! cleaning rules.
//!
//! Scene reflectance follows a winter-wheat phenology curve whose peak canopy
//! fraction is `0.085 · latent · (1 + η)` with a persistent per-pixel
//! nuisance `η ~ N(0, s2_nuisance_sd)`, so imagery alone recovers the latent
//! yield only approximately.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adm::weather::{write_weather_csv, WeatherDaily};
use crate::adm::{soil_band_names, soil_to_field, terrain_to_field, SOIL_PROPERTIES};
use crate::error::{Error, Result};
use crate::fgr;
use crate::field::{FieldDescriptor, SeasonWindow};
use crate::grid::{GeoGrid, FIELD_CELL_SIZE};
use crate::raster::Raster;
use crate::s2::{write_scene_dir, Scene, S2_BANDS};
use crate::yield_ingest::{write_yield_csv, YieldPointRecord};

pub const DEM_CELL: f64 = 30.0;
pub const SOIL_CELL: f64 = 250.0;
/// Injected dirty-point rates per field cell.
pub const ZERO_YIELD_RATE: f64 = 0.01;
pub const INACTIVE_RATE: f64 = 0.01;
pub const OUTLIER_RATE: f64 = 0.005;

const TWI_COEF: f64 = 2.5;
const ELEVATION_COEF: f64 = 0.01;
const SOC_COEF: f64 = 0.25;
const PRECIP_COEF: f64 = 0.6;
const VIGOR_COEF: f64 = 0.4;
const PRECIP_REF: f64 = 480.0;
const CANOPY_GAIN: f64 = 0.085;

/// Bare-soil and full-canopy reflectance per band, in band order.
const SOIL_REFL: [f64; 12] = [0.10, 0.11, 0.14, 0.17, 0.20, 0.23, 0.25, 0.26, 0.27, 0.27, 0.33, 0.28];
const VEG_REFL: [f64; 12] = [0.03, 0.04, 0.08, 0.04, 0.12, 0.30, 0.38, 0.42, 0.44, 0.40, 0.22, 0.11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_farms: usize,
    pub fields_per_farm: usize,
    pub field_cols: usize,
    pub field_rows: usize,
    pub harvest_year: i32,
    pub crop: String,
    pub noise_sd: f64,
    /// When set, overrides `noise_sd` so that the pooled Bayes-optimal R² of
    /// point yields against the latent yield equals this value.
    pub bayes_r2: Option<f64>,
    /// Probability that a scene is entirely cloud-covered.
    pub cloud_prob: f64,
    pub s2_nuisance_sd: f64,
    pub crs_id: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_farms: 3,
            fields_per_farm: 10,
            field_cols: 40,
            field_rows: 40,
            harvest_year: 2021,
            crop: "wheat".into(),
            noise_sd: 0.5,
            bayes_r2: None,
            cloud_prob: 0.3,
            s2_nuisance_sd: 0.08,
            crs_id: "EPSG:32632".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_farms == 0 || self.fields_per_farm == 0 || self.field_cols < 4 || self.field_rows < 4 {
            return Err(Error::Synth("farm, field and size counts must be positive (fields at least 4x4)".into()));
        }
        if let Some(b) = self.bayes_r2 {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::Synth(format!("target Bayes R² {b} outside (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.cloud_prob) {
            return Err(Error::Synth(format!("cloud probability {} outside [0, 1]", self.cloud_prob)));
        }
        if !(self.noise_sd >= 0.0) || !(self.s2_nuisance_sd >= 0.0) {
            return Err(Error::Synth("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Smooth 2-D noise from random lattice values with smoothstep blending.
struct ValueNoise {
    x0: f64,
    y0: f64,
    spacing: f64,
    nx: usize,
    vals: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, x0: f64, y0: f64, w: f64, h: f64, spacing: f64) -> Self {
        let nx = (w / spacing).ceil() as usize + 2;
        let ny = (h / spacing).ceil() as usize + 2;
        let vals = (0..nx * ny).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ValueNoise { x0, y0, spacing, nx, vals }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let u = ((x - self.x0) / self.spacing).max(0.0);
        let v = ((y - self.y0) / self.spacing).max(0.0);
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (s(u - i as f64), s(v - j as f64));
        let g = |a: usize, b: usize| self.vals[b * self.nx + a];
        let top = g(i, j) * (1.0 - fx) + g(i + 1, j) * fx;
        let bot = g(i, j + 1) * (1.0 - fx) + g(i + 1, j + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Grid of `cell` size covering `field` plus `margin` metres on every side.
fn covering(field: &GeoGrid, cell: f64, margin: f64) -> Result<GeoGrid> {
    let x0 = ((field.x_min() - margin) / cell).floor() * cell;
    let y0 = ((field.y_min() - margin) / cell).floor() * cell;
    let cols = ((field.x_max() + margin - x0) / cell).ceil() as usize;
    let rows = ((field.y_max() + margin - y0) / cell).ceil() as usize;
    GeoGrid::new(field.crs_id(), x0, y0, cell, cols, rows)
}

fn smoothstep(a: f64, b: f64, x: f64) -> f64 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Canopy development (0..1 before scaling) of winter wheat on date `d`.
fn phenology(d: NaiveDate, season: &SeasonWindow, peak: NaiveDate) -> f64 {
    if !season.contains(d) {
        return 0.0;
    }
    let days = |a: NaiveDate, b: NaiveDate| (b - a).num_days() as f64;
    let since_sow = days(season.seeding_date(), d);
    let autumn = 0.15 * smoothstep(15.0, 45.0, since_sow);
    let to_peak = days(peak, d);
    // flat for 25 days either side of the peak, so a monthly composite near
    // the peak sees the full canopy whichever scene it picks
    let bell = (-((to_peak.abs() - 25.0).max(0.0) / 35.0).powi(2)).exp();
    // canopy collapses over the last fortnight before harvest
    let ripen = 1.0 - smoothstep(-14.0, 0.0, days(season.harvest_date(), d));
    (if to_peak < 0.0 { bell.max(autumn) } else { bell }) * ripen.max(0.05)
}

struct FarmClimate {
    temp_offset: f64,
    rain_scale: f64,
    seed: u64,
}

fn weather_for(field_id: &str, farm: &FarmClimate, field_seed: u64, year: i32) -> Vec<WeatherDaily> {
    // shared farm-level series perturbed per field
    let mut farm_rng = ChaCha8Rng::seed_from_u64(farm.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(field_seed ^ 0x5eed_0f_3a7e);
    let gamma = Gamma::new(0.8, 6.0).unwrap();
    let noise = Normal::new(0.0, 1.5).unwrap();
    let mut out = Vec::new();
    let mut d = NaiveDate::from_ymd_opt(year - 1, 1, 1).unwrap();
    let end = NaiveDate::from_ymd_opt(year, 12, 31).unwrap();
    let mut anomaly = 0.0;
    while d <= end {
        let doy = d.ordinal() as f64;
        anomaly = 0.8 * anomaly + noise.sample(&mut farm_rng);
        let mean = 9.5 - 9.0 * (2.0 * std::f64::consts::PI * (doy - 15.0) / 365.25).cos() + farm.temp_offset + anomaly;
        let mean = mean + rng.gen_range(-0.3..0.3);
        let spread = 3.5 + farm_rng.gen_range(0.0..2.5);
        let wet = farm_rng.gen_bool(0.35);
        let rain = if wet { gamma.sample(&mut farm_rng) * farm.rain_scale } else { 0.0 };
        let rain = rain * rng.gen_range(0.85..1.15);
        let r1 = |v: f64| (v * 10.0).round() / 10.0;
        let tmean = r1(mean);
        out.push(WeatherDaily {
            field_id: field_id.to_string(),
            date: d,
            tmin_c: r1(tmean - spread),
            tmax_c: r1(tmean + spread),
            tmean_c: tmean,
            precip_mm: r1(rain),
        });
        d = d.succ_opt().unwrap();
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedCounts {
    pub zero_yield: usize,
    pub inactive_harvester: usize,
    pub outlier_3sigma: usize,
}

impl InjectedCounts {
    pub fn total(&self) -> usize {
        self.zero_yield + self.inactive_harvester + self.outlier_3sigma
    }
}

/// Everything generated for one field.
pub struct SynthField {
    pub descriptor: FieldDescriptor,
    pub dem: Raster,
    pub soil: Raster,
    pub scenes: Vec<Scene>,
    pub weather: Vec<WeatherDaily>,
    pub points: Vec<YieldPointRecord>,
    /// Per cell of the field grid, row-major.
    pub latent: Vec<f64>,
    pub injected: InjectedCounts,
    pub noise_sd: f64,
}

fn field_grid(cfg: &SynthConfig, farm: usize, j: usize) -> Result<GeoGrid> {
    let x0 = 100_000.0 + farm as f64 * 50_000.0 + (j % 4) as f64 * 2_000.0;
    let y0 = 5_000_000.0 + (j / 4) as f64 * 2_000.0;
    GeoGrid::new(&cfg.crs_id, x0, y0, FIELD_CELL_SIZE, cfg.field_cols, cfg.field_rows)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt())
}

/// First stage of a field: layers and latent yield. The RNG continues into
/// [`observe_field`].
struct LatentField {
    descriptor: FieldDescriptor,
    dem: Raster,
    soil: Raster,
    weather: Vec<WeatherDaily>,
    latent: Vec<f64>,
    rng: ChaCha8Rng,
}

fn latent_field(
    cfg: &SynthConfig,
    farm_idx: usize,
    j: usize,
    climate: &FarmClimate,
    seed: u64,
) -> Result<LatentField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let grid = field_grid(cfg, farm_idx, j)?;
    let field_id = format!("farm{farm_idx:02}_field{j:02}");
    let farm_id = format!("farm{farm_idx:02}");
    let y = cfg.harvest_year;
    let sow = NaiveDate::from_ymd_opt(y - 1, 10, 1).unwrap() + Duration::days(rng.gen_range(0..20));
    let harvest = NaiveDate::from_ymd_opt(y, 7, 10).unwrap() + Duration::days(rng.gen_range(0..21));
    let season = SeasonWindow::new(sow, harvest)?;
    let descriptor = FieldDescriptor {
        field_id: field_id.clone(),
        farm_id: farm_id.clone(),
        crop: cfg.crop.clone(),
        season,
        grid: grid.clone(),
    };

    // DEM: two octaves of value noise plus a gentle tilt
    let dem_grid = covering(&grid, DEM_CELL, 4.0 * DEM_CELL)?;
    let (dx, dy) = (dem_grid.x_max() - dem_grid.x_min(), dem_grid.y_max() - dem_grid.y_min());
    let o1 = ValueNoise::new(&mut rng, dem_grid.x_min(), dem_grid.y_min(), dx, dy, 180.0);
    let o2 = ValueNoise::new(&mut rng, dem_grid.x_min(), dem_grid.y_min(), dx, dy, 60.0);
    let (tx, ty) = (rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02));
    let z0 = rng.gen_range(80.0..220.0);
    let dem = Raster::from_fn(dem_grid.clone(), vec!["dem".into()], |_, c, r| {
        let (x, yy) = dem_grid.cell_center(c, r);
        let z = z0 + 6.0 * o1.at(x, yy) + 1.5 * o2.at(x, yy)
            + tx * (x - dem_grid.x_min())
            + ty * (yy - dem_grid.y_min());
        Some(z as f32)
    })?;

    // soil: per-property level, depth trend and coarse cell-to-cell variation
    let soil_grid = covering(&grid, SOIL_CELL, 2.0 * SOIL_CELL)?;
    let levels: [(f64, f64); 8] = [
        (20.0, 4.0),  // cec
        (12.0, 3.0),  // cfvo
        (2.0, 0.5),   // nitrogen
        (6.5, 0.4),   // phh2o
        (35.0, 8.0),  // sand
        (40.0, 6.0),  // silt
        (30.0, 6.0),  // soc
        (25.0, 5.0),  // clay
    ];
    let mut soil_vals = Vec::with_capacity(24 * soil_grid.len());
    for (p, (level, spread)) in levels.iter().enumerate() {
        let field_shift = spread * 0.5 * std_normal.sample(&mut rng);
        let cells: Vec<f64> = (0..soil_grid.len()).map(|_| spread * std_normal.sample(&mut rng)).collect();
        for depth in 0..3 {
            let trend = if SOIL_PROPERTIES[p] == "soc" { -0.2 * depth as f64 * level } else { 0.05 * depth as f64 * level };
            for c in &cells {
                soil_vals.push((level + field_shift + trend + c) as f32);
            }
        }
    }
    let soil = Raster::new(soil_grid, soil_band_names(), soil_vals)?;

    // weather and the season precipitation sum
    let weather = weather_for(&field_id, climate, seed, y);
    let p_season: f64 = weather
        .iter()
        .filter(|w| w.date > sow && w.date <= harvest)
        .map(|w| w.precip_mm)
        .sum();

    // latent yield from the field-grid layers this crate derives itself
    let terrain = terrain_to_field(&dem, &grid)?;
    let soil_field = soil_to_field(&soil, &grid)?;
    let twi_b = terrain.band_index("twi").unwrap();
    let soc_b = soil_field.band_index("soc_0-5").unwrap();
    let vig = ValueNoise::new(&mut rng, grid.x_min(), grid.y_min(), grid.x_max() - grid.x_min(), grid.y_max() - grid.y_min(), 80.0);
    let base = 7.0 + 0.5 * std_normal.sample(&mut rng) - ELEVATION_COEF * (z0 - 150.0);
    let precip_term = PRECIP_COEF * (p_season - PRECIP_REF) / PRECIP_REF;
    let mut latent: Vec<f64> = (0..grid.len())
        .map(|i| {
            let (c, r) = (i % grid.cols(), i / grid.cols());
            let (x, yy) = grid.cell_center(c, r);
            let twi = terrain.at(twi_b, i).unwrap_or(7.5) as f64;
            let soc = soil_field.at(soc_b, i).unwrap_or(30.0) as f64;
            let vigor = vig.at(x, yy) * 1.7;
            base + TWI_COEF * ((twi - 7.5) / 2.5).tanh() + SOC_COEF * (soc - 30.0) / 6.0 + precip_term + VIGOR_COEF * vigor
        })
        .collect();
    let (lm, ls) = mean_sd(&latent);
    for v in latent.iter_mut() {
        *v = v.clamp(lm - 2.4 * ls, lm + 2.4 * ls).max(1.0);
    }

    Ok(LatentField {
        descriptor,
        dem,
        soil,
        weather,
        latent,
        rng,
    })
}

/// Second stage: scenes and yield points observed from the latent field.
fn observe_field(cfg: &SynthConfig, lf: LatentField, noise_sd: f64) -> Result<SynthField> {
    let LatentField {
        descriptor,
        dem,
        soil,
        weather,
        latent,
        mut rng,
    } = lf;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let grid = descriptor.grid.clone();
    let season = descriptor.season;
    let (field_id, farm_id) = (descriptor.field_id.clone(), descriptor.farm_id.clone());
    let y = cfg.harvest_year;

    // scenes every ten days from September to August
    let peak = NaiveDate::from_ymd_opt(y, 5, 15).unwrap() + Duration::days(rng.gen_range(-7..=7));
    let nuisance = Normal::new(0.0, cfg.s2_nuisance_sd.max(1e-12)).unwrap();
    let canopy: Vec<f64> = latent
        .iter()
        .map(|l| CANOPY_GAIN * l * (1.0 + if cfg.s2_nuisance_sd > 0.0 { nuisance.sample(&mut rng) } else { 0.0 }))
        .collect();
    let brightness: Vec<f64> = (0..grid.len()).map(|_| 1.0 + 0.02 * std_normal.sample(&mut rng)).collect();
    let refl_noise = Normal::new(0.0, 0.004).unwrap();
    let mut scenes = Vec::new();
    let mut d = NaiveDate::from_ymd_opt(y - 1, 9, 3).unwrap();
    let last = NaiveDate::from_ymd_opt(y, 8, 31).unwrap();
    while d <= last {
        let cloudy = rng.gen_bool(cfg.cloud_prob);
        let blob = (!cloudy && rng.gen_bool(0.25)).then(|| {
            (
                rng.gen_range(0.0..grid.cols() as f64),
                rng.gen_range(0.0..grid.rows() as f64),
                rng.gen_range(0.15..0.3) * grid.cols().min(grid.rows()) as f64,
            )
        });
        let ph = phenology(d, &season, peak);
        let mut vals = Vec::with_capacity(12 * grid.len());
        for b in 0..12 {
            for i in 0..grid.len() {
                let v = if cloudy {
                    0.6 + 0.05 * rng.gen::<f64>()
                } else {
                    let f = (canopy[i] * ph).clamp(0.0, 0.95);
                    let s = SOIL_REFL[b] * brightness[i];
                    s + (VEG_REFL[b] - s) * f + refl_noise.sample(&mut rng)
                };
                vals.push(v.max(0.0) as f32);
            }
        }
        let valid: Vec<bool> = (0..grid.len())
            .map(|i| {
                if cloudy {
                    return false;
                }
                match blob {
                    Some((bx, by, br)) => {
                        let (c, r) = ((i % grid.cols()) as f64, (i / grid.cols()) as f64);
                        (c - bx).hypot(r - by) > br
                    }
                    None => true,
                }
            })
            .collect();
        let bands = Raster::new(grid.clone(), S2_BANDS.iter().map(|s| s.to_string()).collect(), vals)?;
        scenes.push(Scene::new(d, bands, valid)?);
        d += Duration::days(10);
    }

    // yield points: one per cell, jittered inside it
    let noise = Normal::new(0.0, noise_sd.max(1e-12)).unwrap();
    let mut yields: Vec<f64> = latent
        .iter()
        .map(|l| l + if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 })
        .collect();
    let (ym, ys) = mean_sd(&yields);
    for v in yields.iter_mut() {
        *v = v.clamp(ym - 2.5 * ys, ym + 2.5 * ys).clamp(0.6, 19.4);
    }
    let t0 = season.harvest_date().and_hms_opt(9, 0, 0).unwrap();
    let mut points = Vec::with_capacity(grid.len() + 16);
    let mut stamp = 0i64;
    let mut point = |rng: &mut ChaCha8Rng, i: usize, yld: f64, active: bool| {
        let (x, yy) = grid.cell_center(i % grid.cols(), i / grid.cols());
        stamp += 2;
        YieldPointRecord {
            field_id: field_id.clone(),
            farm_id: farm_id.clone(),
            crop: cfg.crop.clone(),
            x: ((x + rng.gen_range(-3.0..3.0)) * 100.0).round() / 100.0,
            y: ((yy + rng.gen_range(-3.0..3.0)) * 100.0).round() / 100.0,
            timestamp: Some(t0 + Duration::seconds(stamp)),
            yield_t_ha: yld,
            moisture_pct: (rng.gen_range(12.0..18.0f64) * 10.0).round() / 10.0,
            harvester_active: active,
        }
    };
    for (i, v) in yields.iter().enumerate() {
        points.push(point(&mut rng, i, *v, true));
    }
    let n = grid.len() as f64;
    let injected = InjectedCounts {
        zero_yield: ((n * ZERO_YIELD_RATE).round() as usize).max(1),
        inactive_harvester: ((n * INACTIVE_RATE).round() as usize).max(1),
        outlier_3sigma: ((n * OUTLIER_RATE).round() as usize).max(1),
    };
    let outlier = (ym + 10.0 * ys.max(0.2)).min(19.5);
    for _ in 0..injected.zero_yield {
        let i = rng.gen_range(0..grid.len());
        points.push(point(&mut rng, i, 0.0, true));
    }
    for _ in 0..injected.inactive_harvester {
        let i = rng.gen_range(0..grid.len());
        points.push(point(&mut rng, i, yields[i], false));
    }
    for _ in 0..injected.outlier_3sigma {
        let i = rng.gen_range(0..grid.len());
        points.push(point(&mut rng, i, outlier, true));
    }

    Ok(SynthField {
        descriptor,
        dem,
        soil,
        scenes,
        weather,
        points,
        latent,
        injected,
        noise_sd,
    })
}

/// Generates every field in memory; fields are ordered by id.
pub fn generate_fields(cfg: &SynthConfig) -> Result<Vec<SynthField>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let climates: Vec<FarmClimate> = (0..cfg.n_farms)
        .map(|_| FarmClimate {
            temp_offset: master.gen_range(-1.5..1.5),
            rain_scale: master.gen_range(0.8..1.25),
            seed: master.gen(),
        })
        .collect();
    let jobs: Vec<(usize, usize, u64)> = (0..cfg.n_farms)
        .flat_map(|f| (0..cfg.fields_per_farm).map(move |j| (f, j)))
        .map(|(f, j)| (f, j, master.gen()))
        .collect();
    let latents: Vec<LatentField> = jobs
        .par_iter()
        .map(|(f, j, seed)| latent_field(cfg, *f, *j, &climates[*f], *seed))
        .collect::<Result<_>>()?;
    let noise_sd = match cfg.bayes_r2 {
        Some(b) => {
            let all: Vec<f64> = latents.iter().flat_map(|l| l.latent.iter().copied()).collect();
            let (_, sd) = mean_sd(&all);
            sd * ((1.0 - b) / b).sqrt()
        }
        None => cfg.noise_sd,
    };
    latents.into_par_iter().map(|l| observe_field(cfg, l, noise_sd)).collect()
}

/// Noise level [`generate_fields`] uses: `noise_sd`, or the level that puts the
/// pooled Bayes R² of the latent yield at `bayes_r2`.
pub fn effective_noise_sd(fields: &[SynthField]) -> f64 {
    fields.first().map(|f| f.noise_sd).unwrap_or(0.0)
}

pub const LATENT_CSV_HEADER: &str = "field_id,col,row,latent_yield";

/// Writes the dataset tree:
///
/// ```text
/// fields.json  yield.csv  weather.csv  latent.csv  injected.json  synth_config.json
/// <field_id>/dem.fgr  <field_id>/soil.fgr  <field_id>/s2/scenes.json  <field_id>/s2/<date>.fgr
/// ```
pub fn write_dataset(dir: impl AsRef<Path>, cfg: &SynthConfig, fields: &[SynthField]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    let descriptors: Vec<&FieldDescriptor> = fields.iter().map(|f| &f.descriptor).collect();
    put("fields.json", serde_json::to_vec_pretty(&descriptors)?)?;
    put("synth_config.json", serde_json::to_vec_pretty(cfg)?)?;
    let injected: BTreeMap<&str, &InjectedCounts> =
        fields.iter().map(|f| (f.descriptor.field_id.as_str(), &f.injected)).collect();
    put("injected.json", serde_json::to_vec_pretty(&injected)?)?;

    let mut buf = Vec::new();
    write_yield_csv(&mut buf, &fields.iter().flat_map(|f| f.points.iter().cloned()).collect::<Vec<_>>())?;
    put("yield.csv", buf)?;
    let mut buf = Vec::new();
    write_weather_csv(&mut buf, &fields.iter().flat_map(|f| f.weather.iter().cloned()).collect::<Vec<_>>())?;
    put("weather.csv", buf)?;
    let mut s = String::from(LATENT_CSV_HEADER);
    s.push('\n');
    for f in fields {
        let g = &f.descriptor.grid;
        for (i, v) in f.latent.iter().enumerate() {
            writeln!(s, "{},{},{},{}", f.descriptor.field_id, i % g.cols(), i / g.cols(), v).unwrap();
        }
    }
    put("latent.csv", s.into_bytes())?;

    fields.par_iter().try_for_each(|f| -> Result<()> {
        let fd = dir.join(&f.descriptor.field_id);
        fs::create_dir_all(&fd).map_err(|e| Error::io(&fd, e))?;
        fgr::write(fd.join("dem.fgr"), &f.dem)?;
        fgr::write(fd.join("soil.fgr"), &f.soil)?;
        write_scene_dir(fd.join("s2"), &f.scenes)
    })
}

pub fn generate_dataset(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<()> {
    let fields = generate_fields(cfg)?;
    write_dataset(dir, cfg, &fields)
}

/// `field_id → (col, row) → latent` from `latent.csv`.
pub fn read_latent(path: impl AsRef<Path>) -> Result<BTreeMap<String, BTreeMap<(u32, u32), f64>>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Synth(format!("{}: {e}", path.display())))?;
    let mut out: BTreeMap<String, BTreeMap<(u32, u32), f64>> = BTreeMap::new();
    for rec in rdr.deserialize::<(String, u32, u32, f64)>() {
        let (id, c, r, v) = rec?;
        out.entry(id).or_default().insert((c, r), v);
    }
    Ok(out)
}

pub fn read_injected(path: impl AsRef<Path>) -> Result<BTreeMap<String, InjectedCounts>> {
    let path = path.as_ref();
    Ok(serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::r2;
    use crate::s2::{composite, CompositeConfig};
    use crate::yield_ingest::{clean_yield_points, rasterize_yield, CellAggregation, CleanRules};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_farms: 1,
            fields_per_farm: 2,
            field_cols: 16,
            field_rows: 12,
            seed,
            ..SynthConfig::default()
        }
    }

    fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn byte_identical_for_same_seed() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_dataset(a.path(), &small(4)).unwrap();
        generate_dataset(b.path(), &small(4)).unwrap();
        let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
        assert!(ta.contains_key("farm00_field01/s2/scenes.json"));
        assert_eq!(ta, tb);
        let c = tempfile::tempdir().unwrap();
        generate_dataset(c.path(), &small(5)).unwrap();
        assert_ne!(tree_bytes(c.path())["yield.csv"], ta["yield.csv"]);
    }

    #[test]
    fn injected_points_are_exactly_what_cleaning_removes() {
        for f in generate_fields(&small(1)).unwrap() {
            let (kept, rep) = clean_yield_points(&f.points, &CleanRules::default()).unwrap();
            assert_eq!(rep.zero_yield, f.injected.zero_yield);
            assert_eq!(rep.inactive_harvester, f.injected.inactive_harvester);
            assert_eq!(rep.outlier_3sigma, f.injected.outlier_3sigma);
            assert_eq!(rep.removed(), f.injected.total());
            assert_eq!(kept.len(), f.descriptor.grid.len());
        }
    }

    #[test]
    fn noiseless_latent_is_recovered_exactly() {
        let cfg = SynthConfig {
            noise_sd: 0.0,
            ..small(2)
        };
        for f in generate_fields(&cfg).unwrap() {
            let (kept, _) = clean_yield_points(&f.points, &CleanRules::default()).unwrap();
            let y = rasterize_yield(&kept, &f.descriptor.grid, CellAggregation::Mean).unwrap();
            let t: Vec<f64> = (0..y.grid().len()).map(|i| y.at(i).unwrap() as f64).collect();
            let r = r2(&t, &f.latent).unwrap();
            assert!((r - 1.0).abs() < 1e-9, "{r}");
        }
    }

    #[test]
    fn bayes_r2_matches_noise_level() {
        let cfg = SynthConfig {
            n_farms: 2,
            fields_per_farm: 4,
            field_cols: 40,
            field_rows: 40,
            noise_sd: 0.6,
            seed: 3,
            ..SynthConfig::default()
        };
        let fields = generate_fields(&cfg).unwrap();
        let (mut t, mut l) = (Vec::new(), Vec::new());
        for f in &fields {
            let (kept, _) = clean_yield_points(&f.points, &CleanRules::default()).unwrap();
            let y = rasterize_yield(&kept, &f.descriptor.grid, CellAggregation::Mean).unwrap();
            for (i, v) in f.latent.iter().enumerate() {
                t.push(y.at(i).unwrap() as f64);
                l.push(*v);
            }
        }
        assert!(t.len() >= 10_000);
        let (_, sl) = mean_sd(&l);
        let bayes = sl * sl / (sl * sl + 0.36);
        let got = r2(&t, &l).unwrap();
        assert!((got - bayes).abs() < 0.02, "oracle {got} vs closed form {bayes}");
    }

    #[test]
    fn full_cloud_cover_masks_everything() {
        let cfg = SynthConfig {
            cloud_prob: 1.0,
            ..small(6)
        };
        let f = &generate_fields(&cfg).unwrap()[0];
        let err = composite(&f.scenes, &f.descriptor.season, &CompositeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::AllTimestepsMasked));
    }

    #[test]
    fn phenology_shape() {
        let s = SeasonWindow::new("2020-10-05".parse().unwrap(), "2021-07-20".parse().unwrap()).unwrap();
        let peak: NaiveDate = "2021-05-15".parse().unwrap();
        assert_eq!(phenology("2020-09-20".parse().unwrap(), &s, peak), 0.0);
        assert!((phenology(peak, &s, peak) - 1.0).abs() < 1e-12);
        assert!(phenology("2021-01-10".parse().unwrap(), &s, peak) > 0.1);
        assert!(phenology("2021-07-19".parse().unwrap(), &s, peak) < 0.1);
    }

    #[test]
    fn bad_config() {
        let mut c = small(0);
        c.cloud_prob = 1.5;
        assert!(c.validate().is_err());
        c = small(0);
        c.n_farms = 0;
        assert!(c.validate().is_err());
    }
}
