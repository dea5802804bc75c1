//! Monthly Sentinel-2 compositing.
//!
//! Each field gets 24 monthly timesteps spanning the calendar year before the
//! harvest year and the harvest year itself. Per month the clearest scene is
//! kept; months without a usable scene, and months that do not overlap the
//! seeding-to-harvest window, are masked.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgr;
use crate::field::SeasonWindow;
use crate::raster::Raster;

pub const TIMESTEPS: usize = 24;

/// Spectral bands in storage and feature order.
pub const S2_BANDS: [&str; 12] = [
    "B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B11", "B12",
];

/// Name of the 0/1 clear-observation band in scene files.
pub const VALID_BAND: &str = "valid";

/// Scenes whose clear fraction is below this are treated as absent.
pub const DEFAULT_MIN_SCORE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn of(d: NaiveDate) -> Self {
        YearMonth {
            year: d.year(),
            month: d.month(),
        }
    }
    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("valid month")
    }
    pub fn last_day(self) -> NaiveDate {
        let (y, m) = if self.month == 12 {
            (self.year + 1, 1)
        } else {
            (self.year, self.month + 1)
        };
        NaiveDate::from_ymd_opt(y, m, 1).expect("valid month").pred_opt().unwrap()
    }
    pub fn days(self) -> i64 {
        (self.last_day() - self.first_day()).num_days() + 1
    }
    pub fn contains(self, d: NaiveDate) -> bool {
        YearMonth::of(d) == self
    }
}

impl std::fmt::Display for YearMonth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// The 24 months of `harvest_year - 1` and `harvest_year`, January first.
pub fn build_intervals(harvest_date: NaiveDate) -> Vec<YearMonth> {
    let y0 = harvest_date.year() - 1;
    (0..TIMESTEPS as u32)
        .map(|i| YearMonth {
            year: y0 + (i / 12) as i32,
            month: i % 12 + 1,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    date: NaiveDate,
    bands: Raster,
    valid: Vec<bool>,
}

impl Scene {
    pub fn new(date: NaiveDate, bands: Raster, valid: Vec<bool>) -> Result<Self> {
        if bands.band_names() != S2_BANDS {
            return Err(Error::Composite(format!(
                "scene {date} must carry bands {:?}, got {:?}",
                S2_BANDS,
                bands.band_names()
            )));
        }
        if valid.len() != bands.grid().len() {
            return Err(Error::Composite(format!(
                "scene {date}: valid mask has {} cells, grid has {}",
                valid.len(),
                bands.grid().len()
            )));
        }
        Ok(Scene { date, bands, valid })
    }

    /// Splits a 13-band scene file raster (12 spectral + `valid`).
    pub fn from_file_raster(date: NaiveDate, raster: &Raster) -> Result<Self> {
        let vb = raster
            .band_index(VALID_BAND)
            .ok_or_else(|| Error::Composite(format!("scene {date} has no '{VALID_BAND}' band")))?;
        let valid = (0..raster.grid().len())
            .map(|i| raster.at(vb, i).is_some_and(|v| v > 0.5))
            .collect();
        Scene::new(date, raster.select_bands(&S2_BANDS)?, valid)
    }

    pub fn to_file_raster(&self) -> Result<Raster> {
        let v = self.valid.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        let valid = Raster::new(self.bands.grid().clone(), vec![VALID_BAND.into()], v)?;
        Raster::stack(&[self.bands.clone(), valid])
    }

    pub fn date(&self) -> NaiveDate {
        self.date
    }
    pub fn bands(&self) -> &Raster {
        &self.bands
    }
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// A pixel is usable when it is clear and every band holds data.
    pub fn pixel_usable(&self, idx: usize) -> bool {
        self.valid[idx] && (0..self.bands.n_bands()).all(|b| self.bands.at(b, idx).is_some())
    }
}

/// Fraction of field pixels that are clear in `scene`.
pub fn score_scene(scene: &Scene) -> f64 {
    let n = scene.valid.len();
    if n == 0 {
        return 0.0;
    }
    scene.valid.iter().filter(|v| **v).count() as f64 / n as f64
}

/// Twice the distance in days from the month's midpoint; integer so ties are exact.
fn midpoint_distance(ym: YearMonth, d: NaiveDate) -> i64 {
    let offset = (d - ym.first_day()).num_days();
    (2 * offset - (ym.days() - 1)).abs()
}

/// Ordering of candidate scenes within a month; `Less` means `a` is preferred.
fn prefer(ym: YearMonth, a: (&Scene, f64), b: (&Scene, f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| midpoint_distance(ym, a.0.date).cmp(&midpoint_distance(ym, b.0.date)))
        .then_with(|| a.0.date.cmp(&b.0.date))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedScene {
    pub date: NaiveDate,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSeries {
    pub intervals: Vec<YearMonth>,
    pub selected: Vec<Option<SelectedScene>>,
    /// `true` = usable timestep.
    pub timestep_mask: Vec<bool>,
}

impl SceneSeries {
    pub fn selected_date(&self, t: usize) -> Option<NaiveDate> {
        if self.timestep_mask[t] {
            self.selected[t].as_ref().map(|s| s.date)
        } else {
            None
        }
    }

    pub fn unmasked(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.intervals.len()).filter(|t| self.timestep_mask[*t])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositeConfig {
    pub min_score: f64,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        CompositeConfig {
            min_score: DEFAULT_MIN_SCORE,
        }
    }
}

/// Whether month `ym` overlaps the season at all.
pub fn in_season(ym: YearMonth, season: &SeasonWindow) -> bool {
    ym.last_day() >= season.seeding_date() && ym.first_day() <= season.harvest_date()
}

/// Selects the best scene per month and masks out-of-season or empty months.
///
/// Scenes outside the 24-month window are rejected; scenes outside the
/// seeding-to-harvest window never compete.
pub fn composite(
    scenes: &[Scene],
    season: &SeasonWindow,
    cfg: &CompositeConfig,
) -> Result<SceneSeries> {
    let intervals = build_intervals(season.harvest_date());
    let (first, last) = (intervals[0].first_day(), intervals[TIMESTEPS - 1].last_day());
    if let Some(s) = scenes.iter().find(|s| s.date < first || s.date > last) {
        return Err(Error::Composite(format!(
            "scene dated {} lies outside the modelled window {first}..{last}",
            s.date
        )));
    }

    let mut selected = vec![None; TIMESTEPS];
    let mut mask = vec![false; TIMESTEPS];
    for (t, ym) in intervals.iter().copied().enumerate() {
        if !in_season(ym, season) {
            continue;
        }
        let best = scenes
            .iter()
            .filter(|s| ym.contains(s.date) && season.contains(s.date))
            .map(|s| (s, score_scene(s)))
            .filter(|(_, score)| *score >= cfg.min_score)
            .min_by(|a, b| prefer(ym, *a, *b));
        if let Some((s, score)) = best {
            selected[t] = Some(SelectedScene {
                date: s.date,
                score,
            });
            mask[t] = true;
        }
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::AllTimestepsMasked);
    }
    Ok(SceneSeries {
        intervals,
        selected,
        timestep_mask: mask,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneIndex {
    dates: Vec<NaiveDate>,
}

fn scene_file(dir: &Path, date: NaiveDate) -> std::path::PathBuf {
    dir.join(format!("{}.fgr", date.format("%Y-%m-%d")))
}

/// Writes `<dir>/<YYYY-MM-DD>.fgr` per scene plus `<dir>/scenes.json`.
pub fn write_scene_dir(dir: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in scenes {
        fgr::write(scene_file(dir, s.date), &s.to_file_raster()?)?;
    }
    let index = SceneIndex {
        dates: scenes.iter().map(|s| s.date).collect(),
    };
    let path = dir.join("scenes.json");
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))
}

pub fn read_scene_dir(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let path = dir.join("scenes.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: SceneIndex = serde_json::from_slice(&bytes)?;
    index
        .dates
        .into_iter()
        .map(|d| Scene::from_file_raster(d, &fgr::read(scene_file(dir, d))?))
        .collect()
}
