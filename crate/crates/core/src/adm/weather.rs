//! Daily field-level weather summed (or averaged) between selected scene dates.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SeasonWindow;
use crate::s2::{SceneSeries, TIMESTEPS};

pub const WEATHER_FEATURES: [&str; 4] = ["tmin_c", "tmax_c", "tmean_c", "precip_mm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherDaily {
    pub field_id: String,
    pub date: NaiveDate,
    pub tmin_c: f64,
    pub tmax_c: f64,
    pub tmean_c: f64,
    pub precip_mm: f64,
}

impl WeatherDaily {
    pub fn validate(&self) -> Result<()> {
        if !(self.tmin_c <= self.tmean_c && self.tmean_c <= self.tmax_c) {
            return Err(Error::Adm(format!(
                "{} {}: temperatures out of order (min {}, mean {}, max {})",
                self.field_id, self.date, self.tmin_c, self.tmean_c, self.tmax_c
            )));
        }
        if !(self.precip_mm >= 0.0) {
            return Err(Error::Adm(format!(
                "{} {}: negative precipitation {}",
                self.field_id, self.date, self.precip_mm
            )));
        }
        Ok(())
    }

    fn vars(&self) -> [f64; 4] {
        [self.tmin_c, self.tmax_c, self.tmean_c, self.precip_mm]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeatherAggregation {
    /// Literal summation of every variable over the interval.
    #[default]
    Sum,
    /// Per-day mean over the interval.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherAggregate {
    /// `[tmin, tmax, tmean, precip]` per timestep.
    pub values: Vec<[f64; 4]>,
    pub coverage: Vec<bool>,
}

/// Aggregates daily weather for each unmasked timestep over `(previous date, selected date]`,
/// where the previous date is the prior unmasked timestep's scene or the seeding date.
pub fn aggregate_weather(
    daily: &[WeatherDaily],
    series: &SceneSeries,
    season: &SeasonWindow,
    mode: WeatherAggregation,
) -> Result<WeatherAggregate> {
    let mut by_date: BTreeMap<NaiveDate, &WeatherDaily> = BTreeMap::new();
    for d in daily {
        d.validate()?;
        if by_date.insert(d.date, d).is_some() {
            return Err(Error::Adm(format!("duplicate weather record for {}", d.date)));
        }
    }
    let mut values = vec![[0.0; 4]; TIMESTEPS];
    let mut coverage = vec![false; TIMESTEPS];
    let mut prev = season.seeding_date();
    for t in series.unmasked() {
        let date = series.selected_date(t).expect("unmasked timestep has a scene");
        let mut acc = [0.0; 4];
        let mut days = 0usize;
        let mut missing = Vec::new();
        let mut d = prev.succ_opt().unwrap();
        while d <= date {
            match by_date.get(&d) {
                Some(w) => {
                    for (a, v) in acc.iter_mut().zip(w.vars()) {
                        *a += v;
                    }
                    days += 1;
                }
                None => missing.push(d),
            }
            d = d.succ_opt().unwrap();
        }
        if !missing.is_empty() {
            return Err(Error::WeatherGap(describe_gaps(&missing)));
        }
        if mode == WeatherAggregation::Mean && days > 0 {
            for a in acc.iter_mut() {
                *a /= days as f64;
            }
        }
        values[t] = acc;
        coverage[t] = true;
        prev = date;
    }
    Ok(WeatherAggregate { values, coverage })
}

/// Collapses missing dates into inclusive ranges, e.g. `2021-03-02..2021-03-05`.
fn describe_gaps(missing: &[NaiveDate]) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut start = missing[0];
    let mut end = missing[0];
    for d in &missing[1..] {
        if Some(*d) == end.succ_opt() {
            end = *d;
        } else {
            out.push(range(start, end));
            start = *d;
            end = *d;
        }
    }
    out.push(range(start, end));
    out.join(", ")
}

fn range(a: NaiveDate, b: NaiveDate) -> String {
    if a == b {
        a.to_string()
    } else {
        format!("{a}..{b}")
    }
}

pub const WEATHER_CSV_HEADER: [&str; 6] =
    ["field_id", "date", "tmin_c", "tmax_c", "tmean_c", "precip_mm"];

pub fn read_weather_csv(reader: impl Read) -> Result<Vec<WeatherDaily>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != WEATHER_CSV_HEADER {
        return Err(Error::Adm(format!(
            "unexpected weather CSV header: {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_weather_csv_file(path: impl AsRef<Path>) -> Result<Vec<WeatherDaily>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_weather_csv(std::io::BufReader::new(f))
}

pub fn write_weather_csv(w: impl std::io::Write, rows: &[WeatherDaily]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<weather csv>", e))?;
    Ok(())
}
