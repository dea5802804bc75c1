use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GeoGrid;

/// Seeding-to-harvest window of one field. The harvest date anchors the
/// two-calendar-year series: it always falls in the second modelled year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSeason")]
pub struct SeasonWindow {
    seeding_date: NaiveDate,
    harvest_date: NaiveDate,
}

#[derive(Deserialize)]
struct RawSeason {
    seeding_date: NaiveDate,
    harvest_date: NaiveDate,
}

impl TryFrom<RawSeason> for SeasonWindow {
    type Error = Error;
    fn try_from(r: RawSeason) -> Result<Self> {
        SeasonWindow::new(r.seeding_date, r.harvest_date)
    }
}

impl SeasonWindow {
    pub fn new(seeding_date: NaiveDate, harvest_date: NaiveDate) -> Result<Self> {
        if seeding_date >= harvest_date {
            return Err(Error::InvalidGrid(format!(
                "season must have seeding {seeding_date} before harvest {harvest_date}"
            )));
        }
        Ok(SeasonWindow {
            seeding_date,
            harvest_date,
        })
    }
    pub fn seeding_date(&self) -> NaiveDate {
        self.seeding_date
    }
    pub fn harvest_date(&self) -> NaiveDate {
        self.harvest_date
    }
    /// Inclusive on both ends.
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.seeding_date <= d && d <= self.harvest_date
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub field_id: String,
    /// A farmer's operation, or a cluster of nearby fields when unknown.
    pub farm_id: String,
    pub crop: String,
    pub season: SeasonWindow,
    pub grid: GeoGrid,
}

impl FieldDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.field_id.is_empty() {
            return Err(Error::InvalidGrid("field_id must be non-empty".into()));
        }
        if self.farm_id.is_empty() {
            return Err(Error::InvalidGrid(format!(
                "field '{}' has an empty farm_id",
                self.field_id
            )));
        }
        Ok(())
    }
}

/// Checks descriptor invariants across a dataset (unique ids, non-empty farms).
pub fn validate_fields(fields: &[FieldDescriptor]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for f in fields {
        f.validate()?;
        if !seen.insert(f.field_id.as_str()) {
            return Err(Error::InvalidGrid(format!("duplicate field_id '{}'", f.field_id)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn season_order_enforced() {
        assert!(SeasonWindow::new(d("2021-07-15"), d("2020-10-05")).is_err());
        assert!(SeasonWindow::new(d("2021-07-15"), d("2021-07-15")).is_err());
        let s = SeasonWindow::new(d("2020-10-05"), d("2021-07-15")).unwrap();
        assert!(s.contains(d("2020-10-05")) && s.contains(d("2021-07-15")));
        assert!(!s.contains(d("2021-07-16")));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let grid = GeoGrid::new("t", 0.0, 0.0, 10.0, 2, 2).unwrap();
        let season = SeasonWindow::new(d("2020-10-05"), d("2021-07-15")).unwrap();
        let f = FieldDescriptor {
            field_id: "f1".into(),
            farm_id: "a".into(),
            crop: "wheat".into(),
            season,
            grid,
        };
        assert!(validate_fields(&[f.clone()]).is_ok());
        assert!(validate_fields(&[f.clone(), f.clone()]).is_err());
        let mut g = f;
        g.farm_id.clear();
        assert!(validate_fields(&[g]).is_err());
    }
}
