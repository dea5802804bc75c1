//! Additional data modalities: soil, terrain and weather, brought onto the
//! 10 m field grid.

pub mod resample;
pub mod terrain;
pub mod weather;

use crate::error::{Error, Result};
use crate::grid::GeoGrid;
use crate::raster::Raster;

pub use resample::bicubic_upsample;
pub use terrain::{curvature, fill_depressions, horn_slope_aspect, slope_aspect, terrain_stack, twi, TERRAIN_BANDS};
pub use weather::{aggregate_weather, WeatherAggregate, WeatherAggregation, WeatherDaily};

pub const SOIL_PROPERTIES: [&str; 8] =
    ["cec", "cfvo", "nitrogen", "phh2o", "sand", "silt", "soc", "clay"];
pub const SOIL_DEPTHS: [&str; 3] = ["0-5", "5-15", "15-30"];

/// `<property>_<depth>` in property-major order (24 names).
pub fn soil_band_names() -> Vec<String> {
    SOIL_PROPERTIES
        .iter()
        .flat_map(|p| SOIL_DEPTHS.iter().map(move |d| format!("{p}_{d}")))
        .collect()
}

fn check_bands(r: &Raster, expected: &[String], what: &str) -> Result<()> {
    if r.band_names() != expected {
        return Err(Error::Adm(format!(
            "{what} raster must carry bands {expected:?}, got {:?}",
            r.band_names()
        )));
    }
    Ok(())
}

/// Native-resolution soil stack upsampled onto the field grid.
pub fn soil_to_field(soil: &Raster, field: &GeoGrid) -> Result<Raster> {
    check_bands(soil, &soil_band_names(), "soil")?;
    bicubic_upsample(soil, field)
}

/// Terrain derivatives computed on the native DEM, then upsampled.
pub fn terrain_to_field(dem: &Raster, field: &GeoGrid) -> Result<Raster> {
    let stack = terrain_stack(dem)?;
    bicubic_upsample(&stack, field)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soil_names() {
        let n = soil_band_names();
        assert_eq!(n.len(), 24);
        assert_eq!(n[0], "cec_0-5");
        assert_eq!(n[2], "cec_15-30");
        assert_eq!(n[3], "cfvo_0-5");
        assert_eq!(n[23], "clay_15-30");
    }

    #[test]
    fn soil_band_order_enforced() {
        let g = GeoGrid::new("t", 0.0, 0.0, 250.0, 2, 2).unwrap();
        let mut names = soil_band_names();
        names.swap(0, 1);
        let r = Raster::new(g, names, vec![1.0; 96]).unwrap();
        let field = GeoGrid::new("t", 100.0, 100.0, 10.0, 5, 5).unwrap();
        assert!(soil_to_field(&r, &field).is_err());
    }
}
