use crate::error::{Error, Result};
use crate::grid::GeoGrid;

/// Sentinel written for nodata cells in on-disk rasters.
pub const NODATA: f32 = -9999.0;

/// Band-sequential, row-major raster of 32-bit floats with a per-band nodata mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    grid: GeoGrid,
    band_names: Vec<String>,
    values: Vec<f32>,
    nodata: Vec<bool>,
}

impl Raster {
    /// Builds a raster; non-finite values and the [`NODATA`] sentinel are masked.
    pub fn new(grid: GeoGrid, band_names: Vec<String>, values: Vec<f32>) -> Result<Self> {
        let nodata = values.iter().map(|v| !v.is_finite() || *v == NODATA).collect();
        Self::with_mask(grid, band_names, values, nodata)
    }

    /// Builds a raster from an explicit mask (`true` = nodata). Non-finite
    /// values are masked regardless of what the mask says.
    pub fn with_mask(
        grid: GeoGrid,
        band_names: Vec<String>,
        values: Vec<f32>,
        mut nodata: Vec<bool>,
    ) -> Result<Self> {
        let expected = band_names.len() * grid.len();
        if band_names.is_empty() {
            return Err(Error::InvalidRaster("raster needs at least one band".into()));
        }
        if values.len() != expected || nodata.len() != expected {
            return Err(Error::InvalidRaster(format!(
                "{} bands x {} cells needs {expected} values, got {} values / {} mask entries",
                band_names.len(),
                grid.len(),
                values.len(),
                nodata.len()
            )));
        }
        for (m, v) in nodata.iter_mut().zip(&values) {
            *m |= !v.is_finite();
        }
        Ok(Raster {
            grid,
            band_names,
            values,
            nodata,
        })
    }

    /// Builds a raster by evaluating `f(band, col, row)`; `None` marks nodata.
    pub fn from_fn(
        grid: GeoGrid,
        band_names: Vec<String>,
        mut f: impl FnMut(usize, usize, usize) -> Option<f32>,
    ) -> Result<Self> {
        let n = grid.len();
        let mut values = Vec::with_capacity(band_names.len() * n);
        let mut mask = Vec::with_capacity(band_names.len() * n);
        for b in 0..band_names.len() {
            for r in 0..grid.rows() {
                for c in 0..grid.cols() {
                    match f(b, c, r) {
                        Some(v) => {
                            values.push(v);
                            mask.push(false);
                        }
                        None => {
                            values.push(NODATA);
                            mask.push(true);
                        }
                    }
                }
            }
        }
        Self::with_mask(grid, band_names, values, mask)
    }

    pub fn grid(&self) -> &GeoGrid {
        &self.grid
    }
    pub fn band_names(&self) -> &[String] {
        &self.band_names
    }
    pub fn n_bands(&self) -> usize {
        self.band_names.len()
    }
    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.band_names.iter().position(|b| b == name)
    }

    /// Raw payload of one band (nodata cells hold whatever was stored).
    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.grid.len();
        &self.values[b * n..(b + 1) * n]
    }
    pub fn band_mask(&self, b: usize) -> &[bool] {
        let n = self.grid.len();
        &self.nodata[b * n..(b + 1) * n]
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }
    pub fn nodata_mask(&self) -> &[bool] {
        &self.nodata
    }

    /// Value at linear cell index `idx` of band `b`, `None` for nodata.
    pub fn at(&self, b: usize, idx: usize) -> Option<f32> {
        let i = b * self.grid.len() + idx;
        (!self.nodata[i]).then_some(self.values[i])
    }

    pub fn get(&self, b: usize, col: usize, row: usize) -> Option<f32> {
        self.at(b, self.grid.index(col, row))
    }

    /// New raster holding only the named bands, in the given order.
    pub fn select_bands(&self, names: &[&str]) -> Result<Raster> {
        let n = self.grid.len();
        let mut values = Vec::with_capacity(names.len() * n);
        let mut mask = Vec::with_capacity(names.len() * n);
        for name in names {
            let b = self
                .band_index(name)
                .ok_or_else(|| Error::InvalidRaster(format!("band '{name}' not present")))?;
            values.extend_from_slice(self.band(b));
            mask.extend_from_slice(self.band_mask(b));
        }
        Raster::with_mask(
            self.grid.clone(),
            names.iter().map(|s| s.to_string()).collect(),
            values,
            mask,
        )
    }

    /// Concatenates the bands of rasters sharing one frame.
    pub fn stack(parts: &[Raster]) -> Result<Raster> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidRaster("nothing to stack".into()))?;
        let mut names = Vec::new();
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for p in parts {
            if !p.grid.same_frame(&first.grid) {
                return Err(Error::InvalidRaster("stacked rasters must share a grid".into()));
            }
            names.extend(p.band_names.iter().cloned());
            values.extend_from_slice(&p.values);
            mask.extend_from_slice(&p.nodata);
        }
        Raster::with_mask(first.grid.clone(), names, values, mask)
    }
}
