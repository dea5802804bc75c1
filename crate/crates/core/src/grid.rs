//! Planar raster frames.
//!
//! A [`GeoGrid`] is an axis-aligned frame whose origin sits on a multiple of its
//! cell size. Rows are counted from the northern edge. Cell membership is
//! half-open: a point on a cell's east or north boundary belongs to the
//! neighbouring cell, so every point inside the extent maps to exactly one cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cell size of every field-level raster (yield, Sentinel-2, fused products).
pub const FIELD_CELL_SIZE: f64 = 10.0;

/// Relative tolerance used when checking that coordinates sit on the lattice.
const SNAP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid")]
pub struct GeoGrid {
    crs_id: String,
    x_min: f64,
    y_min: f64,
    cell_size: f64,
    cols: usize,
    rows: usize,
}

#[derive(Deserialize)]
struct RawGrid {
    crs_id: String,
    x_min: f64,
    y_min: f64,
    cell_size: f64,
    cols: usize,
    rows: usize,
}

impl TryFrom<RawGrid> for GeoGrid {
    type Error = Error;

    fn try_from(r: RawGrid) -> Result<Self> {
        GeoGrid::new(r.crs_id, r.x_min, r.y_min, r.cell_size, r.cols, r.rows)
    }
}

fn on_lattice(v: f64, cell: f64) -> bool {
    let q = v / cell;
    (q - q.round()).abs() <= SNAP_EPS * q.abs().max(1.0)
}

impl GeoGrid {
    pub fn new(
        crs_id: impl Into<String>,
        x_min: f64,
        y_min: f64,
        cell_size: f64,
        cols: usize,
        rows: usize,
    ) -> Result<Self> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::InvalidGrid(format!("cell size {cell_size} must be positive")));
        }
        if cols == 0 || rows == 0 {
            return Err(Error::InvalidGrid(format!("empty grid {cols}x{rows}")));
        }
        if !(x_min.is_finite() && y_min.is_finite()) {
            return Err(Error::InvalidGrid("non-finite origin".into()));
        }
        if !on_lattice(x_min, cell_size) || !on_lattice(y_min, cell_size) {
            return Err(Error::InvalidGrid(format!(
                "origin ({x_min}, {y_min}) is not a multiple of cell size {cell_size}"
            )));
        }
        Ok(GeoGrid {
            crs_id: crs_id.into(),
            x_min,
            y_min,
            cell_size,
            cols,
            rows,
        })
    }

    pub fn crs_id(&self) -> &str {
        &self.crs_id
    }
    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_min + self.cols as f64 * self.cell_size
    }
    pub fn y_max(&self) -> f64 {
        self.y_min + self.rows as f64 * self.cell_size
    }
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn len(&self) -> usize {
        self.cols * self.rows
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(x_min, y_min, x_max, y_max)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        (self.x_min, self.y_min, self.x_max(), self.y_max())
    }

    /// Row-major linear index of `(col, row)`.
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.cols + col
    }

    /// World coordinates of the centre of `(col, row)`.
    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        let x = self.x_min + (col as f64 + 0.5) * self.cell_size;
        let y = self.y_max() - (row as f64 + 0.5) * self.cell_size;
        (x, y)
    }

    /// Locates the cell containing `(x, y)`; `None` outside the extent.
    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        let c = ((x - self.x_min) / self.cell_size).floor();
        let from_south = ((y - self.y_min) / self.cell_size).floor();
        if c < 0.0 || from_south < 0.0 || c >= self.cols as f64 || from_south >= self.rows as f64 {
            return None;
        }
        let row = self.rows - 1 - from_south as usize;
        Some((c as usize, row))
    }

    /// Same frame, CRS label and size; used to compare rasters before fusing.
    pub fn same_frame(&self, other: &GeoGrid) -> bool {
        self.crs_id == other.crs_id
            && self.cols == other.cols
            && self.rows == other.rows
            && (self.cell_size - other.cell_size).abs() <= SNAP_EPS * self.cell_size
            && (self.x_min - other.x_min).abs() <= SNAP_EPS * self.cell_size.max(self.x_min.abs())
            && (self.y_min - other.y_min).abs() <= SNAP_EPS * self.cell_size.max(self.y_min.abs())
    }

    /// Whether the two extents share any area.
    pub fn overlaps(&self, other: &GeoGrid) -> bool {
        self.x_min < other.x_max()
            && other.x_min < self.x_max()
            && self.y_min < other.y_max()
            && other.y_min < self.y_max()
    }
}

/// Smallest grid with the given cell size whose lattice-aligned extent covers
/// the bounding box. The origin is snapped down and the extent up.
pub fn snap_grid(
    crs_id: impl Into<String>,
    bbox: (f64, f64, f64, f64),
    cell_size: f64,
) -> Result<GeoGrid> {
    let (x_min, y_min, x_max, y_max) = bbox;
    let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
    if !finite || x_max <= x_min || y_max <= y_min {
        return Err(Error::DegenerateBbox {
            x_min,
            y_min,
            x_max,
            y_max,
        });
    }
    if !(cell_size.is_finite() && cell_size > 0.0) {
        return Err(Error::InvalidGrid(format!("cell size {cell_size} must be positive")));
    }
    let snap_down = |v: f64| {
        let q = v / cell_size;
        // absorb representation error just below a lattice line
        let q = if (q - q.round()).abs() <= SNAP_EPS * q.abs().max(1.0) {
            q.round()
        } else {
            q.floor()
        };
        q * cell_size
    };
    let count = |lo: f64, hi: f64| {
        let q = (hi - lo) / cell_size;
        let n = if (q - q.round()).abs() <= SNAP_EPS * q.abs().max(1.0) {
            q.round()
        } else {
            q.ceil()
        };
        (n as usize).max(1)
    };
    let gx = snap_down(x_min);
    let gy = snap_down(y_min);
    GeoGrid::new(crs_id, gx, gy, cell_size, count(gx, x_max), count(gy, y_max))
}
