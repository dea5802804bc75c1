pub mod error;
pub mod fgr;
pub mod field;
pub mod grid;
pub mod raster;
pub mod yield_ingest;

pub use error::{Error, Result};
pub use field::{FieldDescriptor, SeasonWindow};
pub use grid::{snap_grid, GeoGrid, FIELD_CELL_SIZE};
pub use raster::{Raster, NODATA};
pub mod adm;
pub mod s2;
pub mod fusion;
pub mod models;
pub mod eval;
pub mod synth;
pub mod pipeline;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/grids.md")]
    mod grids {}
    #[doc = include_str!("../../../book/src/cleaning.md")]
    mod cleaning {}
    #[doc = include_str!("../../../book/src/terrain.md")]
    mod terrain {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
}
