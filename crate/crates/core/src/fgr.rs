//! FGR raster files.
//!
//! ```text
//! "FGR1" | u32 LE header length | UTF-8 JSON header | f32 LE payload
//! ```
//!
//! The header carries `{crs_id, x_min, y_min, cell_size, cols, rows, nodata,
//! band_names}`; the payload is band-sequential and row-major with row 0 at the
//! northern edge. Nodata cells are written as the sentinel `-9999.0`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GeoGrid;
use crate::raster::{Raster, NODATA};

pub const FGR_MAGIC: &[u8; 4] = b"FGR1";

#[derive(Debug, Serialize, Deserialize)]
struct FgrHeader {
    crs_id: String,
    x_min: f64,
    y_min: f64,
    cell_size: f64,
    cols: usize,
    rows: usize,
    nodata: f32,
    band_names: Vec<String>,
}

/// Splits a framed file into its JSON header bytes and payload.
pub(crate) fn split_frame<'a>(
    format: &'static str,
    magic: &[u8; 4],
    bytes: &'a [u8],
) -> Result<(&'a [u8], &'a [u8])> {
    let bad = |reason: String| Error::Format { format, reason };
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(bad("bad magic bytes".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + len {
        return Err(bad(format!("header length {len} exceeds file size")));
    }
    Ok((&bytes[8..8 + len], &bytes[8 + len..]))
}

pub(crate) fn frame(magic: &[u8; 4], header: &[u8], payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + header.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out
}

pub(crate) fn read_f32s(format: &'static str, bytes: &[u8], n: usize) -> Result<Vec<f32>> {
    if bytes.len() < n * 4 {
        return Err(Error::Format {
            format,
            reason: format!("payload holds {} bytes, need {}", bytes.len(), n * 4),
        });
    }
    Ok(bytes[..n * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode(raster: &Raster) -> Result<Vec<u8>> {
    let g = raster.grid();
    let header = FgrHeader {
        crs_id: g.crs_id().to_string(),
        x_min: g.x_min(),
        y_min: g.y_min(),
        cell_size: g.cell_size(),
        cols: g.cols(),
        rows: g.rows(),
        nodata: NODATA,
        band_names: raster.band_names().to_vec(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = frame(FGR_MAGIC, &header, raster.values().len() * 4);
    for (v, m) in raster.values().iter().zip(raster.nodata_mask()) {
        let v = if *m { NODATA } else { *v };
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let (header, payload) = split_frame("FGR", FGR_MAGIC, bytes)?;
    let h: FgrHeader = serde_json::from_slice(header)?;
    let grid = GeoGrid::new(h.crs_id, h.x_min, h.y_min, h.cell_size, h.cols, h.rows)?;
    let n = h.band_names.len() * grid.len();
    if payload.len() != n * 4 {
        return Err(Error::Format {
            format: "FGR",
            reason: format!("payload holds {} bytes, expected {}", payload.len(), n * 4),
        });
    }
    let values = read_f32s("FGR", payload, n)?;
    let mask = values.iter().map(|v| !v.is_finite() || *v == h.nodata).collect();
    Raster::with_mask(grid, h.band_names, values, mask)
}

pub fn write(path: impl AsRef<Path>, raster: &Raster) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(raster)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let grid = GeoGrid::new("epsg:32632", 0.0, 10.0, 10.0, 2, 1).unwrap();
        let r = Raster::new(grid, vec!["yield_t_ha".into()], vec![1.5, f32::NAN]).unwrap();
        let bytes = encode(&r).unwrap();
        assert_eq!(&bytes[..4], b"FGR1");
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + len]).unwrap();
        assert_eq!(
            header,
            r#"{"crs_id":"epsg:32632","x_min":0.0,"y_min":10.0,"cell_size":10.0,"cols":2,"rows":1,"nodata":-9999.0,"band_names":["yield_t_ha"]}"#
        );
        let payload = &bytes[8 + len..];
        assert_eq!(payload, [1.5f32.to_le_bytes(), (-9999.0f32).to_le_bytes()].concat());
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"FGR0\0\0\0\0").is_err());
        assert!(decode(b"FGR1\xff\0\0\0{}").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(cols in 1usize..6, rows in 1usize..6, bands in 1usize..4, seed in any::<u64>()) {
            let grid = GeoGrid::new("p", 30.0, -60.0, 30.0, cols, rows).unwrap();
            let names = (0..bands).map(|b| format!("b{b}")).collect();
            let mut s = seed;
            let r = Raster::from_fn(grid, names, |_, _, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                if s >> 60 == 0 { None } else { Some((s >> 40) as f32 / 1e3 - 8000.0) }
            }).unwrap();
            prop_assert_eq!(decode(&encode(&r).unwrap()).unwrap(), r);
        }
    }
}
