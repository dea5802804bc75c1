//! Cubic-convolution resampling of coarse rasters onto a finer grid.

use crate::error::{Error, Result};
use crate::grid::GeoGrid;
use crate::raster::Raster;

/// Keys' kernel parameter.
pub const KEYS_A: f64 = -0.5;

/// Keys cubic-convolution kernel.
pub fn keys_kernel(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps (clamped indices) and weights for a fractional position.
fn taps(pos: f64, n: usize) -> ([usize; 4], [f64; 4]) {
    let base = pos.floor();
    let t = pos - base;
    let base = base as isize;
    let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
    (
        [clamp(base - 1), clamp(base), clamp(base + 1), clamp(base + 2)],
        [
            keys_kernel(t + 1.0),
            keys_kernel(t),
            keys_kernel(1.0 - t),
            keys_kernel(2.0 - t),
        ],
    )
}

/// Resamples every band of `src` at the cell centres of `dst_grid`.
///
/// The 4×4 support is clamped at the source edges. A destination sample is
/// nodata as soon as any cell of its support is.
pub fn bicubic_upsample(src: &Raster, dst_grid: &GeoGrid) -> Result<Raster> {
    let sg = src.grid();
    if sg.cols() < 2 || sg.rows() < 2 {
        return Err(Error::SourceTooSmall {
            cols: sg.cols(),
            rows: sg.rows(),
        });
    }
    if sg.cell_size() < dst_grid.cell_size() {
        return Err(Error::Adm(format!(
            "source cell size {} is finer than destination {}",
            sg.cell_size(),
            dst_grid.cell_size()
        )));
    }
    if !sg.overlaps(dst_grid) {
        return Err(Error::Adm("source and destination grids do not overlap".into()));
    }

    let col_taps: Vec<_> = (0..dst_grid.cols())
        .map(|c| {
            let (x, _) = dst_grid.cell_center(c, 0);
            taps((x - sg.x_min()) / sg.cell_size() - 0.5, sg.cols())
        })
        .collect();
    let row_taps: Vec<_> = (0..dst_grid.rows())
        .map(|r| {
            let (_, y) = dst_grid.cell_center(0, r);
            taps((sg.y_max() - y) / sg.cell_size() - 0.5, sg.rows())
        })
        .collect();

    Raster::from_fn(dst_grid.clone(), src.band_names().to_vec(), |b, c, r| {
        let (ci, cw) = &col_taps[c];
        let (ri, rw) = &row_taps[r];
        let mut acc = 0.0;
        for (j, &sr) in ri.iter().enumerate() {
            let mut row_acc = 0.0;
            for (i, &sc) in ci.iter().enumerate() {
                let v = src.get(b, sc, sr)?;
                row_acc += cw[i] * v as f64;
            }
            acc += rw[j] * row_acc;
        }
        Some(acc as f32)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(x0: f64, y0: f64, cell: f64, cols: usize, rows: usize) -> GeoGrid {
        GeoGrid::new("t", x0, y0, cell, cols, rows).unwrap()
    }

    #[test]
    fn kernel_shape() {
        assert_eq!(keys_kernel(0.0), 1.0);
        assert_eq!(keys_kernel(1.0), 0.0);
        assert_eq!(keys_kernel(2.0), 0.0);
        assert_eq!(keys_kernel(-0.5), keys_kernel(0.5));
        // partition of unity at an arbitrary phase
        let t = 0.3;
        let s: f64 = [t + 1.0, t, 1.0 - t, 2.0 - t].iter().map(|x| keys_kernel(*x)).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn linear_ramp_at_half_position() {
        // direct kernel evaluation: values 0,1,2,3 with taps at distance 1.5, 0.5, 0.5, 1.5
        let direct: f64 = [0.0, 1.0, 2.0, 3.0]
            .iter()
            .zip([1.5, 0.5, 0.5, 1.5])
            .map(|(v, x)| v * keys_kernel(x))
            .sum();
        assert!((direct - 1.5).abs() < 1e-12);

        // same through the raster path: 4x2 source at 30 m, sample centred between cols 1 and 2
        let src = Raster::from_fn(grid(0.0, 0.0, 30.0, 4, 2), vec!["v".into()], |_, c, _| {
            Some(c as f32)
        })
        .unwrap();
        let dst = grid(50.0, 20.0, 10.0, 1, 1); // centre x = 55 m → position 1.333
        let out = bicubic_upsample(&src, &dst).unwrap();
        let pos: f64 = 55.0 / 30.0 - 0.5;
        assert!((out.get(0, 0, 0).unwrap() as f64 - pos).abs() < 1e-6);
    }

    #[test]
    fn node_exact_and_constant() {
        let src = Raster::from_fn(grid(0.0, 0.0, 30.0, 5, 5), vec!["v".into(), "k".into()], |b, c, r| {
            Some(if b == 0 { (c * 7 + r * 3) as f32 * 0.37 } else { 4.25 })
        })
        .unwrap();
        // 10 m grid whose centres at cols 1, 4, 7, ... coincide with source centres
        let dst = grid(0.0, 0.0, 10.0, 15, 15);
        let out = bicubic_upsample(&src, &dst).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let v = out.get(0, 3 * c + 1, 3 * r + 1).unwrap();
                assert!((v - src.get(0, c, r).unwrap()).abs() <= 1e-6);
            }
        }
        assert!(out.band(1).iter().all(|v| (*v - 4.25).abs() < 1e-6));
    }

    #[test]
    fn nodata_propagates_through_support() {
        let src = Raster::from_fn(grid(0.0, 0.0, 30.0, 6, 6), vec!["v".into()], |_, c, r| {
            (c != 0 || r != 0).then_some(1.0)
        })
        .unwrap();
        let out = bicubic_upsample(&src, &grid(0.0, 0.0, 10.0, 18, 18)).unwrap();
        assert_eq!(out.get(0, 0, 0), None);
        assert_eq!(out.get(0, 17, 17), Some(1.0));
    }

    #[test]
    fn errors() {
        let small = Raster::new(grid(0.0, 0.0, 30.0, 1, 3), vec!["v".into()], vec![0.0; 3]).unwrap();
        assert!(matches!(
            bicubic_upsample(&small, &grid(0.0, 0.0, 10.0, 2, 2)),
            Err(Error::SourceTooSmall { cols: 1, rows: 3 })
        ));
        let src = Raster::new(grid(0.0, 0.0, 30.0, 2, 2), vec!["v".into()], vec![0.0; 4]).unwrap();
        assert!(bicubic_upsample(&src, &grid(1000.0, 1000.0, 10.0, 2, 2)).is_err());
        assert!(bicubic_upsample(&src, &grid(0.0, 0.0, 60.0, 1, 1)).is_err());
    }
}
