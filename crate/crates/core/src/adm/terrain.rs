//! Terrain derivatives on a single-band DEM: depression filling, Horn
//! slope/aspect, Zevenbergen–Thorne curvature and a D8 wetness index.
//!
//! Stencils use the 3×3 window lettered row-major from the north:
//!
//! ```text
//! a b c
//! d e f
//! g h i
//! ```
//!
//! Cells whose window leaves the raster or touches nodata get nodata.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const TERRAIN_BANDS: [&str; 5] = ["aspect", "curvature", "dem", "slope", "twi"];

/// Lower bound on tan(slope) in the wetness index.
pub const MIN_TAN_SLOPE: f64 = 0.001;

/// D8 neighbour offsets (dcol, drow) in N, NE, E, SE, S, SW, W, NW order.
pub const D8: [(isize, isize); 8] = [
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
];

/// Plain f64 view of a single-band raster.
struct Surface {
    cols: usize,
    rows: usize,
    z: Vec<Option<f64>>,
}

impl Surface {
    fn of(dem: &Raster) -> Result<Surface> {
        if dem.n_bands() != 1 {
            return Err(Error::Adm(format!("DEM must be single-band, got {}", dem.n_bands())));
        }
        let g = dem.grid();
        Ok(Surface {
            cols: g.cols(),
            rows: g.rows(),
            z: (0..g.len()).map(|i| dem.at(0, i).map(f64::from)).collect(),
        })
    }

    fn neighbour(&self, idx: usize, (dc, dr): (isize, isize)) -> Option<usize> {
        let c = (idx % self.cols) as isize + dc;
        let r = (idx / self.cols) as isize + dr;
        (c >= 0 && r >= 0 && (c as usize) < self.cols && (r as usize) < self.rows)
            .then(|| r as usize * self.cols + c as usize)
    }

    /// The 3×3 window a..i around `idx`, if complete.
    fn window(&self, idx: usize) -> Option<[f64; 9]> {
        let (c, r) = (idx % self.cols, idx / self.cols);
        if c == 0 || r == 0 || c + 1 >= self.cols || r + 1 >= self.rows {
            return None;
        }
        let mut w = [0.0; 9];
        for (k, slot) in w.iter_mut().enumerate() {
            let (dc, dr) = ((k % 3) as isize - 1, (k / 3) as isize - 1);
            *slot = self.z[self.neighbour(idx, (dc, dr))?]?;
        }
        Some(w)
    }

    /// Data cells on the raster border or next to nodata drain off the surface.
    fn is_outlet(&self, idx: usize) -> bool {
        D8.iter()
            .any(|d| self.neighbour(idx, *d).map_or(true, |n| self.z[n].is_none()))
    }
}

#[derive(PartialEq)]
struct Entry(f64, u64, usize);
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Priority-flood from the outlets. Returns the filled surface and, per cell,
/// the neighbour it was flooded from (`None` for outlets and nodata).
fn priority_flood(s: &Surface) -> (Vec<Option<f64>>, Vec<Option<usize>>) {
    let n = s.z.len();
    let mut filled = s.z.clone();
    let mut parent = vec![None; n];
    let mut seen = vec![false; n];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for i in 0..n {
        if let Some(z) = s.z[i] {
            if s.is_outlet(i) {
                seen[i] = true;
                heap.push(Reverse(Entry(z, seq, i)));
                seq += 1;
            }
        }
    }
    while let Some(Reverse(Entry(z, _, i))) = heap.pop() {
        for d in D8 {
            let Some(nb) = s.neighbour(i, d) else { continue };
            if seen[nb] {
                continue;
            }
            let Some(zn) = s.z[nb] else { continue };
            seen[nb] = true;
            let zf = zn.max(z);
            filled[nb] = Some(zf);
            parent[nb] = Some(i);
            heap.push(Reverse(Entry(zf, seq, nb)));
            seq += 1;
        }
    }
    (filled, parent)
}

fn to_raster(like: &Raster, name: &str, vals: &[Option<f64>]) -> Result<Raster> {
    let g = like.grid();
    Raster::from_fn(g.clone(), vec![name.into()], |_, c, r| {
        vals[g.index(c, r)].map(|v| v as f32)
    })
}

/// Raises every pit to its spill elevation so all cells drain to an outlet
/// along a non-ascending path. Output ≥ input everywhere.
pub fn fill_depressions(dem: &Raster) -> Result<Raster> {
    let s = Surface::of(dem)?;
    let (filled, _) = priority_flood(&s);
    to_raster(dem, &dem.band_names()[0], &filled)
}

/// Horn gradient `(p, q)`: `p` = dz/dx (east), `q` = −dz/dy (positive southward).
fn horn(w: &[f64; 9], cell: f64) -> (f64, f64) {
    let [a, b, c, d, _, f, g, h, i] = *w;
    let p = ((c + 2.0 * f + i) - (a + 2.0 * d + g)) / (8.0 * cell);
    let q = ((g + 2.0 * h + i) - (a + 2.0 * b + c)) / (8.0 * cell);
    (p, q)
}

/// Slope and aspect in degrees for one 3×3 window (row-major, north row
/// first). Aspect is the compass bearing of steepest descent, `None` on a flat.
pub fn horn_slope_aspect(w: &[f64; 9], cell: f64) -> (f64, Option<f64>) {
    let (p, q) = horn(w, cell);
    let slope = (p * p + q * q).sqrt().atan().to_degrees();
    if p == 0.0 && q == 0.0 {
        return (slope, None);
    }
    // descent vector is (-p, q) in (east, north)
    let bearing = (-p).atan2(q).to_degrees();
    (slope, Some(if bearing < 0.0 { bearing + 360.0 } else { bearing }))
}

/// Slope in degrees and aspect (compass bearing of steepest descent, degrees
/// clockwise from north). Flat cells have nodata aspect.
pub fn slope_aspect(dem: &Raster) -> Result<(Raster, Raster)> {
    let s = Surface::of(dem)?;
    let cell = dem.grid().cell_size();
    let n = s.z.len();
    let mut slope = vec![None; n];
    let mut aspect = vec![None; n];
    for idx in 0..n {
        let Some(w) = s.window(idx) else { continue };
        let (sl, asp) = horn_slope_aspect(&w, cell);
        slope[idx] = Some(sl);
        aspect[idx] = asp;
    }
    Ok((to_raster(dem, "slope", &slope)?, to_raster(dem, "aspect", &aspect)?))
}

/// General curvature −2(D + E) in 1/m (no percent scaling).
pub fn curvature(dem: &Raster) -> Result<Raster> {
    let s = Surface::of(dem)?;
    let l2 = dem.grid().cell_size().powi(2);
    let out: Vec<Option<f64>> = (0..s.z.len())
        .map(|idx| {
            let [_, b, _, d, e, f, _, h, _] = s.window(idx)?;
            let dd = ((d + f) / 2.0 - e) / l2;
            let ee = ((b + h) / 2.0 - e) / l2;
            Some(-2.0 * (dd + ee))
        })
        .collect();
    to_raster(dem, "curvature", &out)
}

/// D8 receivers: the steepest strictly-descending neighbour (ties to the first
/// in N..NW order); cells without one follow their flood parent, which resolves
/// flats. Outlets have no receiver.
pub fn flow_directions(filled_dem: &Raster) -> Result<Vec<Option<usize>>> {
    let s = Surface::of(filled_dem)?;
    let (_, parent) = priority_flood(&s);
    let cell = filled_dem.grid().cell_size();
    Ok((0..s.z.len())
        .map(|i| {
            let z = s.z[i]?;
            if s.is_outlet(i) {
                return None;
            }
            let mut best: Option<(f64, usize)> = None;
            for (dc, dr) in D8 {
                let nb = s.neighbour(i, (dc, dr))?;
                let zn = s.z[nb]?;
                let dist = if dc != 0 && dr != 0 { cell * std::f64::consts::SQRT_2 } else { cell };
                let drop = (z - zn) / dist;
                if drop > 0.0 && best.map_or(true, |(b, _)| drop > b) {
                    best = Some((drop, nb));
                }
            }
            best.map(|(_, nb)| nb).or(parent[i])
        })
        .collect())
}

/// Number of cells draining through each cell, itself included.
pub fn flow_accumulation(receivers: &[Option<usize>], data: &[bool]) -> Result<Vec<f64>> {
    let n = receivers.len();
    let mut indeg = vec![0usize; n];
    for r in receivers.iter().flatten() {
        indeg[*r] += 1;
    }
    let mut acc: Vec<f64> = data.iter().map(|d| if *d { 1.0 } else { 0.0 }).collect();
    let mut queue: VecDeque<usize> = (0..n).filter(|i| data[*i] && indeg[*i] == 0).collect();
    let mut done = 0;
    while let Some(i) = queue.pop_front() {
        done += 1;
        if let Some(r) = receivers[i] {
            acc[r] += acc[i];
            indeg[r] -= 1;
            if indeg[r] == 0 {
                queue.push_back(r);
            }
        }
    }
    let total = data.iter().filter(|d| **d).count();
    if done != total {
        return Err(Error::FlowCycle(total - done));
    }
    Ok(acc)
}

/// Topographic wetness index ln(a / max(tan β, 0.001)) with specific catchment
/// `a` = upslope area / cell width from D8 accumulation on the filled DEM.
pub fn twi(filled_dem: &Raster, slope_band: &Raster) -> Result<Raster> {
    let g = filled_dem.grid();
    if !slope_band.grid().same_frame(g) {
        return Err(Error::Adm("slope band and DEM grids differ".into()));
    }
    let receivers = flow_directions(filled_dem)?;
    let data: Vec<bool> = (0..g.len()).map(|i| filled_dem.at(0, i).is_some()).collect();
    let acc = flow_accumulation(&receivers, &data)?;
    let cell = g.cell_size();
    let out: Vec<Option<f64>> = (0..g.len())
        .map(|i| {
            let slope = slope_band.at(0, i)? as f64;
            let a = acc[i] * cell * cell / cell;
            Some((a / slope.to_radians().tan().max(MIN_TAN_SLOPE)).ln())
        })
        .collect();
    to_raster(filled_dem, "twi", &out)
}

/// The five terrain bands at the DEM's native resolution.
///
/// Slope, aspect and curvature come from the raw DEM; the wetness index is
/// routed over the filled DEM with that surface's own slope.
pub fn terrain_stack(dem: &Raster) -> Result<Raster> {
    let (slope, aspect) = slope_aspect(dem)?;
    let curv = curvature(dem)?;
    let filled = fill_depressions(dem)?;
    let (filled_slope, _) = slope_aspect(&filled)?;
    let wet = twi(&filled, &filled_slope)?;
    let elev = Raster::with_mask(
        dem.grid().clone(),
        vec!["dem".into()],
        dem.values().to_vec(),
        dem.nodata_mask().to_vec(),
    )?;
    Raster::stack(&[aspect, curv, elev, slope, wet])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GeoGrid;
    use proptest::prelude::*;

    fn dem(cols: usize, rows: usize, cell: f64, f: impl Fn(f64, f64) -> f64) -> Raster {
        let g = GeoGrid::new("t", 0.0, 0.0, cell, cols, rows).unwrap();
        Raster::from_fn(g.clone(), vec!["dem".into()], |_, c, r| {
            let (x, y) = g.cell_center(c, r);
            Some(f(x, y) as f32)
        })
        .unwrap()
    }

    fn grid_dem(vals: &[f32], cols: usize) -> Raster {
        let g = GeoGrid::new("t", 0.0, 0.0, 10.0, cols, vals.len() / cols).unwrap();
        Raster::new(g, vec!["dem".into()], vals.to_vec()).unwrap()
    }

    #[test]
    fn fill_raises_single_pit() {
        let d = grid_dem(&[5.0, 5.0, 5.0, 5.0, 1.0, 5.0, 5.0, 5.0, 5.0], 3);
        let f = fill_depressions(&d).unwrap();
        assert_eq!(f.get(0, 1, 1), Some(5.0));
    }

    #[test]
    fn fill_leaves_ramps_and_flats() {
        let ramp = dem(8, 6, 10.0, |x, y| 0.1 * x + 0.05 * y);
        assert_eq!(fill_depressions(&ramp).unwrap(), ramp);
        let flat = dem(5, 5, 10.0, |_, _| 3.0);
        assert_eq!(fill_depressions(&flat).unwrap(), flat);
    }

    #[test]
    fn horn_on_planes() {
        let east = dem(6, 6, 10.0, |x, _| 0.1 * x);
        let (s, a) = slope_aspect(&east).unwrap();
        assert!((s.get(0, 2, 2).unwrap() as f64 - 0.1f64.atan().to_degrees()).abs() < 1e-4);
        assert!((a.get(0, 2, 2).unwrap() - 270.0).abs() < 1e-4);
        assert_eq!(s.get(0, 0, 2), None);

        let north = dem(6, 6, 10.0, |_, y| 0.1 * y);
        let (_, a) = slope_aspect(&north).unwrap();
        assert!((a.get(0, 3, 3).unwrap() - 180.0).abs() < 1e-4);

        let flat = dem(4, 4, 10.0, |_, _| 2.0);
        let (s, a) = slope_aspect(&flat).unwrap();
        assert_eq!(s.get(0, 1, 1), Some(0.0));
        assert_eq!(a.get(0, 1, 1), None);
    }

    #[test]
    fn curvature_on_quadratics() {
        let g = GeoGrid::new("t", -2.0, -2.0, 1.0, 5, 5).unwrap();
        let bowl = |sign: f64| {
            Raster::from_fn(g.clone(), vec!["dem".into()], |_, c, r| {
                let x = c as f64 - 2.0;
                let y = 2.0 - r as f64;
                Some((sign * (x * x + y * y)) as f32)
            })
            .unwrap()
        };
        assert_eq!(curvature(&bowl(1.0)).unwrap().get(0, 2, 2), Some(-4.0));
        assert_eq!(curvature(&bowl(-1.0)).unwrap().get(0, 2, 2), Some(4.0));
        let plane = dem(5, 5, 10.0, |x, y| 0.3 * x - 0.2 * y);
        let c = curvature(&plane).unwrap();
        assert!(c.get(0, 2, 2).unwrap().abs() < 1e-6);
    }

    #[test]
    fn twi_on_westward_ramp() {
        // z rises eastward; every interior cell drains due west
        let ramp = dem(8, 5, 10.0, |x, _| 0.1 * x);
        let filled = fill_depressions(&ramp).unwrap();
        let (slope, _) = slope_aspect(&filled).unwrap();
        let t = twi(&filled, &slope).unwrap();
        // head cell: first interior cell below the eastern edge
        let head = t.get(0, 6, 2).unwrap() as f64;
        assert!((head - 100f64.ln()).abs() < 1e-4, "{head}");
        let line: Vec<f32> = (1..7).rev().map(|c| t.get(0, c, 2).unwrap()).collect();
        assert!(line.windows(2).all(|w| w[1] > w[0]));
        for (i, v) in line.iter().enumerate() {
            let a = (i + 1) as f64 * 10.0;
            assert!((*v as f64 - (a / 0.1).ln()).abs() < 1e-4);
        }
    }

    #[test]
    fn flat_cells_get_finite_twi() {
        let flat = dem(5, 5, 10.0, |_, _| 1.0);
        let (slope, _) = slope_aspect(&flat).unwrap();
        let t = twi(&flat, &slope).unwrap();
        assert!(t.get(0, 2, 2).unwrap().is_finite());
    }

    #[test]
    fn cycle_detection() {
        let recv = vec![Some(1), Some(0), None];
        assert!(matches!(
            flow_accumulation(&recv, &[true, true, true]),
            Err(Error::FlowCycle(2))
        ));
    }

    #[test]
    fn stack_layout() {
        let d = dem(6, 6, 30.0, |x, y| 0.01 * x * y);
        let s = terrain_stack(&d).unwrap();
        assert_eq!(s.band_names(), TERRAIN_BANDS.map(String::from));
        assert_eq!(s.get(2, 3, 3), d.get(0, 3, 3));
    }

    fn noise_dem(cols: usize, rows: usize, seed: u64) -> Raster {
        let mut s = seed | 1;
        let vals: Vec<f32> = (0..cols * rows)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % 1000) as f32 / 100.0
            })
            .collect();
        grid_dem(&vals, cols)
    }

    proptest! {
        #[test]
        fn fill_idempotent_and_drains(cols in 3usize..14, rows in 3usize..14, seed in any::<u64>()) {
            let d = noise_dem(cols, rows, seed);
            let f = fill_depressions(&d).unwrap();
            prop_assert_eq!(&fill_depressions(&f).unwrap(), &f);
            for i in 0..d.grid().len() {
                prop_assert!(f.at(0, i).unwrap() >= d.at(0, i).unwrap());
            }
            let recv = flow_directions(&f).unwrap();
            // every receiver step is non-ascending
            for (i, r) in recv.iter().enumerate() {
                if let Some(r) = r {
                    prop_assert!(f.at(0, *r).unwrap() <= f.at(0, i).unwrap());
                }
            }
            let acc = flow_accumulation(&recv, &vec![true; recv.len()]).unwrap();
            let outlets: f64 = (0..recv.len()).filter(|i| recv[*i].is_none()).map(|i| acc[i]).sum();
            prop_assert_eq!(outlets, (cols * rows) as f64);
            let (slope, _) = slope_aspect(&f).unwrap();
            let t = twi(&f, &slope).unwrap();
            for i in 0..t.grid().len() {
                if let Some(v) = t.at(0, i) { prop_assert!(v.is_finite()); }
            }
        }
    }
}
