//! Reference downsamplers that ignore semantic structure: fixed 7-cell hex
//! flowers and square mean pooling of the OD matrix.

use ndarray::Array3;

use crate::data::{coarsen_tensor, Assignment, CellGrid, OdTensor};
use crate::error::{Error, Result};

/// Groups each cell with its ring of six neighbours. On a regular hex lattice
/// the centers are the cells with `(q + 3r) mod 7 == 0` in axial coordinates,
/// which tiles the plane with disjoint 7-cell flowers; every cell joins its
/// nearest center. Irregular grids fall back to greedy center picking.
pub fn low_spatial_assignment(grid: &CellGrid) -> Result<Assignment> {
    let n = grid.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty grid".into()));
    }
    let xy = grid.local_xy();
    let spacing = 2.0 * grid.radius_km();
    let centers = lattice_centers(&xy, spacing).unwrap_or_else(|| greedy_centers(&xy, spacing));
    let labels = xy
        .iter()
        .map(|p| {
            (0..centers.len())
                .min_by(|&a, &b| d2(*p, xy[centers[a]]).total_cmp(&d2(*p, xy[centers[b]])))
                .expect("at least one center")
        })
        .collect();
    Assignment::from_labels(labels, centers.len())
}

pub fn downsample_low_spatial(x: &OdTensor, grid: &CellGrid) -> Result<OdTensor> {
    coarsen_tensor(x, &low_spatial_assignment(grid)?)
}

/// Mean of non-overlapping `patch x patch` blocks of each OD matrix, zero
/// padded up to a multiple of `patch`.
pub fn downsample_mean_pool(x: &OdTensor, patch: usize) -> Result<OdTensor> {
    if patch == 0 {
        return Err(Error::InvalidInput("patch size must be positive".into()));
    }
    let (n, _, t) = x.data().dim();
    let out_n = n.div_ceil(patch);
    let mut out = Array3::<f64>::zeros((out_n, out_n, t));
    for i in 0..n {
        for j in 0..n {
            for s in 0..t {
                out[[i / patch, j / patch, s]] += x.get(i, j, s);
            }
        }
    }
    out /= (patch * patch) as f64;
    Ok(OdTensor::new(out)?.with_timing(x.start_slot(), x.slot_hours()))
}

fn d2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

fn lattice_centers(xy: &[(f64, f64)], spacing: f64) -> Option<Vec<usize>> {
    let origin = xy[0];
    // lattice orientation from cell 0's nearest neighbour, folded into [0, 60°)
    let nearest = (1..xy.len()).min_by(|&a, &b| d2(xy[a], origin).total_cmp(&d2(xy[b], origin)))?;
    let (vx, vy) = (xy[nearest].0 - origin.0, xy[nearest].1 - origin.1);
    let theta = vy.atan2(vx).rem_euclid(std::f64::consts::FRAC_PI_3);
    let (c, s) = (theta.cos(), theta.sin());
    let h = 3f64.sqrt() / 2.0;
    let mut centers = Vec::new();
    for (i, p) in xy.iter().enumerate() {
        let (dx, dy) = (p.0 - origin.0, p.1 - origin.1);
        let (x, y) = ((c * dx + s * dy) / spacing, (-s * dx + c * dy) / spacing);
        let r = y / h;
        let q = x - r / 2.0;
        let (rq, rr) = (q.round(), r.round());
        if (q - rq).abs() > 0.1 || (r - rr).abs() > 0.1 {
            return None;
        }
        if ((rq as i64) + 3 * (rr as i64)).rem_euclid(7) == 0 {
            centers.push(i);
        }
    }
    (!centers.is_empty()).then_some(centers)
}

fn greedy_centers(xy: &[(f64, f64)], spacing: f64) -> Vec<usize> {
    let min_d2 = (2.5 * spacing).powi(2);
    let mut centers: Vec<usize> = Vec::new();
    for (i, p) in xy.iter().enumerate() {
        if centers.iter().all(|&c| d2(*p, xy[c]) >= min_d2) {
            centers.push(i);
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn mean_pool_constant_and_single_patch() {
        let c = OdTensor::new(Array3::from_elem((8, 8, 2), 3.0)).unwrap();
        let p = downsample_mean_pool(&c, 4).unwrap();
        assert_eq!(p.data().dim(), (2, 2, 2));
        assert!(p.data().iter().all(|&v| v == 3.0));
        let one = OdTensor::new(Array3::from_elem((4, 4, 1), 16.0)).unwrap();
        assert_eq!(downsample_mean_pool(&one, 4).unwrap().data(), &Array3::from_elem((1, 1, 1), 16.0));
    }

    #[test]
    fn mean_pool_pads_with_zeros() {
        let x = OdTensor::new(Array3::from_elem((5, 5, 1), 1.0)).unwrap();
        let p = downsample_mean_pool(&x, 4).unwrap();
        assert_eq!(p.data().dim(), (2, 2, 1));
        assert_eq!(p.get(0, 0, 0), 1.0);
        assert_eq!(p.get(1, 1, 0), 1.0 / 16.0);
        assert_eq!(p.get(0, 1, 0), 4.0 / 16.0);
    }

    #[test]
    fn low_spatial_groups_hold_about_seven_cells() {
        let grid = CellGrid::hex_lattice(900, 0.6, 104.0, 30.0).unwrap();
        let a = low_spatial_assignment(&grid).unwrap();
        let mean = grid.len() as f64 / a.n_super() as f64;
        assert!((6.5..=7.5).contains(&mean), "mean group size {mean}");
        // every center's six lattice neighbours join it
        let sizes = a.sizes();
        let full = sizes.iter().filter(|&&s| s == 7).count();
        assert!(full as f64 >= 0.6 * a.n_super() as f64, "{sizes:?}");
    }

    #[test]
    fn low_spatial_conserves_flow() {
        let grid = CellGrid::hex_lattice(30, 0.6, 104.0, 30.0).unwrap();
        let x = OdTensor::new(Array3::from_shape_fn((30, 30, 2), |(i, j, t)| ((i * j + t) % 4) as f64)).unwrap();
        let y = downsample_low_spatial(&x, &grid).unwrap();
        assert_eq!(y.total(), x.total());
    }
}
