//! Core domain types: cell grids, OD tensors, POI matrices and cell-to-super-cell
//! assignments, plus the tensor algebra used to aggregate flows.

mod io;
mod synth;

pub use io::{
    load_assignment_csv, load_grid_csv, load_od_csv, load_poi_csv, od_csv_extent, read_od_csv, save_assignment_csv,
    save_grid_csv, save_od_csv, save_poi_csv, write_od_csv,
};
pub use synth::{generate_synthetic, CountModel, SynthConfig, SyntheticData};

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Kilometers per degree of latitude.
const KM_PER_DEG: f64 = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: usize,
    pub lon: f64,
    pub lat: f64,
}

/// N hexagonal cells of uniform radius. `radius_km` is the center-to-edge
/// distance, so adjacent centers sit `2 * radius_km` apart.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid {
    cells: Vec<Cell>,
    radius_km: f64,
}

impl CellGrid {
    pub fn new(mut cells: Vec<Cell>, radius_km: f64) -> Result<Self> {
        if !(radius_km > 0.0) || !radius_km.is_finite() {
            return Err(Error::InvalidInput(format!(
                "cell radius must be positive, got {radius_km}"
            )));
        }
        cells.sort_by_key(|c| c.id);
        for (expected, cell) in cells.iter().enumerate() {
            if cell.id != expected {
                return Err(Error::InvalidInput(format!(
                    "cell ids must be 0..{} without gaps or duplicates (found {} at position {expected})",
                    cells.len(),
                    cell.id
                )));
            }
            if !cell.lon.is_finite() || !cell.lat.is_finite() {
                return Err(Error::InvalidInput(format!("cell {} has non-finite coordinates", cell.id)));
            }
        }
        let mut coords: Vec<(u64, u64, usize)> =
            cells.iter().map(|c| (c.lon.to_bits(), c.lat.to_bits(), c.id)).collect();
        coords.sort_unstable();
        if let Some(w) = coords.windows(2).find(|w| w[0].0 == w[1].0 && w[0].1 == w[1].1) {
            return Err(Error::InvalidInput(format!(
                "cells {} and {} share identical coordinates",
                w[0].2, w[1].2
            )));
        }
        Ok(Self { cells, radius_km })
    }

    /// Regular hexagonal lattice of `n` cells laid out in offset rows around
    /// (`lon0`, `lat0`). Rows hold `ceil(sqrt(n))` cells.
    pub fn hex_lattice(n: usize, radius_km: f64, lon0: f64, lat0: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("grid needs at least one cell".into()));
        }
        let cols = (n as f64).sqrt().ceil() as usize;
        let dx = 2.0 * radius_km;
        let dy = 3f64.sqrt() * radius_km;
        let km_per_deg_lon = KM_PER_DEG * lat0.to_radians().cos();
        let cells = (0..n)
            .map(|id| {
                let (row, col) = (id / cols, id % cols);
                let x = col as f64 * dx + if row % 2 == 1 { radius_km } else { 0.0 };
                let y = row as f64 * dy;
                Cell {
                    id,
                    lon: lon0 + x / km_per_deg_lon,
                    lat: lat0 + y / KM_PER_DEG,
                }
            })
            .collect();
        Self::new(cells, radius_km)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn radius_km(&self) -> f64 {
        self.radius_km
    }

    /// Great-circle (haversine) distance between two cell centers.
    pub fn distance_km(&self, i: usize, j: usize) -> f64 {
        haversine_km(&self.cells[i], &self.cells[j])
    }

    /// Planar (x, y) km coordinates relative to the grid's mean position.
    pub fn local_xy(&self) -> Vec<(f64, f64)> {
        let n = self.cells.len() as f64;
        let lon0 = self.cells.iter().map(|c| c.lon).sum::<f64>() / n;
        let lat0 = self.cells.iter().map(|c| c.lat).sum::<f64>() / n;
        let kx = KM_PER_DEG * lat0.to_radians().cos();
        self.cells
            .iter()
            .map(|c| ((c.lon - lon0) * kx, (c.lat - lat0) * KM_PER_DEG))
            .collect()
    }
}

fn haversine_km(a: &Cell, b: &Cell) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Dense count tensor of shape N x N x T indexed (origin, destination, slot).
#[derive(Debug, Clone, PartialEq)]
pub struct OdTensor {
    data: Array3<f64>,
    start_slot: usize,
    slot_hours: f64,
}

impl OdTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (a, b, _) = data.dim();
        if a != b {
            return Err(Error::shape("od_tensor", format!("spatial dims must agree, got {a}x{b}")));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "OD entries must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            data,
            start_slot: 0,
            slot_hours: 1.0,
        })
    }

    pub fn zeros(n_cells: usize, n_slots: usize) -> Self {
        Self {
            data: Array3::zeros((n_cells, n_cells, n_slots)),
            start_slot: 0,
            slot_hours: 1.0,
        }
    }

    pub fn with_timing(mut self, start_slot: usize, slot_hours: f64) -> Self {
        self.start_slot = start_slot;
        self.slot_hours = slot_hours;
        self
    }

    pub fn n_cells(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_slots(&self) -> usize {
        self.data.dim().2
    }

    pub fn start_slot(&self) -> usize {
        self.start_slot
    }

    pub fn slot_hours(&self) -> f64 {
        self.slot_hours
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, t: usize) -> f64 {
        self.data[[i, j, t]]
    }

    pub fn total(&self) -> f64 {
        self.data.sum()
    }

    /// Copy of the slots `[from, to)`, keeping absolute slot numbering.
    pub fn slots(&self, from: usize, to: usize) -> Result<Self> {
        if from > to || to > self.n_slots() {
            return Err(Error::shape(
                "slots",
                format!("range {from}..{to} outside 0..{}", self.n_slots()),
            ));
        }
        Ok(Self {
            data: self.data.slice(s![.., .., from..to]).to_owned(),
            start_slot: self.start_slot + from,
            slot_hours: self.slot_hours,
        })
    }
}

/// Binary region-by-category matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PoiMatrix {
    data: Array2<f64>,
}

impl PoiMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput("POI entries must be 0 or 1".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(rows: usize, categories: usize) -> Self {
        Self {
            data: Array2::zeros((rows, categories)),
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_categories(&self) -> usize {
        self.data.ncols()
    }

    /// Lift a cell-level matrix to super-cells: a category is present in a
    /// super-cell when any member cell has it.
    pub fn aggregate(&self, assignment: &Assignment) -> Result<Self> {
        if self.n_rows() != assignment.n_cells() {
            return Err(Error::shape(
                "poi_aggregate",
                format!("{} POI rows vs {} cells", self.n_rows(), assignment.n_cells()),
            ));
        }
        let mut out = Array2::zeros((assignment.n_super(), self.n_categories()));
        for (cell, &sc) in assignment.labels().iter().enumerate() {
            for (o, &v) in out.row_mut(sc).iter_mut().zip(self.data.row(cell)) {
                if v > 0.0 {
                    *o = 1.0;
                }
            }
        }
        Ok(Self { data: out })
    }
}

/// Hard assignment of N cells to M super-cells: one-hot rows, no empty column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    labels: Vec<usize>,
    n_super: usize,
}

impl Assignment {
    pub fn from_labels(labels: Vec<usize>, n_super: usize) -> Result<Self> {
        let mut counts = vec![0usize; n_super];
        for (cell, &l) in labels.iter().enumerate() {
            if l >= n_super {
                return Err(Error::InvalidInput(format!(
                    "cell {cell} assigned to super-cell {l}, only {n_super} exist"
                )));
            }
            counts[l] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidInput(format!("super-cell {empty} has no cells")));
        }
        Ok(Self { labels, n_super })
    }

    pub fn from_matrix(y: &Array2<f64>) -> Result<Self> {
        let mut labels = Vec::with_capacity(y.nrows());
        for (i, row) in y.rows().into_iter().enumerate() {
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidInput(format!("assignment row {i} is not binary")));
            }
            let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(j, _)| j).collect();
            if ones.len() != 1 {
                return Err(Error::InvalidInput(format!(
                    "assignment row {i} sums to {}, expected 1",
                    ones.len()
                )));
            }
            labels.push(ones[0]);
        }
        Self::from_labels(labels, y.ncols())
    }

    pub fn identity(n: usize) -> Self {
        Self {
            labels: (0..n).collect(),
            n_super: n,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_cells(&self) -> usize {
        self.labels.len()
    }

    pub fn n_super(&self) -> usize {
        self.n_super
    }

    pub fn matrix(&self) -> Array2<f64> {
        let mut y = Array2::zeros((self.labels.len(), self.n_super));
        for (i, &l) in self.labels.iter().enumerate() {
            y[[i, l]] = 1.0;
        }
        y
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_super];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn members(&self, super_cell: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == super_cell)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Fraction of exactly-zero entries.
pub fn sparsity_rate(x: &OdTensor) -> Result<f64> {
    let total = x.data.len();
    if total == 0 {
        return Err(Error::EmptyTensor);
    }
    let zeros = x.data.iter().filter(|&&v| v == 0.0).count();
    Ok(zeros as f64 / total as f64)
}

/// Which spatial axis a mode product contracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialMode {
    /// Mode 1: contracts origins, N x N x T -> M x N x T.
    Origin,
    /// Mode 2: contracts destinations, N x N x T -> N x M x T.
    Destination,
}

/// `(x ×_mode u)` with `u` of shape (I_mode, J): elementwise
/// `out[.., j, ..] = sum_i x[.., i, ..] * u[i, j]`.
pub fn mode_product(x: ArrayView3<f64>, u: &Array2<f64>, mode: SpatialMode) -> Result<Array3<f64>> {
    let (a, b, t) = x.dim();
    let axis_len = match mode {
        SpatialMode::Origin => a,
        SpatialMode::Destination => b,
    };
    if u.nrows() != axis_len {
        return Err(Error::shape(
            "mode_product",
            format!("matrix has {} rows, tensor mode has {axis_len}", u.nrows()),
        ));
    }
    let m = u.ncols();
    match mode {
        SpatialMode::Origin => {
            let flat = x.to_shape((a, b * t)).map_err(|e| Error::shape("mode_product", e.to_string()))?;
            let out = u.t().dot(&flat);
            Ok(out.into_shape_with_order((m, b, t)).expect("contiguous product"))
        }
        SpatialMode::Destination => {
            let mut out = Array3::zeros((a, m, t));
            for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))) {
                dst.assign(&u.t().dot(&src));
            }
            Ok(out)
        }
    }
}

/// Super-cell tensor `X ×_1 Ŷ ×_2 Ŷ`: every coarse flow is the sum of the
/// fine flows between the two member sets.
pub fn coarsen_tensor(x: &OdTensor, y: &Assignment) -> Result<OdTensor> {
    if y.n_cells() != x.n_cells() {
        return Err(Error::shape(
            "coarsen_tensor",
            format!("assignment covers {} cells, tensor has {}", y.n_cells(), x.n_cells()),
        ));
    }
    // Label scatter is the same contraction as the two mode products with a
    // one-hot matrix, without the N x M dense intermediate.
    let (n, _, t) = x.data.dim();
    let m = y.n_super();
    let mut out = Array3::<f64>::zeros((m, m, t));
    let labels = y.labels();
    {
        let dst = out.as_slice_mut().expect("fresh array is contiguous");
        let src = x.data.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        for i in 0..n {
            let li = labels[i];
            for j in 0..n {
                let base_dst = (li * m + labels[j]) * t;
                let base_src = (i * n + j) * t;
                for (d, s) in dst[base_dst..base_dst + t].iter_mut().zip(&src[base_src..base_src + t]) {
                    *d += s;
                }
            }
        }
    }
    Ok(OdTensor {
        data: out,
        start_slot: x.start_slot,
        slot_hours: x.slot_hours,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr3, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(v: Array3<f64>) -> OdTensor {
        OdTensor::new(v).unwrap()
    }

    fn loop_oracle(x: &Array3<f64>, labels: &[usize], m: usize) -> Array3<f64> {
        let (n, _, t) = x.dim();
        let mut out = Array3::zeros((m, m, t));
        for a in 0..m {
            for b in 0..m {
                for s in 0..t {
                    let mut acc = 0.0;
                    for i in (0..n).filter(|&i| labels[i] == a) {
                        for j in (0..n).filter(|&j| labels[j] == b) {
                            acc += x[[i, j, s]];
                        }
                    }
                    out[[a, b, s]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity_rate(&OdTensor::zeros(4, 2)).unwrap(), 1.0);
        let x = tensor(arr3(&[[[1.0], [0.0]], [[0.0], [1.0]]]));
        assert_eq!(sparsity_rate(&x).unwrap(), 0.5);
        assert!(matches!(sparsity_rate(&OdTensor::zeros(0, 0)), Err(Error::EmptyTensor)));
        assert!(matches!(sparsity_rate(&OdTensor::zeros(3, 0)), Err(Error::EmptyTensor)));
    }

    #[test]
    fn rejects_negative_and_non_square() {
        assert!(OdTensor::new(arr3(&[[[-1.0]]])).is_err());
        assert!(OdTensor::new(Array3::zeros((2, 3, 1))).is_err());
    }

    #[test]
    fn mode_product_identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array::from_shape_fn((4, 4, 3), |_| rng.random_range(0.0..5.0));
        let id = Assignment::identity(4).matrix();
        for mode in [SpatialMode::Origin, SpatialMode::Destination] {
            assert_eq!(mode_product(x.view(), &id, mode).unwrap(), x);
        }
    }

    #[test]
    fn merging_two_cells_sums_all_flows() {
        let x = arr3(&[[[1.0], [2.0]], [[3.0], [4.0]]]);
        let y = Assignment::from_labels(vec![0, 0], 1).unwrap().matrix();
        let once = mode_product(x.view(), &y, SpatialMode::Origin).unwrap();
        let twice = mode_product(once.view(), &y, SpatialMode::Destination).unwrap();
        assert_eq!(twice, arr3(&[[[10.0]]]));
        let via = coarsen_tensor(&tensor(x), &Assignment::from_labels(vec![0, 0], 1).unwrap()).unwrap();
        assert_eq!(via.data(), &arr3(&[[[10.0]]]));
    }

    #[test]
    fn mode_product_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array::from_shape_fn((5, 5, 3), |_| rng.random_range(0..7) as f64);
        let labels = vec![0, 1, 1, 0, 1];
        let y = Assignment::from_labels(labels.clone(), 2).unwrap();
        let step = mode_product(x.view(), &y.matrix(), SpatialMode::Origin).unwrap();
        assert_eq!(step.dim(), (2, 5, 3));
        let full = mode_product(step.view(), &y.matrix(), SpatialMode::Destination).unwrap();
        assert_eq!(full, loop_oracle(&x, &labels, 2));
        assert_eq!(coarsen_tensor(&tensor(x.clone()), &y).unwrap().data(), &full);
    }

    #[test]
    fn six_cell_two_cluster_example() {
        let x = Array::from_shape_fn((6, 6, 2), |(i, j, t)| ((i * 7 + j * 3 + t) % 5) as f64);
        let labels = vec![0, 0, 1, 1, 0, 1];
        let y = Assignment::from_labels(labels.clone(), 2).unwrap();
        let c = coarsen_tensor(&tensor(x.clone()), &y).unwrap();
        assert_eq!(c.data(), &loop_oracle(&x, &labels, 2));
        assert_eq!(c.total(), x.sum());
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let x = Array3::<f64>::zeros((3, 3, 1));
        let y = Assignment::identity(4).matrix();
        assert!(mode_product(x.view(), &y, SpatialMode::Origin).is_err());
        assert!(coarsen_tensor(&OdTensor::zeros(3, 1), &Assignment::identity(4)).is_err());
    }

    #[test]
    fn assignment_validation() {
        assert!(Assignment::from_labels(vec![0, 0, 2], 3).is_err());
        assert!(Assignment::from_labels(vec![0, 3], 2).is_err());
        let m = ndarray::arr2(&[[1.0, 0.0], [1.0, 1.0]]);
        assert!(Assignment::from_matrix(&m).is_err());
        let ok = ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]);
        let a = Assignment::from_matrix(&ok).unwrap();
        assert_eq!(a.labels(), &[1, 0, 0]);
        assert_eq!(a.sizes(), vec![2, 1]);
        assert_eq!(a.matrix(), ok);
    }

    #[test]
    fn grid_validation_and_lattice_spacing() {
        let dup = vec![
            Cell { id: 0, lon: 1.0, lat: 1.0 },
            Cell { id: 1, lon: 1.0, lat: 1.0 },
        ];
        assert!(CellGrid::new(dup, 1.0).is_err());
        let gap = vec![Cell { id: 0, lon: 0.0, lat: 0.0 }, Cell { id: 2, lon: 1.0, lat: 0.0 }];
        assert!(CellGrid::new(gap, 1.0).is_err());
        assert!(CellGrid::new(vec![Cell { id: 0, lon: 0.0, lat: 0.0 }], 0.0).is_err());

        let g = CellGrid::hex_lattice(25, 0.6, 104.0, 30.0).unwrap();
        // horizontal and diagonal neighbours both sit at twice the radius
        assert!((g.distance_km(0, 1) - 1.2).abs() < 1e-3);
        assert!((g.distance_km(0, 5) - 1.2).abs() < 1e-3);
        assert!(g.distance_km(0, 2) > 2.1 * 0.6);
    }

    #[test]
    fn poi_aggregation_is_logical_or() {
        let poi = PoiMatrix::new(ndarray::arr2(&[[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])).unwrap();
        let a = Assignment::from_labels(vec![0, 1, 0], 2).unwrap();
        let agg = poi.aggregate(&a).unwrap();
        assert_eq!(agg.data(), &ndarray::arr2(&[[1.0, 1.0], [0.0, 0.0]]));
        assert!(PoiMatrix::new(ndarray::arr2(&[[0.5]])).is_err());
    }
}
