use ndarray::{Array2, Axis};

use crate::data::{CellGrid, OdTensor};
use crate::error::{Error, Result};

/// Semantic and geographic row-stochastic transition matrices over the same cells.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPair {
    pub sem: Array2<f64>,
    pub geo: Array2<f64>,
}

impl TransitionPair {
    pub fn new(sem: Array2<f64>, geo: Array2<f64>) -> Result<Self> {
        if sem.dim() != geo.dim() || sem.nrows() != sem.ncols() {
            return Err(Error::shape(
                "transition_pair",
                format!("semantic {:?} vs geographic {:?}", sem.dim(), geo.dim()),
            ));
        }
        for (name, t) in [("semantic", &sem), ("geographic", &geo)] {
            if !is_row_stochastic(t, 1e-9) {
                return Err(Error::InvalidInput(format!("{name} transition matrix is not row-stochastic")));
            }
        }
        Ok(Self { sem, geo })
    }

    pub fn n(&self) -> usize {
        self.sem.nrows()
    }

    /// Relabel cells so that new index `a` is old cell `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let p = |t: &Array2<f64>| Array2::from_shape_fn(t.dim(), |(a, b)| t[[perm[a], perm[b]]]);
        Self {
            sem: p(&self.sem),
            geo: p(&self.geo),
        }
    }
}

pub fn is_row_stochastic(t: &Array2<f64>, tol: f64) -> bool {
    t.iter().all(|&v| v >= 0.0 && v.is_finite())
        && t.sum_axis(Axis(1)).iter().all(|s| (s - 1.0).abs() <= tol)
}

fn normalize_rows(mut w: Array2<f64>) -> Array2<f64> {
    for (i, mut row) in w.rows_mut().into_iter().enumerate() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            row[i] = 1.0;
        }
    }
    w
}

/// Uniform weight over the other cells whose centers lie closer than `l_km`.
/// A cell with no such neighbour keeps a self-loop.
pub fn build_geo_transition(grid: &CellGrid, l_km: f64) -> Result<Array2<f64>> {
    if !(l_km > 0.0) {
        return Err(Error::InvalidInput(format!("neighbour threshold must be positive, got {l_km}")));
    }
    let n = grid.len();
    let w = Array2::from_shape_fn((n, n), |(i, j)| {
        if i != j && grid.distance_km(i, j) < l_km {
            1.0
        } else {
            0.0
        }
    });
    Ok(normalize_rows(w))
}

/// Row-normalised mean flow between cells. The symmetric form uses
/// `x(i,j) + x(j,i)`; `directed` uses out-flows only. The diagonal is zero and
/// cells with no flow at all keep a self-loop.
pub fn build_sem_transition(x: &OdTensor, directed: bool) -> Result<Array2<f64>> {
    let t = x.n_slots();
    if x.n_cells() == 0 || t == 0 {
        return Err(Error::EmptyTensor);
    }
    let mean = x.data().sum_axis(Axis(2)) / t as f64;
    let mut w = if directed { mean.clone() } else { &mean + &mean.t() };
    w.diag_mut().fill(0.0);
    Ok(normalize_rows(w))
}
