use ndarray::{s, Array2};

use super::TransitionPair;
use crate::data::Assignment;
use crate::error::{Error, Result};

/// Soft N x M label matrix. Rows are cells, columns super-cells.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    y: Array2<f64>,
}

impl LabelMatrix {
    pub fn new(y: Array2<f64>) -> Result<Self> {
        if y.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("label entries must be finite and non-negative".into()));
        }
        Ok(Self { y })
    }

    /// `[I_M; 0]`: the first M rows are the dense cells, one label each.
    pub fn initial(n: usize, m: usize) -> Self {
        let mut y = Array2::zeros((n, m));
        for k in 0..m.min(n) {
            y[[k, k]] = 1.0;
        }
        Self { y }
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn n_labels(&self) -> usize {
        self.y.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagateParams {
    pub alpha: f64,
    pub beta: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PropagateParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Propagation {
    pub labels: LabelMatrix,
    pub iterations: usize,
    /// False when `max_iter` was reached first; `labels` is then the last iterate.
    pub converged: bool,
}

pub fn propagate(y0: &LabelMatrix, t: &TransitionPair, params: &PropagateParams) -> Result<Propagation> {
    propagate_with(y0, t, params, |_, _| {})
}

/// Label propagation with the first M rows clamped to the identity. Each
/// iterate is `alpha * T_sem Y + beta * T_geo Y` followed by the reset;
/// `observe` sees every iterate after its reset.
pub fn propagate_with<F>(y0: &LabelMatrix, t: &TransitionPair, params: &PropagateParams, mut observe: F) -> Result<Propagation>
where
    F: FnMut(usize, &Array2<f64>),
{
    let (n, m) = y0.y.dim();
    if t.n() != n {
        return Err(Error::shape("propagate", format!("{n} label rows vs {}x{} transitions", t.n(), t.n())));
    }
    if m > n {
        return Err(Error::shape("propagate", format!("{m} labels for {n} cells")));
    }
    let PropagateParams { alpha, beta, tol, max_iter } = *params;
    if alpha < 0.0 || beta < 0.0 || ((alpha + beta) - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "fusion weights must be non-negative and sum to 1, got {alpha} + {beta}"
        )));
    }
    if max_iter == 0 {
        return Err(Error::InvalidInput("max_iter must be positive".into()));
    }

    let identity = Array2::<f64>::eye(m);
    let mut prev = y0.y.clone();
    for iter in 1..=max_iter {
        let y_sem = t.sem.dot(&prev);
        let y_geo = t.geo.dot(&prev);
        let mut next = y_sem * alpha + y_geo * beta;
        next.slice_mut(s![..m, ..]).assign(&identity);
        observe(iter, &next);
        let delta = next
            .iter()
            .zip(prev.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prev = next;
        if delta < tol {
            return Ok(Propagation {
                labels: LabelMatrix { y: prev },
                iterations: iter,
                converged: true,
            });
        }
    }
    Ok(Propagation {
        labels: LabelMatrix { y: prev },
        iterations: max_iter,
        converged: false,
    })
}

/// Row-wise argmax with ties to the lowest column. An all-zero row takes
/// `fallback[row]` when given, otherwise column 0.
pub fn assign_labels(y: &LabelMatrix, fallback: Option<&[usize]>) -> Result<Vec<usize>> {
    let n = y.y.nrows();
    if let Some(f) = fallback {
        if f.len() != n {
            return Err(Error::shape("assign", format!("{} fallbacks for {n} rows", f.len())));
        }
    }
    Ok(y.y
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            match fallback {
                Some(f) if row.iter().all(|&v| v == 0.0) => f[i],
                _ => best,
            }
        })
        .collect())
}

pub fn assign(y: &LabelMatrix, fallback: Option<&[usize]>) -> Result<Assignment> {
    Assignment::from_labels(assign_labels(y, fallback)?, y.n_labels())
}
