//! Space coarsening: merge N fine cells into M super-cells, one high-volume
//! "dense" cell per super-cell, by propagating labels from the dense cells
//! over a fused semantic/geographic transition graph.

mod downsample;
mod propagate;
mod transition;

pub use downsample::{downsample_low_spatial, downsample_mean_pool, low_spatial_assignment};
pub use propagate::{assign, assign_labels, propagate, propagate_with, LabelMatrix, PropagateParams, Propagation};
pub use transition::{build_geo_transition, build_sem_transition, is_row_stochastic, TransitionPair};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{coarsen_tensor, Assignment, CellGrid, OdTensor};
use crate::error::{Error, Result};

/// Time-averaged in-flow plus out-flow per cell and the ascending order of
/// those values (stable, so equal values keep index order).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStats {
    pub f: Vec<f64>,
    pub order: Vec<usize>,
}

pub fn compute_flow_stats(x: &OdTensor) -> Result<FlowStats> {
    let t = x.n_slots();
    if x.n_cells() == 0 || t == 0 {
        return Err(Error::EmptyTensor);
    }
    let d = x.data();
    let out = d.sum_axis(Axis(2)).sum_axis(Axis(1));
    let inflow = d.sum_axis(Axis(2)).sum_axis(Axis(0));
    let f: Vec<f64> = out
        .iter()
        .zip(inflow.iter())
        .map(|(o, i)| (o + i) / t as f64)
        .collect();
    let mut order: Vec<usize> = (0..f.len()).collect();
    order.sort_by(|&a, &b| f[a].total_cmp(&f[b]));
    Ok(FlowStats { f, order })
}

/// Dense cells (ascending index; dense cell k labels super-cell k) and the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseSplit {
    pub dense: Vec<usize>,
    pub sparse: Vec<usize>,
}

/// Picks the `m` cells with the largest flow statistic, ties to the lower index.
pub fn select_dense(stats: &FlowStats, m: usize) -> Result<DenseSplit> {
    let n = stats.f.len();
    if m == 0 || m > n {
        return Err(Error::InvalidInput(format!("number of super-cells must lie in 1..={n}, got {m}")));
    }
    let mut by_volume: Vec<usize> = (0..n).collect();
    by_volume.sort_by(|&a, &b| stats.f[b].total_cmp(&stats.f[a]).then(a.cmp(&b)));
    let mut dense = by_volume[..m].to_vec();
    dense.sort_unstable();
    let mut is_dense = vec![false; n];
    for &d in &dense {
        is_dense[d] = true;
    }
    let sparse = (0..n).filter(|&i| !is_dense[i]).collect();
    Ok(DenseSplit { dense, sparse })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarsenParams {
    /// Number of super-cells M.
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Geographic neighbour threshold as a multiple of the cell radius.
    pub l_factor: f64,
    /// Use directed out-flows instead of symmetrised flows for the semantic matrix.
    pub directed_semantic: bool,
}

impl Default for CoarsenParams {
    fn default() -> Self {
        Self {
            m: 60,
            alpha: 0.5,
            beta: 0.5,
            tol: 1e-6,
            max_iter: 1000,
            l_factor: 2.1,
            directed_semantic: false,
        }
    }
}

impl CoarsenParams {
    pub fn propagate_params(&self) -> PropagateParams {
        PropagateParams {
            alpha: self.alpha,
            beta: self.beta,
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Coarsening {
    pub assignment: Assignment,
    pub x_s: OdTensor,
    pub dense: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

/// Full pipeline: flow statistics, dense selection, transition matrices,
/// propagation, argmax assignment and the aggregated tensor.
pub fn coarsen(x: &OdTensor, grid: &CellGrid, params: &CoarsenParams) -> Result<Coarsening> {
    let n = x.n_cells();
    if grid.len() != n {
        return Err(Error::shape("coarsen", format!("grid has {} cells, tensor {n}", grid.len())));
    }
    let stats = compute_flow_stats(x)?;
    let split = select_dense(&stats, params.m)?;
    let pair = TransitionPair::new(
        build_sem_transition(x, params.directed_semantic)?,
        build_geo_transition(grid, params.l_factor * grid.radius_km())?,
    )?;

    // dense-first ordering so the clamped rows are the leading identity block
    let perm: Vec<usize> = split.dense.iter().chain(&split.sparse).copied().collect();
    let permuted = pair.permuted(&perm);
    let m = split.dense.len();
    let result = propagate(&LabelMatrix::initial(n, m), &permuted, &params.propagate_params())?;
    if !result.converged {
        log::warn!("label propagation stopped at max_iter={} before converging", params.max_iter);
    }

    let mut y = Array2::zeros((n, m));
    for (row, &cell) in perm.iter().enumerate() {
        y.row_mut(cell).assign(&result.labels.y().row(row));
    }
    let fallback: Vec<usize> = (0..n)
        .map(|i| {
            (0..m)
                .min_by(|&a, &b| grid.distance_km(i, split.dense[a]).total_cmp(&grid.distance_km(i, split.dense[b])))
                .expect("m >= 1")
        })
        .collect();
    let assignment = assign(&LabelMatrix::new(y)?, Some(&fallback))?;
    let x_s = coarsen_tensor(x, &assignment)?;
    Ok(Coarsening {
        assignment,
        x_s,
        dense: split.dense,
        iterations: result.iterations,
        converged: result.converged,
    })
}

/// Adjusted Rand index between two flat partitions of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("adjusted_rand_index", format!("{} vs {} items", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&v| c2(v)).sum();
    let sa: f64 = rows.iter().map(|&v| c2(v)).sum();
    let sb: f64 = cols.iter().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(n as u64);
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < f64::EPSILON {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
