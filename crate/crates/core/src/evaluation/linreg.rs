use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RIDGE_JITTER: f64 = 1e-8;
const LASSO_TOL: f64 = 1e-6;
const LASSO_MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum RegressionMode {
    Ols,
    Lasso { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl LinearFit {
    pub fn predict(&self, row: impl IntoIterator<Item = f64>) -> f64 {
        self.intercept + self.coef.iter().zip(row).map(|(b, x)| b * x).sum::<f64>()
    }
}

/// Least squares with an intercept via the normal equations.
pub fn fit_ols(x: &Array2<f64>, y: &[f64]) -> Result<LinearFit> {
    let (n, p) = x.dim();
    if n != y.len() || n == 0 {
        return Err(Error::shape("fit_ols", format!("{n} design rows vs {} targets", y.len())));
    }
    let q = p + 1;
    let mut a = Array2::<f64>::zeros((q, q));
    let mut b = vec![0.0; q];
    let mut row = vec![1.0; q];
    for r in 0..n {
        for c in 0..p {
            row[c + 1] = x[[r, c]];
        }
        for i in 0..q {
            b[i] += row[i] * y[r];
            for j in i..q {
                a[[i, j]] += row[i] * row[j];
            }
        }
    }
    for i in 0..q {
        a[[i, i]] += RIDGE_JITTER;
        for j in 0..i {
            a[[i, j]] = a[[j, i]];
        }
    }
    let sol = solve(a, b)?;
    Ok(LinearFit {
        intercept: sol[0],
        coef: sol[1..].to_vec(),
    })
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Array2<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .expect("non-empty");
        if a[[piv, col]].abs() < 1e-300 {
            return Err(Error::Numerical("singular normal equations".into()));
        }
        if piv != col {
            for c in 0..n {
                a.swap([piv, c], [col, c]);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let f = a[[r, col]] / a[[col, col]];
            if f != 0.0 {
                for c in col..n {
                    a[[r, c]] -= f * a[[col, c]];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[[r, c]] * x[c]).sum();
        x[r] = (b[r] - s) / a[[r, r]];
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub fit: LinearFit,
    pub sweeps: usize,
    /// Objective `(1/2n)|y - b0 - X b|^2 + lambda |b|_1` after every sweep.
    pub objective: Vec<f64>,
}

/// Cyclic coordinate descent with soft-thresholding; the intercept is not penalised.
pub fn fit_lasso(x: &Array2<f64>, y: &[f64], lambda: f64) -> Result<LassoFit> {
    let (n, p) = x.dim();
    if n != y.len() || n == 0 {
        return Err(Error::shape("fit_lasso", format!("{n} design rows vs {} targets", y.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lasso penalty must be non-negative, got {lambda}")));
    }
    let nf = n as f64;
    let x_mean: Vec<f64> = (0..p).map(|c| x.column(c).sum() / nf).collect();
    let y_mean = y.iter().sum::<f64>() / nf;
    let y_var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / nf;
    // centred Gram matrix and correlations, both scaled by 1/n
    let mut gram = Array2::<f64>::zeros((p, p));
    let mut corr = vec![0.0; p];
    for r in 0..n {
        for i in 0..p {
            let xi = x[[r, i]] - x_mean[i];
            corr[i] += xi * (y[r] - y_mean) / nf;
            for j in i..p {
                gram[[i, j]] += xi * (x[[r, j]] - x_mean[j]) / nf;
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram[[i, j]] = gram[[j, i]];
        }
    }
    let objective = |beta: &[f64]| {
        let mut quad = 0.0;
        for i in 0..p {
            for j in 0..p {
                quad += beta[i] * gram[[i, j]] * beta[j];
            }
        }
        let lin: f64 = beta.iter().zip(&corr).map(|(b, c)| b * c).sum();
        let l1: f64 = beta.iter().map(|b| b.abs()).sum();
        0.5 * (y_var - 2.0 * lin + quad) + lambda * l1
    };

    let mut beta = vec![0.0; p];
    let mut trace = Vec::new();
    let mut sweeps = 0;
    while sweeps < LASSO_MAX_SWEEPS {
        sweeps += 1;
        let mut max_delta = 0.0f64;
        for j in 0..p {
            let gjj = gram[[j, j]];
            let new = if gjj <= 0.0 {
                0.0
            } else {
                let partial: f64 = corr[j] - (0..p).filter(|&k| k != j).map(|k| gram[[j, k]] * beta[k]).sum::<f64>();
                soft_threshold(partial, lambda) / gjj
            };
            max_delta = max_delta.max((new - beta[j]).abs());
            beta[j] = new;
        }
        trace.push(objective(&beta));
        if max_delta < LASSO_TOL {
            break;
        }
    }
    let intercept = y_mean - beta.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    Ok(LassoFit {
        fit: LinearFit { intercept, coef: beta },
        sweeps,
        objective: trace,
    })
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Independent autoregression per OD flow: the next `tau` values of a flow
/// from its own last `k` values. Flows that are zero throughout training
/// predict zero. Forecasts are clipped at zero.
#[derive(Debug, Clone)]
pub struct FlowRegression {
    n: usize,
    k: usize,
    tau: usize,
    fits: Vec<Option<Vec<LinearFit>>>,
}

impl FlowRegression {
    pub fn fit(train: ArrayView3<f64>, k: usize, tau: usize, mode: RegressionMode) -> Result<Self> {
        let (n, _, t) = train.dim();
        if k == 0 || tau == 0 || t < k + tau {
            return Err(Error::InvalidInput(format!("need k, tau >= 1 and at least k + tau slots, got T={t}")));
        }
        let rows = t - k - tau + 1;
        let mut fits = Vec::with_capacity(n * n);
        let mut design = Array2::<f64>::zeros((rows, k));
        let mut y = vec![0.0; rows];
        for i in 0..n {
            for j in 0..n {
                let series = train.slice(ndarray::s![i, j, ..]);
                if series.iter().all(|&v| v == 0.0) {
                    fits.push(None);
                    continue;
                }
                for r in 0..rows {
                    for c in 0..k {
                        design[[r, c]] = series[r + c];
                    }
                }
                let mut steps = Vec::with_capacity(tau);
                for s in 0..tau {
                    for (r, yv) in y.iter_mut().enumerate() {
                        *yv = series[r + k + s];
                    }
                    steps.push(match mode {
                        RegressionMode::Ols => fit_ols(&design, &y)?,
                        RegressionMode::Lasso { lambda } => fit_lasso(&design, &y, lambda)?.fit,
                    });
                }
                fits.push(Some(steps));
            }
        }
        Ok(Self { n, k, tau, fits })
    }

    /// Forecast N x N x tau from the last `k` slots.
    pub fn forecast(&self, history: ArrayView3<f64>) -> Result<Array3<f64>> {
        if history.dim() != (self.n, self.n, self.k) {
            return Err(Error::shape(
                "flow_regression",
                format!("history {:?}, expected {:?}", history.dim(), (self.n, self.n, self.k)),
            ));
        }
        let mut out = Array3::zeros((self.n, self.n, self.tau));
        for (idx, fit) in self.fits.iter().enumerate() {
            let Some(steps) = fit else { continue };
            let (i, j) = (idx / self.n, idx % self.n);
            for (s, f) in steps.iter().enumerate() {
                out[[i, j, s]] = f.predict((0..self.k).map(|c| history[[i, j, c]])).max(0.0);
            }
        }
        Ok(out)
    }

    pub fn fit_for(&self, i: usize, j: usize) -> Option<&[LinearFit]> {
        self.fits[i * self.n + j].as_deref()
    }
}
