//! Error metrics over non-zero ground-truth demands and the classical baselines.

mod ha;
mod linreg;

pub use ha::HistoricalAverage;
pub use linreg::{fit_lasso, fit_ols, FlowRegression, LassoFit, LinearFit, RegressionMode};

use std::io::Write;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotMetrics {
    pub slot: usize,
    pub n_nonzero: usize,
    pub rmse: f64,
    pub wmape: f64,
    pub cpc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub wmape: f64,
    pub cpc: f64,
    pub n_nonzero: usize,
    /// Slots without any non-zero demand are omitted.
    pub per_slot: Vec<SlotMetrics>,
}

#[derive(Default)]
struct Acc {
    n: usize,
    sq: f64,
    abs: f64,
    truth: f64,
    pred: f64,
    min: f64,
}

impl Acc {
    fn add(&mut self, p: f64, t: f64) {
        self.n += 1;
        self.sq += (p - t) * (p - t);
        self.abs += (p - t).abs();
        self.truth += t;
        self.pred += p;
        self.min += p.min(t);
    }

    fn finish(&self) -> (f64, f64, f64) {
        let rmse = (self.sq / self.n as f64).sqrt();
        let wmape = self.abs / self.truth;
        let cpc = 2.0 * self.min / (self.pred + self.truth);
        (rmse, wmape, cpc)
    }
}

/// RMSE, wMAPE and CPC over the entries where `truth > 0`.
pub fn metrics(pred: &Array3<f64>, truth: &Array3<f64>) -> Result<MetricReport> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape("metrics", format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    let slots = truth.dim().2;
    let mut total = Acc::default();
    let mut per = (0..slots).map(|_| Acc::default()).collect::<Vec<_>>();
    for ((idx, &t), &p) in truth.indexed_iter().zip(pred.iter()) {
        if t > 0.0 {
            total.add(p, t);
            per[idx.2].add(p, t);
        }
    }
    if total.n == 0 {
        return Err(Error::NoNonZero);
    }
    let (rmse, wmape, cpc) = total.finish();
    let per_slot = per
        .iter()
        .enumerate()
        .filter(|(_, a)| a.n > 0)
        .map(|(slot, a)| {
            let (rmse, wmape, cpc) = a.finish();
            SlotMetrics {
                slot,
                n_nonzero: a.n,
                rmse,
                wmape,
                cpc,
            }
        })
        .collect();
    Ok(MetricReport {
        rmse,
        wmape,
        cpc,
        n_nonzero: total.n,
        per_slot,
    })
}

/// `method,rmse,wmape,cpc` table.
pub fn write_table_csv<W: Write>(w: W, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "rmse", "wmape", "cpc"])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for (name, m) in rows {
        out.write_record([name.clone(), m.rmse.to_string(), m.wmape.to_string(), m.cpc.to_string()])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::Serde(e.to_string()))
}
