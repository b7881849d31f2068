//! Sliding-window datasets, Adam, the step-decay schedule and the training loop.

mod adam;
mod history;

pub use adam::Adam;
pub use history::{read_history_csv, save_history_csv, write_history_csv, EpochRecord};

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{coarsen_tensor, OdTensor};
use crate::diff::{Graph, Mat};
use crate::error::{Error, Result};
use crate::evaluation::metrics;
use crate::model::{Forecaster, ModelInput};
use crate::zinb::{self, Reduction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Halve the learning rate every this many epochs.
    pub lr_halving_every: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many epochs without a validation improvement; 0 disables.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables.
    pub clip_norm: Option<f64>,
    /// Train / validation / test fractions of the windows.
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.004,
            lr_halving_every: 50,
            batch_size: 32,
            max_epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 0,
            seed: 0,
            clip_norm: Some(5.0),
            split: [0.5, 0.25, 0.25],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || self.batch_size == 0 || self.lr_halving_every == 0 {
            return Err(Error::Config("need lr0 > 0, batch_size >= 1 and lr_halving_every >= 1".into()));
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be in [0, 1] and sum to 1, got {:?}", self.split)));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = epoch.saturating_sub(1) / self.lr_halving_every;
        self.lr0 * 0.5f64.powi(halvings as i32)
    }
}

/// Windows over one series: window `w` reads slots `w..w+k` and predicts
/// `w+k..w+k+tau`. Splits are contiguous, chronological ranges of windows;
/// `tau - 1` windows are dropped at the start of validation and test so no
/// target slot belongs to two splits.
#[derive(Debug, Clone)]
pub struct WindowDataset {
    pub series: OdTensor,
    pub k: usize,
    pub tau: usize,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn make_windows(x: &OdTensor, k: usize, tau: usize, split: [f64; 3]) -> Result<WindowDataset> {
    let t = x.n_slots();
    if k == 0 || tau == 0 {
        return Err(Error::InvalidInput("history and horizon must be positive".into()));
    }
    if t < k + tau {
        return Err(Error::InvalidInput(format!("series of {t} slots is shorter than k + tau = {}", k + tau)));
    }
    let total = t - k - tau + 1;
    let n_train = (split[0] * total as f64).floor() as usize;
    let n_val = ((split[1] * total as f64).floor() as usize).min(total - n_train);
    let gap = tau - 1;
    let val_end = n_train + n_val;
    Ok(WindowDataset {
        series: x.clone(),
        k,
        tau,
        train: 0..n_train,
        val: (n_train + gap).min(val_end)..val_end,
        test: (val_end + gap).min(total)..total,
    })
}

impl WindowDataset {
    pub fn n_windows(&self) -> usize {
        self.test.end
    }

    pub fn history(&self, w: usize) -> ArrayView3<'_, f64> {
        self.series.data().slice(s![.., .., w..w + self.k])
    }

    pub fn target(&self, w: usize) -> ArrayView3<'_, f64> {
        self.series.data().slice(s![.., .., w + self.k..w + self.k + self.tau])
    }

    /// Absolute slot index of the first target of window `w`.
    pub fn target_slot(&self, w: usize) -> usize {
        w + self.k
    }

    /// Targets of a range of windows stacked along time (window-major, then step).
    pub fn stacked_targets(&self, windows: Range<usize>) -> Array3<f64> {
        stack(windows.map(|w| self.target(w).to_owned()).collect(), self.series.n_cells())
    }
}

pub(crate) fn stack(parts: Vec<Array3<f64>>, n: usize) -> Array3<f64> {
    if parts.is_empty() {
        return Array3::zeros((n, n, 0));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(2), &views).expect("equal cell counts")
}

/// Coarse series aligned with a dataset, computed once.
#[derive(Debug, Clone)]
pub struct CoarseSeries {
    data: Array3<f64>,
    k: usize,
}

impl CoarseSeries {
    pub fn new(data: &WindowDataset, f: &Forecaster) -> Result<Self> {
        let coarse = coarsen_tensor(&data.series, &f.assignment)?;
        Ok(Self {
            data: coarse.into_data(),
            k: data.k,
        })
    }

    pub fn history(&self, w: usize) -> ArrayView3<'_, f64> {
        self.data.slice(s![.., .., w..w + self.k])
    }
}

/// Mean per-element NLL and point forecast of one window, without gradients.
pub fn evaluate_window(f: &Forecaster, input: &ModelInput, target: ArrayView3<f64>) -> Result<(f64, Array3<f64>)> {
    let model = &f.model;
    let cfg = model.config();
    let (n, tau) = (cfg.n_cells, cfg.tau);
    let mut g = Graph::new();
    let (_, w) = model.bind(&mut g);
    let out = model.forward_graph(&mut g, &w, input)?;
    let x = Mat::from_shape_fn((n * n, tau), |(row, s)| target[[row / n, row % n, s]]);
    let loss = zinb::nll_op(&mut g, out.n, out.p, out.pi, &x, Reduction::Mean)?;
    let to3 = |v| g.value(v).to_shape((n, n, tau)).expect("row-major pairs").to_owned();
    let params = zinb::ZinbParams::new(to3(out.n), to3(out.p), to3(out.pi))?;
    Ok((g.value(loss)[[0, 0]], zinb::mean(&params, cfg.zero_inflated_mean)))
}

/// Mean NLL over a window range and the stacked forecasts.
pub fn evaluate_range(f: &Forecaster, data: &WindowDataset, coarse: &CoarseSeries, windows: Range<usize>) -> Result<(f64, Array3<f64>)> {
    let count = windows.len();
    let mut nll = 0.0;
    let mut preds = Vec::with_capacity(count);
    for w in windows {
        let (l, p) = evaluate_window(f, &f.input(coarse.history(w)), data.target(w))?;
        nll += l;
        preds.push(p);
    }
    let n = data.series.n_cells();
    Ok((if count > 0 { nll / count as f64 } else { f64::NAN }, stack(preds, n)))
}

/// Forecasts for a range of windows, stacked along time.
pub fn predict_range(f: &Forecaster, data: &WindowDataset, windows: Range<usize>) -> Result<Array3<f64>> {
    let coarse = CoarseSeries::new(data, f)?;
    Ok(evaluate_range(f, data, &coarse, windows)?.1)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation NLL.
    pub best: Forecaster,
    pub best_epoch: usize,
    /// Epoch 0 holds the untrained model's losses.
    pub initial: EpochRecord,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn checkpoint_meta(&self, cfg: &TrainConfig) -> BTreeMap<String, f64> {
        let best = self.history.iter().find(|r| r.epoch == self.best_epoch).unwrap_or(&self.initial);
        BTreeMap::from([
            ("best_epoch".to_string(), self.best_epoch as f64),
            ("val_nll".to_string(), best.val_nll),
            ("seed".to_string(), cfg.seed as f64),
        ])
    }
}

fn val_record(f: &Forecaster, data: &WindowDataset, coarse: &CoarseSeries, epoch: usize, train_nll: f64, lr: f64) -> Result<EpochRecord> {
    let (val_nll, preds) = evaluate_range(f, data, coarse, data.val.clone())?;
    let truth = data.stacked_targets(data.val.clone());
    let val_wmape = metrics(&preds, &truth).map(|m| m.wmape).unwrap_or(f64::NAN);
    Ok(EpochRecord {
        epoch,
        train_nll,
        val_nll,
        val_wmape,
        lr,
    })
}

/// Mini-batch Adam on the per-element mean NLL, keeping the parameters
/// with the best validation NLL.
pub fn train(init: Forecaster, data: &WindowDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_with(init, data, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch (including epoch 0).
pub fn train_with<F>(init: Forecaster, data: &WindowDataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    let mcfg = init.model.config().clone();
    if data.k != mcfg.k || data.tau != mcfg.tau || data.series.n_cells() != mcfg.n_cells {
        return Err(Error::shape(
            "train",
            format!(
                "dataset k={} tau={} N={} vs model k={} tau={} N={}",
                data.k,
                data.tau,
                data.series.n_cells(),
                mcfg.k,
                mcfg.tau,
                mcfg.n_cells
            ),
        ));
    }
    if data.train.is_empty() {
        return Err(Error::InvalidInput("no training windows".into()));
    }
    let coarse = CoarseSeries::new(data, &init)?;
    let mut current = init;
    let initial_train = evaluate_range(&current, data, &coarse, data.train.clone())?.0;
    let initial = val_record(&current, data, &coarse, 0, initial_train, 0.0)?;
    on_epoch(&initial);

    let mut best = current.clone();
    let mut best_val = initial.val_nll;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut adam = Adam::new(current.model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = data.train.clone().collect();

    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Mat> = current.model.params().values().iter().map(|v| Mat::zeros(v.dim())).collect();
            let mut batch_loss = 0.0;
            for &w in batch {
                let mut g = Graph::new();
                let (vars, wts) = current.model.bind(&mut g);
                let input = current.input(coarse.history(w));
                let loss = current.model.loss(&mut g, &wts, &input, data.target(w))?;
                let l = g.value(loss)[[0, 0]];
                if !l.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss {l} at epoch {epoch}, batch {b}, window {w}")));
                }
                batch_loss += l;
                g.backward(loss)?;
                for (acc, v) in grads.iter_mut().zip(&vars) {
                    if let Some(gv) = g.grad(*v) {
                        *acc += gv;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for gr in grads.iter_mut() {
                *gr *= scale;
            }
            let norm = grads.iter().flat_map(|gr| gr.iter()).map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at epoch {epoch}, batch {b}")));
            }
            if let Some(max) = cfg.clip_norm {
                if norm > max {
                    for gr in grads.iter_mut() {
                        *gr *= max / norm;
                    }
                }
            }
            adam.step(current.model.params_mut(), &grads, lr);
            loss_sum += batch_loss;
        }
        let train_nll = loss_sum / order.len() as f64;
        let record = val_record(&current, data, &coarse, epoch, train_nll, lr)?;
        if !record.val_nll.is_finite() && !data.val.is_empty() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        on_epoch(&record);
        // with no validation windows the latest parameters are kept
        if data.val.is_empty() || record.val_nll < best_val {
            best_val = record.val_nll;
            best = current.clone();
            best_epoch = epoch;
        }
        history.push(record);
        if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        initial,
        history,
    })
}

#[cfg(test)]
mod tests;
