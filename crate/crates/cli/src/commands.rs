use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use odced::coarsening::{adjusted_rand_index, coarsen};
use odced::data::{
    generate_synthetic, load_assignment_csv, load_grid_csv, load_od_csv, load_poi_csv, od_csv_extent, read_od_csv,
    save_assignment_csv, save_grid_csv, save_od_csv, save_poi_csv, sparsity_rate, CellGrid, OdTensor, PoiMatrix,
};
use odced::evaluation::{metrics, write_table_csv, FlowRegression, HistoricalAverage, MetricReport, RegressionMode};
use odced::model::{Checkpoint, Forecaster, OdCed};
use odced::training::{make_windows, predict_range, save_history_csv, train_with, WindowDataset};
use odced::verify::{run_all, SuiteResult};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

const META_FILE: &str = "meta.json";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    odced::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| odced::Error::Serde(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Time layout of a data directory, written by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub n_cells: usize,
    pub n_slots: usize,
    pub slots_per_day: usize,
}

/// Grid, OD tensor and POI matrix of a data directory.
pub struct DataDir {
    pub grid: CellGrid,
    pub od: OdTensor,
    pub poi: PoiMatrix,
    pub slots_per_day: usize,
}

impl DataDir {
    /// Without `meta.json` the slot count is inferred from the OD file and
    /// the day length comes from the config.
    pub fn load(dir: &Path, cfg: &RunConfig) -> CliResult<Self> {
        let grid = load_grid_csv(dir.join("grid.csv"))?;
        let meta_path = dir.join(META_FILE);
        let meta: Option<DataMeta> = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| odced::Error::Serde(format!("{}: {e}", meta_path.display())))?)
        } else {
            None
        };
        let od = load_od_csv(dir.join("od.csv"), &grid, meta.as_ref().map(|m| m.n_slots))?;
        let poi = load_poi_csv(dir.join("poi.csv"))?;
        if poi.n_rows() != grid.len() {
            return Err(odced::Error::Config(format!("poi.csv has {} rows for {} cells", poi.n_rows(), grid.len())).into());
        }
        let slots_per_day = meta.map(|m| m.slots_per_day).unwrap_or(cfg.data.synth.slots_per_day);
        Ok(Self {
            grid,
            od,
            poi,
            slots_per_day,
        })
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let d = generate_synthetic(&cfg.data.synth, cfg.data.seed)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    save_grid_csv(out.join("grid.csv"), &d.grid)?;
    save_od_csv(out.join("od.csv"), &d.od)?;
    save_poi_csv(out.join("poi.csv"), &d.poi)?;
    save_assignment_csv(out.join("truth_assignment.csv"), &d.truth)?;
    let meta = DataMeta {
        n_cells: d.od.n_cells(),
        n_slots: d.od.n_slots(),
        slots_per_day: cfg.data.synth.slots_per_day,
    };
    write_json(&out.join(META_FILE), &meta)?;
    println!(
        "wrote {} cells x {} slots (sparsity {:.4}) to {}",
        meta.n_cells,
        meta.n_slots,
        sparsity_rate(&d.od)?,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CoarsenReport {
    pub n_cells: usize,
    pub n_super: usize,
    pub iterations: usize,
    pub converged: bool,
    pub dense_cells: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    pub sparsity_before: f64,
    pub sparsity_after: f64,
    pub ari_vs_truth: Option<f64>,
}

/// `<dir>/<stem>_<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}_{suffix}"))
}

pub fn coarsen_cmd(cfg: &RunConfig, od: &Path, grid: &Path, out: &Path, truth: Option<&Path>) -> CliResult<CoarsenReport> {
    let grid = load_grid_csv(grid)?;
    let x = load_od_csv(od, &grid, None)?;
    let c = coarsen(&x, &grid, &cfg.coarsening)?;
    save_assignment_csv(out, &c.assignment)?;
    save_od_csv(sibling(out, "coarse_od.csv"), &c.x_s)?;
    let ari = match truth {
        Some(t) => Some(adjusted_rand_index(c.assignment.labels(), load_assignment_csv(t)?.labels())?),
        None => None,
    };
    let report = CoarsenReport {
        n_cells: x.n_cells(),
        n_super: c.assignment.n_super(),
        iterations: c.iterations,
        converged: c.converged,
        dense_cells: c.dense.clone(),
        cluster_sizes: c.assignment.sizes(),
        sparsity_before: sparsity_rate(&x)?,
        sparsity_after: sparsity_rate(&c.x_s)?,
        ari_vs_truth: ari,
    };
    write_json(&sibling(out, "report.json"), &report)?;
    println!(
        "{} cells -> {} super-cells in {} iterations; sparsity {:.4} -> {:.4}{}",
        report.n_cells,
        report.n_super,
        report.iterations,
        report.sparsity_before,
        report.sparsity_after,
        ari.map(|a| format!("; ARI vs truth {a:.4}")).unwrap_or_default()
    );
    Ok(report)
}

fn windows(cfg: &RunConfig, od: &OdTensor) -> CliResult<WindowDataset> {
    Ok(make_windows(od, cfg.model.k, cfg.model.tau, cfg.train.split)?)
}

/// Coarsens on the slots the training windows read, so validation and test
/// periods never shape the super-cells.
pub fn fit_coarsening(cfg: &RunConfig, data: &DataDir, win: &WindowDataset) -> CliResult<odced::data::Assignment> {
    let seen = data.od.slots(0, win.train.end + win.k - 1 + win.tau)?;
    Ok(coarsen(&seen, &data.grid, &cfg.coarsening)?.assignment)
}

pub fn train_cmd(cfg: &RunConfig, data_dir: &Path, out: &Path, history: &Path) -> CliResult<()> {
    let data = DataDir::load(data_dir, cfg)?;
    cfg.check_data(data.od.n_cells(), data.poi.n_categories())?;
    let win = windows(cfg, &data.od)?;
    let assignment = fit_coarsening(cfg, &data, &win)?;
    let model = OdCed::new(cfg.model.clone(), cfg.train.seed)?;
    let init = Forecaster::with_cell_poi(model, assignment, &data.poi)?;
    log::info!(
        "training {} parameters on {} / {} / {} windows",
        init.model.num_params(),
        win.train.len(),
        win.val.len(),
        win.test.len()
    );
    let outcome = train_with(init, &win, &cfg.train, |r| {
        log::info!(
            "epoch {:>3}  train nll {:.5}  val nll {:.5}  val wmape {:.4}  lr {}",
            r.epoch,
            r.train_nll,
            r.val_nll,
            r.val_wmape,
            r.lr
        )
    })?;
    outcome.best.to_checkpoint(outcome.checkpoint_meta(&cfg.train)).save(out)?;
    save_history_csv(history, &outcome.history)?;
    println!("best epoch {} -> {}; history {}", outcome.best_epoch, out.display(), history.display());
    Ok(())
}

pub fn predict_cmd(ckpt: &Path, history: &Path, out: &Path) -> CliResult<()> {
    let f = Forecaster::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let (n, k) = (f.model.config().n_cells, f.model.config().k);
    let file = fs::File::open(history).map_err(|e| io_err(history, e))?;
    let x = read_od_csv(file, history, n, None)?;
    if x.n_slots() < k {
        return Err(odced::Error::InvalidInput(format!("history has {} slots, the model needs {k}", x.n_slots())).into());
    }
    let recent = x.slots(x.n_slots() - k, x.n_slots())?;
    let pred = f.predict_fine(&recent)?;
    save_od_csv(out, &OdTensor::new(pred)?)?;
    println!("forecast of {} slot(s) after the history -> {}", f.model.config().tau, out.display());
    Ok(())
}

fn load_pair(pred: &Path, truth: &Path) -> CliResult<(Array3<f64>, Array3<f64>)> {
    let (pc, ps) = od_csv_extent(pred)?;
    let (tc, ts) = od_csv_extent(truth)?;
    let (n, t) = (pc.max(tc), ps.max(ts));
    let read = |p: &Path| -> CliResult<Array3<f64>> {
        let file = fs::File::open(p).map_err(|e| io_err(p, e))?;
        Ok(read_od_csv(file, p, n, Some(t))?.into_data())
    };
    Ok((read(pred)?, read(truth)?))
}

pub fn evaluate_files(pred: &Path, truth: &Path, out: &Path) -> CliResult<MetricReport> {
    let (p, t) = load_pair(pred, truth)?;
    let report = metrics(&p, &t)?;
    write_json(out, &report)?;
    println!("rmse {:.4}  wmape {:.4}  cpc {:.4} over {} non-zero entries", report.rmse, report.wmape, report.cpc, report.n_nonzero);
    Ok(report)
}

/// Test-split forecasts of the classical baselines (and optionally a
/// checkpoint), fitted on every slot before the first test target.
pub fn evaluate_baselines(
    cfg: &RunConfig,
    data_dir: &Path,
    methods: &[String],
    ckpt: Option<&Path>,
) -> CliResult<Vec<(String, MetricReport)>> {
    let data = DataDir::load(data_dir, cfg)?;
    let win = windows(cfg, &data.od)?;
    if win.test.is_empty() {
        return Err(odced::Error::InvalidInput("no test windows".into()).into());
    }
    let truth = win.stacked_targets(win.test.clone());
    let fit_end = win.target_slot(win.test.start);
    let past = data.od.data().slice(s![.., .., ..fit_end]);
    let (k, tau) = (win.k, win.tau);
    let target_slots: Vec<usize> = win.test.clone().flat_map(|w| w + k..w + k + tau).collect();
    let lags = cfg.eval.regression_lags.unwrap_or(cfg.model.k);
    let mut rows = Vec::new();
    for m in methods {
        let pred = match m.as_str() {
            "ha" => HistoricalAverage::fit(past, data.od.start_slot(), data.slots_per_day, cfg.eval.ha_days)?
                .forecast_many(target_slots.iter().copied()),
            "ols" | "lasso" => {
                let mode = if m == "ols" {
                    RegressionMode::Ols
                } else {
                    RegressionMode::Lasso {
                        lambda: cfg.eval.lasso_lambda,
                    }
                };
                regression_forecast(&data.od, &win, past, lags, mode)?
            }
            other => return Err(CliError::Usage(format!("unknown baseline `{other}` (expected ha, ols or lasso)"))),
        };
        rows.push((m.clone(), metrics(&pred, &truth)?));
    }
    if let Some(path) = ckpt {
        let f = Forecaster::from_checkpoint(&Checkpoint::load(path)?)?;
        let pred = predict_range(&f, &win, win.test.clone())?;
        rows.push(("od-ced".to_string(), metrics(&pred, &truth)?));
    }
    Ok(rows)
}

fn regression_forecast(
    od: &OdTensor,
    win: &WindowDataset,
    past: ndarray::ArrayView3<f64>,
    lags: usize,
    mode: RegressionMode,
) -> CliResult<Array3<f64>> {
    let reg = FlowRegression::fit(past, lags, win.tau, mode)?;
    let mut parts = Vec::new();
    for w in win.test.clone() {
        let end = win.target_slot(w);
        if end < lags {
            return Err(odced::Error::InvalidInput(format!("{lags} lags reach before slot 0")).into());
        }
        parts.push(reg.forecast(od.data().slice(s![.., .., end - lags..end]))?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(ndarray::Axis(2), &views).map_err(|e| odced::Error::shape("stack", e.to_string()))?)
}

pub fn write_table(rows: &[(String, MetricReport)], out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(p) => {
            let f = fs::File::create(p).map_err(|e| io_err(p, e))?;
            write_table_csv(f, rows)?;
        }
        None => write_table_csv(std::io::stdout().lock(), rows)?,
    }
    Ok(())
}

pub fn verify_cmd() -> CliResult<Vec<SuiteResult>> {
    let results = run_all();
    for r in &results {
        println!("{} {:<26} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Verify(failed));
    }
    Ok(results)
}
