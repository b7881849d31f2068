//! Self-checks shared by the test suite and the `verify` command: gradient
//! fidelity, permutation invariance of the OD embedding, decoder locality,
//! ZINB normalisation and the mode-product oracle.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{coarsen_tensor, Assignment, OdTensor};
use crate::diff::{grad_check, Graph, Mat, ParamId};
use crate::error::Result;
use crate::model::{EmbedSoftmax, ModelConfig, ModelInput, OdCed};
use crate::zinb;

/// Small model used by the gradient and locality checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_cells: 8,
        n_super: 3,
        k: 4,
        tau: 1,
        d: 8,
        heads: 2,
        n_queries: 4,
        poi_dim: 3,
        ffn_hidden: 16,
        pair_hidden: 4,
        ..ModelConfig::default()
    }
}

/// Random coarse history, POI features, round-robin assignment and sparse targets.
pub struct Case {
    pub x_s: Array3<f64>,
    pub poi_s: Mat,
    pub assignment: Assignment,
    pub mask: Mat,
    pub target: Array3<f64>,
}

impl Case {
    pub fn random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m, k) = (cfg.n_cells, cfg.n_super, cfg.k);
        let x_s = Array3::from_shape_fn((m, m, k), |_| rng.random_range(0..6) as f64);
        let poi_s = Mat::from_shape_fn((m, cfg.poi_dim), |_| f64::from(rng.random_bool(0.5) as u8));
        let labels: Vec<usize> = (0..n).map(|i| i % m).collect();
        let assignment = Assignment::from_labels(labels, m).expect("every super-cell has a member when m <= n");
        let mask = assignment.matrix();
        let target = Array3::from_shape_fn((n, n, cfg.tau), |_| {
            if rng.random_bool(0.6) {
                0.0
            } else {
                rng.random_range(1..5) as f64
            }
        });
        Self {
            x_s,
            poi_s,
            assignment,
            mask,
            target,
        }
    }

    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            x_s: self.x_s.view(),
            poi_s: &self.poi_s,
            mask: &self.mask,
        }
    }
}

/// Worst relative error of the end-to-end NLL gradient against central
/// differences, overall and per parameter group.
pub fn model_grad_error(cfg: &ModelConfig, seed: u64) -> Result<(f64, Vec<(String, f64)>)> {
    let model = OdCed::new(cfg.clone(), seed)?;
    let c = Case::random(cfg, seed + 1);
    let report = grad_check(
        |g, vars| {
            let w = model.weights(vars);
            model.loss(g, &w, &c.input(), c.target.view())
        },
        model.params().values(),
        1e-5,
        1e-3,
    )?;
    let groups = (0..model.params().len())
        .map(|i| (model.params().name(ParamId(i)).to_string(), report.per_input[i]))
        .collect();
    Ok((report.max_rel_error, groups))
}

/// Largest change of the OD embedding over random reorderings of the rows
/// aggregated into each super-cell.
pub fn embedding_permutation_error(mode: EmbedSoftmax, trials: usize, seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        embed_softmax: mode,
        ..tiny_config()
    };
    let m = cfg.n_super;
    let model = OdCed::new(cfg.clone(), seed)?;
    let c = Case::random(&cfg, seed + 1);
    let (o, d) = model.od_rows(c.x_s.view());
    let embed = |o: Mat, d: Mat| -> Result<Mat> {
        let mut g = Graph::new();
        let (_, w) = model.bind(&mut g);
        let e = model.od_embed(&mut g, &w, o, d)?;
        Ok(g.value(e).clone())
    };
    let base = embed(o.clone(), d.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let shuffle = |x: &Mat| Mat::from_shape_fn(x.dim(), |(row, t)| x[[(row / m) * m + perm[row % m], t]]);
        let e = embed(shuffle(&o), shuffle(&d))?;
        worst = worst.max(max_abs_diff(&e, &base));
    }
    Ok(worst)
}

/// Largest change of a cell's decoded row when super-cells other than its own
/// are perturbed. With `whole_rows` the coarse embeddings themselves move
/// (keys and values); otherwise only the value vectors of the other
/// super-cells are replaced.
pub fn decoder_leak(cfg: &ModelConfig, whole_rows: bool, trials: usize, seed: u64) -> Result<f64> {
    let model = OdCed::new(cfg.clone(), seed)?;
    let c = Case::random(cfg, seed + 1);
    let m = cfg.n_super;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let e_s = Mat::from_shape_fn((m, cfg.d), |_| rng.random_range(-1.0..1.0));
    let decode = |e: &Mat| -> Result<Mat> {
        let mut g = Graph::new();
        let (_, w) = model.bind(&mut g);
        let es = g.constant(e.clone());
        let out = model.decode(&mut g, &w, es, &c.mask)?;
        Ok(g.value(out).clone())
    };
    let base = decode(&e_s)?;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let target = rng.random_range(0..m);
        let out = if whole_rows {
            let mut e = e_s.clone();
            for other in (0..m).filter(|&s| s != target) {
                for col in 0..cfg.d {
                    e[[other, col]] += rng.random_range(-1.0..1.0);
                }
            }
            decode(&e)?
        } else {
            value_path_decode(&model, &c.mask, &e_s, target, &mut rng)?
        };
        for cell in c.assignment.members(target) {
            for col in 0..cfg.d {
                worst = worst.max((out[[cell, col]] - base[[cell, col]]).abs());
            }
        }
    }
    Ok(worst)
}

/// The decoder with value projections of every super-cell except `keep` replaced by noise.
fn value_path_decode(model: &OdCed, mask: &Mat, e_s: &Mat, keep: usize, rng: &mut ChaCha8Rng) -> Result<Mat> {
    let cfg = model.config();
    let mut g = Graph::new();
    let (_, w) = model.bind(&mut g);
    let es = g.constant(e_s.clone());
    let kv = g.layer_norm(es);
    let v = g.matmul(kv, w.dec.v)?;
    let mut noisy = g.value(v).clone();
    for s in (0..cfg.n_super).filter(|&s| s != keep) {
        for col in 0..noisy.ncols() {
            noisy[[s, col]] += rng.random_range(-1.0..1.0);
        }
    }
    let dh = cfg.head_dim();
    let maskv = g.constant(mask.clone());
    let q_in = g.layer_norm(w.cells);
    let q = g.matmul(q_in, w.dec.q)?;
    let k = g.matmul(kv, w.dec.k)?;
    let vn = g.constant(noisy);
    let mut heads = Vec::new();
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = g.slice_cols(vn, h * dh, (h + 1) * dh)?;
        let s = g.matmul_t(qh, kh)?;
        let s = g.scale(s, 1.0 / (cfg.d as f64).sqrt());
        let a = g.softmax_rows(s);
        let a = g.mul(a, maskv)?;
        heads.push(g.matmul(a, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    let att = g.matmul(cat, w.dec.o)?;
    let e1 = g.add(att, w.cells)?;
    let x1 = g.layer_norm(e1);
    let h1 = g.matmul(x1, w.dec_ffn.w1)?;
    let h1 = g.add_broadcast(h1, w.dec_ffn.b1)?;
    let h1 = g.relu(h1);
    let f = g.matmul(h1, w.dec_ffn.w2)?;
    let f = g.add_broadcast(f, w.dec_ffn.b2)?;
    let out = g.add(f, x1)?;
    Ok(g.value(out).clone())
}

/// Smallest truncated ZINB mass over a 5 x 5 x 3 grid of `(n, p, pi)`,
/// summing until the NB tail beyond the mean plus 30 standard deviations.
pub fn zinb_min_mass() -> Result<f64> {
    let mut worst = f64::INFINITY;
    for n in [0.3f64, 1.0, 3.0, 10.0, 40.0] {
        for p in [0.05f64, 0.25, 0.5, 0.75, 0.95] {
            for pi in [0.0, 0.3, 0.8] {
                let mean = n * (1.0 - p) / p;
                let sd = (n * (1.0 - p)).sqrt() / p;
                let upper = (mean + 30.0 * sd).ceil() as u64 + 10;
                let mut mass = 0.0;
                for x in 0..=upper {
                    mass += zinb::pmf(x, n, p, pi)?;
                }
                worst = worst.min(mass);
            }
        }
    }
    Ok(worst)
}

/// Relative gap between the point forecast `n (1 - p) / p` and the mean of
/// `samples` NB draws.
pub fn zinb_monte_carlo_gap(n: f64, p: f64, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        total += zinb::sample(&mut rng, n, p, 0.0)? as f64;
    }
    let analytic = n * (1.0 - p) / p;
    Ok((total / samples as f64 - analytic).abs() / analytic)
}

/// Largest gap between the ZINB log-pmf with `pi = 0` and the NB log-pmf.
pub fn zinb_pi_zero_gap() -> Result<f64> {
    let mut worst = 0.0f64;
    for n in [0.5, 2.0, 7.5] {
        for p in [0.1, 0.5, 0.9] {
            for x in [0u64, 1, 4, 20] {
                worst = worst.max((zinb::log_pmf(x, n, p, 0.0)? - zinb::nb_log_pmf(x, n, p)?).abs());
            }
        }
    }
    Ok(worst)
}

/// Triple-loop aggregation `x_s[a, b, t] = sum over i in a, j in b of x[i, j, t]`.
pub fn coarsen_oracle(x: &Array3<f64>, labels: &[usize], m: usize) -> Array3<f64> {
    let (n, _, t) = x.dim();
    let mut out = Array3::zeros((m, m, t));
    for i in 0..n {
        for j in 0..n {
            for s in 0..t {
                out[[labels[i], labels[j], s]] += x[[i, j, s]];
            }
        }
    }
    out
}

/// Number of random instances (N <= 10) on which the mode-product
/// coarsening differs from the loop oracle.
pub fn coarsen_mismatches(instances: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let n = rng.random_range(1..=10);
        let m = rng.random_range(1..=n);
        let t = rng.random_range(1..=4);
        // first m cells seed the super-cells so none is empty
        let mut labels: Vec<usize> = (0..n).map(|i| if i < m { i } else { rng.random_range(0..m) }).collect();
        labels.shuffle(&mut rng);
        let x = Array3::from_shape_fn((n, n, t), |_| rng.random_range(0..20) as f64);
        let y = Assignment::from_labels(labels.clone(), m)?;
        let got = coarsen_tensor(&OdTensor::new(x.clone())?, &y)?;
        if *got.data() != coarsen_oracle(&x, &labels, m) {
            bad += 1;
        }
    }
    Ok(bad)
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn suite(name: &'static str, value: Result<f64>, ok: impl Fn(f64) -> bool, what: &str) -> SuiteResult {
    match value {
        Ok(v) => SuiteResult {
            name,
            passed: ok(v),
            detail: format!("{what} = {v:e}"),
        },
        Err(e) => SuiteResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Every suite in a fixed order.
pub fn run_all() -> Vec<SuiteResult> {
    let grad = |cfg: &ModelConfig| model_grad_error(cfg, 20).map(|r| r.0);
    let rows_variant = ModelConfig {
        embed_softmax: EmbedSoftmax::Rows,
        renorm_mask: true,
        pair_hidden: 0,
        log_input: true,
        ..tiny_config()
    };
    let perm = || -> Result<f64> {
        Ok(embedding_permutation_error(EmbedSoftmax::Queries, 20, 2)?
            .max(embedding_permutation_error(EmbedSoftmax::Rows, 20, 2)?))
    };
    let renorm = ModelConfig {
        renorm_mask: true,
        ..tiny_config()
    };
    let locality = || -> Result<f64> {
        Ok(decoder_leak(&renorm, true, 20, 10)?.max(decoder_leak(&tiny_config(), false, 20, 11)?))
    };
    let mismatches = coarsen_mismatches(50, 7).map(|c| c as f64);
    vec![
        suite("gradient-check", grad(&tiny_config()), |e| e < 1e-3, "max relative error"),
        suite("gradient-check-variants", grad(&rows_variant), |e| e < 1e-3, "max relative error"),
        suite("permutation-invariance", perm(), |e| e <= 1e-9, "max embedding change"),
        suite("decoder-locality", locality(), |e| e == 0.0, "max leaked change"),
        suite("zinb-normalisation", zinb_min_mass(), |m| (1.0 - 1e-6..=1.0 + 1e-9).contains(&m), "min truncated mass"),
        suite("zinb-mean", zinb_monte_carlo_gap(3.0, 0.4, 200_000, 5), |g| g < 0.01, "relative gap"),
        suite("zinb-pi-zero", zinb_pi_zero_gap(), |g| g == 0.0, "max log-pmf gap"),
        suite("mode-product-oracle", mismatches, |c| c == 0.0, "mismatching instances"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for r in run_all() {
            assert!(r.passed, "{} failed: {}", r.name, r.detail);
        }
    }
}
