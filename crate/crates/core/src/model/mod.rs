//! The coarse-encode / fine-decode forecaster.
//!
//! Pipeline for one window: coarse history (M x M x K) -> OD embedding with
//! aggregation queries, plus POI embedding -> self-attention encoder over
//! super-cells -> cross-attention decoder from learned cell embeddings, with
//! the cell-to-super-cell assignment as a multiplicative attention mask ->
//! per-pair head producing ZINB parameters for every fine OD pair.

mod checkpoint;
mod config;
mod weights;

pub use checkpoint::{Checkpoint, Forecaster, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{EmbedSoftmax, ModelConfig};
pub use weights::{AttnWeights, FfnWeights, HeadWeights, Weights};

use ndarray::{Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Graph, Mat, ParamStore, Var};
use crate::error::{Error, Result};
use crate::zinb::{self, Reduction, ZinbParams, N_MIN, PI_MAX, P_MAX, P_MIN};

/// Inputs for one forecast: coarse history, super-cell POI and the N x M
/// one-hot assignment used as the decoder mask.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub x_s: ArrayView3<'a, f64>,
    pub poi_s: &'a Mat,
    pub mask: &'a Mat,
}

/// Head outputs on a graph, each N² x tau with row `i * N + j`.
#[derive(Debug, Clone, Copy)]
pub struct HeadOut {
    pub n: Var,
    pub p: Var,
    pub pi: Var,
}

#[derive(Debug, Clone)]
pub struct OdCed {
    cfg: ModelConfig,
    store: ParamStore,
    ids: Weights<usize>,
}

impl OdCed {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, ids) = weights::init(&cfg, &mut rng);
        Ok(Self { cfg, store, ids })
    }

    /// Rebuild from stored tensors, checking every name and shape.
    pub fn from_store(cfg: ModelConfig, store: &ParamStore) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        model.store.load_from(store)?;
        if store.len() != model.store.len() {
            return Err(Error::Serde(format!(
                "checkpoint has {} tensors, model expects {}",
                store.len(),
                model.store.len()
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    /// Place all parameters on `g`; `Var`s follow store order.
    pub fn bind(&self, g: &mut Graph) -> (Vec<Var>, Weights<Var>) {
        let vars = self.store.bind(g);
        let w = self.weights(&vars);
        (vars, w)
    }

    /// Map store-ordered `Var`s (e.g. supplied by a gradient checker) to named weights.
    pub fn weights(&self, vars: &[Var]) -> Weights<Var> {
        self.ids.map(|i| vars[i])
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let c = &self.cfg;
        let (m, n, k) = (c.n_super, c.n_cells, c.k);
        if input.x_s.dim() != (m, m, k) {
            return Err(Error::shape("forward", format!("coarse history {:?}, expected {:?}", input.x_s.dim(), (m, m, k))));
        }
        if input.poi_s.dim() != (m, c.poi_dim) {
            return Err(Error::shape("poi_embed", format!("POI {:?}, expected {:?}", input.poi_s.dim(), (m, c.poi_dim))));
        }
        if input.mask.dim() != (n, m) {
            return Err(Error::shape("decode", format!("mask {:?}, expected {:?}", input.mask.dim(), (n, m))));
        }
        Ok(())
    }

    /// Origin and destination row stacks: row `i * M + r` holds
    /// `x_s(i, r, :)` and `x_s(r, i, :)` respectively.
    pub fn od_rows(&self, x_s: ArrayView3<f64>) -> (Mat, Mat) {
        let (m, _, k) = x_s.dim();
        let f = |v: f64| if self.cfg.log_input { v.ln_1p() } else { v };
        let o = Mat::from_shape_fn((m * m, k), |(row, t)| f(x_s[[row / m, row % m, t]]));
        let d = Mat::from_shape_fn((m * m, k), |(row, t)| f(x_s[[row % m, row / m, t]]));
        (o, d)
    }

    /// Super-cell traffic embedding E_od (M x d) from the row stacks.
    pub fn od_embed(&self, g: &mut Graph, w: &Weights<Var>, o_rows: Mat, d_rows: Mat) -> Result<Var> {
        let m = self.cfg.n_super;
        let o = g.constant(o_rows);
        let d = g.constant(d_rows);
        let o_hat = g.matmul(o, w.embed_o)?;
        let d_hat = g.matmul(d, w.embed_d)?;
        let e_o = self.aggregate(g, o_hat, w.queries, m)?;
        let e_d = self.aggregate(g, d_hat, w.queries, m)?;
        g.add(e_o, e_d)
    }

    /// `sum_r sum_j alpha_rj * rows_r` within each block of M rows.
    fn aggregate(&self, g: &mut Graph, rows: Var, queries: Var, m: usize) -> Result<Var> {
        let scores = g.matmul_t(rows, queries)?;
        let alpha = match self.cfg.embed_softmax {
            EmbedSoftmax::Queries => g.softmax_rows(scores),
            EmbedSoftmax::Rows => g.group_softmax_cols(scores, m)?,
        };
        let weight = g.sum_cols(alpha);
        let weighted = g.mul_broadcast(rows, weight)?;
        g.group_sum_rows(weighted, m)
    }

    /// E_s = E_od + P^s W_poi.
    pub fn embed(&self, g: &mut Graph, w: &Weights<Var>, input: &ModelInput) -> Result<Var> {
        let (o, d) = self.od_rows(input.x_s);
        let e_od = self.od_embed(g, w, o, d)?;
        let poi = g.constant(input.poi_s.clone());
        let e_poi = g.matmul(poi, w.poi)?;
        g.add(e_od, e_poi)
    }

    fn attention(&self, g: &mut Graph, w: &AttnWeights<Var>, q_in: Var, kv_in: Var, mask: Option<Var>) -> Result<Var> {
        let dh = self.cfg.head_dim();
        let inv_sqrt_d = 1.0 / (self.cfg.d as f64).sqrt();
        let q = g.matmul(q_in, w.q)?;
        let k = g.matmul(kv_in, w.k)?;
        let v = g.matmul(kv_in, w.v)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (from, to) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, from, to)?;
            let kh = g.slice_cols(k, from, to)?;
            let vh = g.slice_cols(v, from, to)?;
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, inv_sqrt_d);
            let mut a = g.softmax_rows(s);
            if let Some(mask) = mask {
                a = g.mul(a, mask)?;
                if self.cfg.renorm_mask {
                    let total = g.sum_cols(a);
                    a = g.div_broadcast(a, total)?;
                }
            }
            heads.push(g.matmul(a, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        g.matmul(cat, w.o)
    }

    fn ffn(&self, g: &mut Graph, w: &FfnWeights<Var>, x: Var) -> Result<Var> {
        let h = g.matmul(x, w.w1)?;
        let h = g.add_broadcast(h, w.b1)?;
        let h = g.relu(h);
        let out = g.matmul(h, w.w2)?;
        g.add_broadcast(out, w.b2)
    }

    /// Ê_s from E_s: pre-norm self-attention and feed-forward, both residual.
    pub fn encode(&self, g: &mut Graph, w: &Weights<Var>, e_s: Var) -> Result<Var> {
        let x = g.layer_norm(e_s);
        let att = self.attention(g, &w.enc, x, x, None)?;
        let e1 = g.add(att, e_s)?;
        let x1 = g.layer_norm(e1);
        let f = self.ffn(g, &w.enc_ffn, x1)?;
        g.add(f, e1)
    }

    /// Ê_g from the cell table and Ê_s. The second residual adds LN(E_g').
    pub fn decode(&self, g: &mut Graph, w: &Weights<Var>, e_hat_s: Var, mask: &Mat) -> Result<Var> {
        let mask = g.constant(mask.clone());
        let q = g.layer_norm(w.cells);
        let kv = g.layer_norm(e_hat_s);
        let att = self.attention(g, &w.dec, q, kv, Some(mask))?;
        let e1 = g.add(att, w.cells)?;
        let x1 = g.layer_norm(e1);
        let f = self.ffn(g, &w.dec_ffn, x1)?;
        g.add(f, x1)
    }

    /// Per-pair ZINB parameters from cell representations.
    pub fn head(&self, g: &mut Graph, w: &Weights<Var>, e_hat_g: Var) -> Result<HeadOut> {
        let tau = self.cfg.tau;
        let h = &w.head;
        let origin = g.matmul(e_hat_g, h.a)?;
        let dest = g.matmul(e_hat_g, h.b)?;
        let u = g.matmul(origin, h.w_o)?;
        let u = g.add_broadcast(u, h.b1)?;
        let v = g.matmul(dest, h.w_d)?;
        let z = match h.out {
            Some((w2, b2)) => {
                let o = g.pair_relu_matmul(u, v, w2)?;
                g.add_broadcast(o, b2)?
            }
            None => g.pair_sum(u, v)?,
        };
        let zn = g.slice_cols(z, 0, tau)?;
        let zp = g.slice_cols(z, tau, 2 * tau)?;
        let zpi = g.slice_cols(z, 2 * tau, 3 * tau)?;
        let n = g.softplus(zn);
        let p = g.sigmoid(zp);
        let pi = g.sigmoid(zpi);
        Ok(HeadOut {
            n: g.clamp(n, N_MIN, f64::INFINITY),
            p: g.clamp(p, P_MIN, P_MAX),
            pi: g.clamp(pi, 0.0, PI_MAX),
        })
    }

    pub fn forward_graph(&self, g: &mut Graph, w: &Weights<Var>, input: &ModelInput) -> Result<HeadOut> {
        self.check_input(input)?;
        let e_s = self.embed(g, w, input)?;
        let e_hat_s = self.encode(g, w, e_s)?;
        let e_hat_g = self.decode(g, w, e_hat_s, input.mask)?;
        self.head(g, w, e_hat_g)
    }

    /// Per-element mean negative log-likelihood of `target` (N x N x tau).
    pub fn loss(&self, g: &mut Graph, w: &Weights<Var>, input: &ModelInput, target: ArrayView3<f64>) -> Result<Var> {
        let (n, tau) = (self.cfg.n_cells, self.cfg.tau);
        if target.dim() != (n, n, tau) {
            return Err(Error::shape("loss", format!("target {:?}, expected {:?}", target.dim(), (n, n, tau))));
        }
        let out = self.forward_graph(g, w, input)?;
        let x = Mat::from_shape_fn((n * n, tau), |(row, s)| target[[row / n, row % n, s]]);
        zinb::nll_op(g, out.n, out.p, out.pi, &x, Reduction::Mean)
    }

    pub fn forward(&self, input: &ModelInput) -> Result<ZinbParams> {
        let mut g = Graph::new();
        let (_, w) = self.bind(&mut g);
        let out = self.forward_graph(&mut g, &w, input)?;
        let (n, tau) = (self.cfg.n_cells, self.cfg.tau);
        let to3 = |v: Var| -> Array3<f64> {
            g.value(v)
                .to_shape((n, n, tau))
                .expect("head rows are i * N + j")
                .to_owned()
        };
        ZinbParams::new(to3(out.n), to3(out.p), to3(out.pi))
    }

    /// Point forecast N x N x tau: conditional mean of the predicted distribution.
    pub fn predict(&self, input: &ModelInput) -> Result<Array3<f64>> {
        let params = self.forward(input)?;
        Ok(zinb::mean(&params, self.cfg.zero_inflated_mean))
    }
}
