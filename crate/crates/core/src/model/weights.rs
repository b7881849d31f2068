use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::diff::{Mat, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnWeights<T> {
    pub q: T,
    pub k: T,
    pub v: T,
    pub o: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfnWeights<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Pair head: origin map `a`, destination map `b`, then a 1x1 convolution
/// over the concatenated pair feature split into its origin (`w_o`) and
/// destination (`w_d`) halves plus bias `b1`. With hidden channels, `out`
/// holds the second convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadWeights<T> {
    pub a: T,
    pub b: T,
    pub w_o: T,
    pub w_d: T,
    pub b1: T,
    pub out: Option<(T, T)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights<T> {
    pub embed_o: T,
    pub embed_d: T,
    pub queries: T,
    pub poi: T,
    pub enc: AttnWeights<T>,
    pub enc_ffn: FfnWeights<T>,
    pub cells: T,
    pub dec: AttnWeights<T>,
    pub dec_ffn: FfnWeights<T>,
    pub head: HeadWeights<T>,
}

impl<T: Copy> AttnWeights<T> {
    fn map<U>(&self, f: &impl Fn(T) -> U) -> AttnWeights<U> {
        AttnWeights {
            q: f(self.q),
            k: f(self.k),
            v: f(self.v),
            o: f(self.o),
        }
    }
}

impl<T: Copy> FfnWeights<T> {
    fn map<U>(&self, f: &impl Fn(T) -> U) -> FfnWeights<U> {
        FfnWeights {
            w1: f(self.w1),
            b1: f(self.b1),
            w2: f(self.w2),
            b2: f(self.b2),
        }
    }
}

impl<T: Copy> Weights<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Weights<U> {
        let h = &self.head;
        Weights {
            embed_o: f(self.embed_o),
            embed_d: f(self.embed_d),
            queries: f(self.queries),
            poi: f(self.poi),
            enc: self.enc.map(&f),
            enc_ffn: self.enc_ffn.map(&f),
            cells: f(self.cells),
            dec: self.dec.map(&f),
            dec_ffn: self.dec_ffn.map(&f),
            head: HeadWeights {
                a: f(h.a),
                b: f(h.b),
                w_o: f(h.w_o),
                w_d: f(h.w_d),
                b1: f(h.b1),
                out: h.out.map(|(w2, b2)| (f(w2), f(b2))),
            },
        }
    }
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform in `±1/sqrt(fan_in)`.
    fn uniform_fan(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let m = Mat::from_shape_fn((rows, cols), |_| self.rng.random_range(-bound..bound));
        self.store.add(name, m).0
    }

    fn uniform(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.uniform_fan(name, rows, cols, rows)
    }

    fn normal(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        let dist = Normal::new(0.0, 0.02).expect("valid std");
        let m = Mat::from_shape_fn((rows, cols), |_| dist.sample(self.rng));
        self.store.add(name, m).0
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.store.add(name, Mat::zeros((rows, cols))).0
    }

    fn attn(&mut self, prefix: &str, d: usize, inner: usize) -> AttnWeights<usize> {
        AttnWeights {
            q: self.uniform(&format!("{prefix}.w_q"), d, inner),
            k: self.uniform(&format!("{prefix}.w_k"), d, inner),
            v: self.uniform(&format!("{prefix}.w_v"), d, inner),
            o: self.uniform(&format!("{prefix}.w_o"), inner, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> FfnWeights<usize> {
        FfnWeights {
            w1: self.uniform(&format!("{prefix}.w1"), d, hidden),
            b1: self.zeros(&format!("{prefix}.b1"), 1, hidden),
            w2: self.uniform(&format!("{prefix}.w2"), hidden, d),
            b2: self.zeros(&format!("{prefix}.b2"), 1, d),
        }
    }
}

pub(super) fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (ParamStore, Weights<usize>) {
    let d = cfg.d;
    let inner = cfg.heads * cfg.head_dim();
    let out3 = 3 * cfg.tau;
    let mut it = Init {
        store: ParamStore::new(),
        rng,
    };
    let embed_o = it.uniform("embed.w_o", cfg.k, d);
    let embed_d = it.uniform("embed.w_d", cfg.k, d);
    let queries = it.normal("embed.queries", cfg.n_queries, d);
    let poi = it.uniform("poi.w", cfg.poi_dim, d);
    let enc = it.attn("enc", d, inner);
    let enc_ffn = it.ffn("enc.ffn", d, cfg.ffn_hidden);
    let cells = it.normal("dec.cells", cfg.n_cells, d);
    let dec = it.attn("dec", d, inner);
    let dec_ffn = it.ffn("dec.ffn", d, cfg.ffn_hidden);
    let a = it.uniform("head.a", d, d);
    let b = it.uniform("head.b", d, d);
    let conv = if cfg.pair_hidden > 0 { cfg.pair_hidden } else { out3 };
    // the 1x1 convolution sees the 2d-wide concatenated pair feature
    let w_o = it.uniform_fan("head.conv1.w_o", d, conv, 2 * d);
    let w_d = it.uniform_fan("head.conv1.w_d", d, conv, 2 * d);
    let b1 = it.zeros("head.conv1.b", 1, conv);
    let out = (cfg.pair_hidden > 0).then(|| {
        (
            it.uniform("head.conv2.w", cfg.pair_hidden, out3),
            it.zeros("head.conv2.b", 1, out3),
        )
    });
    let ids = Weights {
        embed_o,
        embed_d,
        queries,
        poi,
        enc,
        enc_ffn,
        cells,
        dec,
        dec_ffn,
        head: HeadWeights { a, b, w_o, w_d, b1, out },
    };
    (it.store, ids)
}
