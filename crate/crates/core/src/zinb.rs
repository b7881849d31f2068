//! Zero-inflated negative binomial counts.
//!
//! `NB(x; n, p) = C(x + n - 1, x) p^n (1 - p)^x` with mean `n (1 - p) / p`;
//! the zero-inflated mixture adds an excess-zero mass `pi`.

use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::diff::{Graph, Mat, Var};
use crate::error::{Error, Result};

pub const P_MIN: f64 = 1e-6;
pub const P_MAX: f64 = 1.0 - 1e-6;
pub const PI_MAX: f64 = 1.0 - 1e-6;
pub const N_MIN: f64 = 1e-6;

/// Distribution parameters for every (origin, destination, step), each N x N x tau.
#[derive(Debug, Clone, PartialEq)]
pub struct ZinbParams {
    pub n: Array3<f64>,
    pub p: Array3<f64>,
    pub pi: Array3<f64>,
}

impl ZinbParams {
    pub fn new(n: Array3<f64>, p: Array3<f64>, pi: Array3<f64>) -> Result<Self> {
        if n.dim() != p.dim() || n.dim() != pi.dim() {
            return Err(Error::shape(
                "zinb_params",
                format!("n {:?}, p {:?}, pi {:?}", n.dim(), p.dim(), pi.dim()),
            ));
        }
        let out = Self { n, p, pi };
        for ((&n, &p), &pi) in out.n.iter().zip(&out.p).zip(&out.pi) {
            check_domain(n, p, pi)?;
        }
        Ok(out)
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.n.dim()
    }
}

fn check_domain(n: f64, p: f64, pi: f64) -> Result<()> {
    if !(n > 0.0 && n.is_finite()) || !(p > 0.0 && p < 1.0) || !(0.0..1.0).contains(&pi) {
        return Err(Error::InvalidInput(format!(
            "ZINB parameters out of domain: n={n}, p={p}, pi={pi}"
        )));
    }
    Ok(())
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn nb_log_pmf(x: u64, n: f64, p: f64) -> Result<f64> {
    check_domain(n, p, 0.0)?;
    Ok(nb_log_pmf_unchecked(x as f64, n, p))
}

fn nb_log_pmf_unchecked(x: f64, n: f64, p: f64) -> f64 {
    if x == 0.0 {
        return n * p.ln();
    }
    ln_gamma(x + n) - ln_gamma(n) - ln_gamma(x + 1.0) + n * p.ln() + x * (-p).ln_1p()
}

pub fn log_pmf(x: u64, n: f64, p: f64, pi: f64) -> Result<f64> {
    check_domain(n, p, pi)?;
    Ok(log_pmf_unchecked(x as f64, n, p, pi))
}

fn log_pmf_unchecked(x: f64, n: f64, p: f64, pi: f64) -> f64 {
    if x == 0.0 {
        let ln_pi = if pi > 0.0 { pi.ln() } else { f64::NEG_INFINITY };
        log_add_exp(ln_pi, (-pi).ln_1p() + nb_log_pmf_unchecked(0.0, n, p))
    } else {
        (-pi).ln_1p() + nb_log_pmf_unchecked(x, n, p)
    }
}

pub fn pmf(x: u64, n: f64, p: f64, pi: f64) -> Result<f64> {
    log_pmf(x, n, p, pi).map(f64::exp)
}

/// Point forecast `n (1 - p) / p`; `zero_inflated` additionally scales by `1 - pi`.
pub fn mean(params: &ZinbParams, zero_inflated: bool) -> Array3<f64> {
    if zero_inflated {
        Zip::from(&params.n)
            .and(&params.p)
            .and(&params.pi)
            .map_collect(|&n, &p, &pi| n * (1.0 - p) / p * (1.0 - pi))
    } else {
        Zip::from(&params.n).and(&params.p).map_collect(|&n, &p| n * (1.0 - p) / p)
    }
}

/// Draw from the mixture: excess zero with probability `pi`, else NB as a
/// Poisson with Gamma(n, (1 - p) / p) rate.
pub fn sample<R: Rng + ?Sized>(rng: &mut R, n: f64, p: f64, pi: f64) -> Result<u64> {
    check_domain(n, p, pi)?;
    if rng.random::<f64>() < pi {
        return Ok(0);
    }
    let rate = Gamma::new(n, (1.0 - p) / p)
        .map_err(|e| Error::InvalidInput(e.to_string()))?
        .sample(rng);
    if rate <= 0.0 {
        return Ok(0);
    }
    let k: f64 = Poisson::new(rate)
        .map_err(|e| Error::InvalidInput(e.to_string()))?
        .sample(rng);
    Ok(k as u64)
}

/// Negative log-likelihood of a whole tensor, summed.
pub fn nll(x: &Array3<f64>, params: &ZinbParams) -> Result<f64> {
    if x.dim() != params.dim() {
        return Err(Error::shape("zinb_nll", format!("counts {:?} vs params {:?}", x.dim(), params.dim())));
    }
    let mut total = 0.0;
    for (((&x, &n), &p), &pi) in x.iter().zip(&params.n).zip(&params.p).zip(&params.pi) {
        total -= log_pmf_unchecked(x, n, p, pi);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Per-entry log-likelihood and its partials with respect to (n, p, pi).
fn log_lik_and_grad(x: f64, n: f64, p: f64, pi: f64) -> (f64, f64, f64, f64) {
    if x == 0.0 {
        let ln_p = p.ln();
        let q = (n * ln_p).exp();
        let d = pi + (1.0 - pi) * q;
        let ll = if d > f64::MIN_POSITIVE { d.ln() } else { log_pmf_unchecked(0.0, n, p, pi) };
        let dn = (1.0 - pi) * q * ln_p / d;
        let dp = (1.0 - pi) * q * n / p / d;
        let dpi = (1.0 - q) / d;
        (ll, dn, dp, dpi)
    } else {
        let ll = log_pmf_unchecked(x, n, p, pi);
        let dn = digamma(x + n) - digamma(n) + p.ln();
        let dp = n / p - x / (1.0 - p);
        let dpi = -1.0 / (1.0 - pi);
        (ll, dn, dp, dpi)
    }
}

/// Differentiable negative log-likelihood of counts `x` under matrices of
/// parameters of the same shape. Values are clamped into the domain before
/// evaluation; callers are expected to clamp upstream so gradients match.
pub fn nll_op(g: &mut Graph, n: Var, p: Var, pi: Var, x: &Mat, reduction: Reduction) -> Result<Var> {
    for (name, v) in [("n", n), ("p", p), ("pi", pi)] {
        if g.shape(v) != x.dim() {
            return Err(Error::shape(
                "zinb_nll",
                format!("{name} {:?} vs counts {:?}", g.shape(v), x.dim()),
            ));
        }
    }
    if x.iter().any(|&c| !(c >= 0.0 && c.fract() == 0.0)) {
        return Err(Error::InvalidInput("counts must be non-negative integers".into()));
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / x.len().max(1) as f64,
    };
    let dim = x.dim();
    let (vx, vn, vp, vpi) = (
        x.as_standard_layout(),
        g.value(n).as_standard_layout(),
        g.value(p).as_standard_layout(),
        g.value(pi).as_standard_layout(),
    );
    let mut total = 0.0;
    let mut gn = Mat::zeros(dim);
    let mut gp = Mat::zeros(dim);
    let mut gpi = Mat::zeros(dim);
    let slices = [&vx, &vn, &vp, &vpi].map(|m| m.as_slice().expect("standard layout"));
    let outs = (gn.as_slice_mut().unwrap(), gp.as_slice_mut().unwrap(), gpi.as_slice_mut().unwrap());
    let entries = slices[0].iter().zip(slices[1]).zip(slices[2]).zip(slices[3]);
    let grads = outs.0.iter_mut().zip(outs.1.iter_mut()).zip(outs.2.iter_mut());
    for ((((&xc, &nn), &pp), &qq), ((on, op), opi)) in entries.zip(grads) {
        let (ll, dn, dp, dpi) = log_lik_and_grad(xc, nn.max(N_MIN), pp.clamp(P_MIN, P_MAX), qq.clamp(0.0, PI_MAX));
        total -= ll;
        *on = -dn * scale;
        *op = -dp * scale;
        *opi = -dpi * scale;
    }
    let value = Mat::from_elem((1, 1), total * scale);
    Ok(g.custom(
        &[n, p, pi],
        value,
        Box::new(move |_, _, gout| {
            let s = gout[[0, 0]];
            vec![&gn * s, &gp * s, &gpi * s]
        }),
    ))
}
