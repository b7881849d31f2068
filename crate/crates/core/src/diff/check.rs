use super::{Graph, Mat, Var};
use crate::error::{Error, Result};

/// Denominator floor in the relative error, so entries where both gradients
/// are (numerically) zero compare by absolute difference.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
    pub max_rel_error: f64,
    /// Input index and element position of the worst entry.
    pub worst: Option<(usize, (usize, usize))>,
    pub per_input: Vec<f64>,
    pub checked: usize,
    /// Entries judged against a one-sided difference because a kink lies inside the step.
    pub kinks: usize,
    pub tol: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, point: &[Mat]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|m| g.param(m.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.dim() != (1, 1) {
        return Err(Error::shape("grad_check", format!("function must return 1x1, got {:?}", v.dim())));
    }
    Ok(v[[0, 0]])
}

/// Compares reverse-mode gradients of the scalar function `f` at `point`
/// against central differences with step `eps`.
///
/// When the central difference disagrees and the two one-sided slopes also
/// disagree with each other, a ReLU-type kink lies within the step and the
/// central difference is no oracle there. Such entries are compared against
/// the closer one-sided slope instead and counted in `kinks`; on smooth
/// stretches the one-sided slopes agree, so a wrong gradient is still caught.
pub fn grad_check<F>(f: F, point: &[Mat], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|m| g.param(m.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Mat> = vars
        .iter()
        .zip(point)
        .map(|(&v, m)| g.grad(v).cloned().unwrap_or_else(|| Mat::zeros(m.dim())))
        .collect();
    drop(g);

    let base = eval(&f, point)?;
    let mut work: Vec<Mat> = point.to_vec();
    let mut kinks = 0;
    let mut per_input = vec![0.0f64; point.len()];
    let mut worst = None;
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for k in 0..point.len() {
        let (rows, cols) = point[k].dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = work[k][[r, c]];
                work[k][[r, c]] = orig + eps;
                let up = eval(&f, &work)?;
                work[k][[r, c]] = orig - eps;
                let down = eval(&f, &work)?;
                work[k][[r, c]] = orig;
                let a = analytic[k][[r, c]];
                let rel_to = |numeric: f64| (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
                let mut rel = rel_to((up - down) / (2.0 * eps));
                if rel >= tol {
                    let (right, left) = ((up - base) / eps, (base - down) / eps);
                    let spread = (right - left).abs() / right.abs().max(left.abs()).max(GRAD_CHECK_FLOOR);
                    if spread >= tol {
                        kinks += 1;
                        rel = rel.min(rel_to(right)).min(rel_to(left));
                    }
                }
                let rel = if rel.is_nan() { f64::INFINITY } else { rel };
                checked += 1;
                per_input[k] = per_input[k].max(rel);
                if rel > max_rel || worst.is_none() {
                    max_rel = rel;
                    worst = Some((k, (r, c)));
                }
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        per_input,
        checked,
        kinks,
        tol,
        passed: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn quadratic_form() {
        // x^T A x with a 3x3 A
        let a = arr2(&[[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 3.0]]);
        let report = grad_check(
            |g, v| {
                let a = g.constant(a.clone());
                let ax = g.matmul(a, v[0])?;
                let xt = g.transpose(v[0]);
                g.matmul(xt, ax)
            },
            &[arr2(&[[0.3], [-1.2], [0.7]])],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn every_op_against_finite_differences() {
        let report = grad_check(
            |g, v| {
                let (x, w, b, u) = (v[0], v[1], v[2], v[3]);
                let h = g.matmul(x, w)?;
                let h = g.add_broadcast(h, b)?;
                let n = g.layer_norm(h);
                let s = g.softmax_rows(n);
                let t = g.matmul_t(s, u)?;
                let r = g.relu(t);
                let sp = g.softplus(t);
                let sg = g.sigmoid(t);
                let e = g.exp(sg);
                let lg = g.log(e);
                let lgs = g.sum_cols(lg);
                let lg = g.div_broadcast(lg, lgs)?;
                let c = g.concat_cols(&[r, sp, lg])?;
                let sl = g.slice_cols(c, 1, 5)?;
                let p = g.pair_sum(sl, sl)?;
                let gs = g.group_softmax_cols(p, 4)?;
                let gr = g.group_sum_rows(gs, 4)?;
                let prod = g.mul(gr, sl)?;
                let cl = g.clamp(prod, -0.9, 0.9);
                let col = g.sum_cols(cl);
                let row = g.sum_rows(cl);
                let bc = g.broadcast(col, (4, 4))?;
                let mb = g.mul_broadcast(bc, row)?;
                let d = g.sub(mb, cl)?;
                let sc = g.scale(d, 0.3);
                let m = g.mean(sc);
                let s2 = g.sum(sc);
                g.add(m, s2)
            },
            &[random(4, 3, 1), random(3, 5, 2), random(1, 5, 3), random(2, 5, 4)],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn pair_relu_matmul_gradients() {
        let report = grad_check(
            |g, v| {
                let o = g.pair_relu_matmul(v[0], v[1], v[2])?;
                let s = g.sigmoid(o);
                Ok(g.sum(s))
            },
            &[random(3, 4, 11), random(5, 4, 12), random(4, 2, 13)],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let report = grad_check(
            |g, v| {
                let y = g.value(v[0]).mapv(|a| a * a);
                let sq = g.custom(&[v[0]], y, Box::new(|p, _, gout| vec![gout * p[0] * 2.0 * 1.01]));
                Ok(g.sum(sq))
            },
            &[random(3, 3, 7)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 5e-3, "{report:?}");
    }

    #[test]
    fn kink_inside_the_step_uses_one_sided_slope() {
        // relu(x) at x = 3e-6 with eps = 1e-5: the central difference is 0.65
        let report = grad_check(
            |g, v| {
                let r = g.relu(v[0]);
                Ok(g.sum(r))
            },
            &[arr2(&[[3e-6, 0.5]])],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.kinks, 1);
    }

    #[test]
    fn wrong_slope_at_a_kink_is_caught() {
        // the true gradient at 3e-6 is 1; claiming 0.6 matches neither side
        let report = grad_check(
            |g, v| {
                let y = g.value(v[0]).mapv(|a| a.max(0.0));
                let r = g.custom(&[v[0]], y, Box::new(|_, _, gout| vec![gout * 0.6]));
                Ok(g.sum(r))
            },
            &[arr2(&[[3e-6]])],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed, "{report:?}");
    }
}
