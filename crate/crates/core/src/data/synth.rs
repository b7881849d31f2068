//! Synthetic city generator with planted communities.
//!
//! Each community has one high-volume center cell. Members exchange most of
//! their trips with their own center, centers exchange trips with each other,
//! and everything else is a thin background. Means follow a sinusoidal daily
//! profile per origin community, modulated by a persistent log-AR(1) regime
//! factor, and counts are drawn from a zero-inflated negative binomial.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Assignment, CellGrid, OdTensor, PoiMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CountModel {
    /// Zero-inflated negative binomial, the family the forecaster assumes.
    #[default]
    Zinb,
    /// Plain Poisson with the same mean profile (misspecified for the model).
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cells: usize,
    pub n_communities: usize,
    pub days: usize,
    pub slots_per_day: usize,
    pub radius_km: f64,
    /// Excess-zero probability.
    pub zero_inflation: f64,
    /// NB shape; smaller is more over-dispersed.
    pub dispersion: f64,
    pub center_center_rate: f64,
    pub center_member_rate: f64,
    pub member_member_rate: f64,
    pub background_rate: f64,
    /// Relative amplitude of the daily sinusoid, in [0, 1].
    pub daily_amplitude: f64,
    /// Hour-to-hour autocorrelation of the log regime factor.
    pub regime_persistence: f64,
    /// Stationary standard deviation of the log regime factor (0 disables it).
    pub regime_sd: f64,
    pub poi_categories: usize,
    pub count_model: CountModel,
    pub lon0: f64,
    pub lat0: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cells: 100,
            n_communities: 10,
            days: 60,
            slots_per_day: 24,
            radius_km: 0.6,
            zero_inflation: 0.3,
            dispersion: 5.0,
            center_center_rate: 8.0,
            center_member_rate: 2.0,
            member_member_rate: 0.3,
            background_rate: 0.03,
            daily_amplitude: 0.8,
            regime_persistence: 0.9,
            regime_sd: 0.8,
            poi_categories: 8,
            count_model: CountModel::Zinb,
            lon0: 104.0,
            lat0: 30.0,
        }
    }
}

impl SynthConfig {
    pub fn n_slots(&self) -> usize {
        self.days * self.slots_per_day
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_cells == 0 || self.n_communities == 0 {
            return bad("synthetic data needs at least one cell and one community".into());
        }
        if self.n_communities > self.n_cells {
            return bad(format!(
                "{} planted communities exceed {} cells",
                self.n_communities, self.n_cells
            ));
        }
        if self.slots_per_day == 0 {
            return bad("slots_per_day must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.zero_inflation) {
            return bad(format!("zero_inflation must lie in [0, 1], got {}", self.zero_inflation));
        }
        if !(self.dispersion > 0.0) {
            return bad("dispersion must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.daily_amplitude) {
            return bad("daily_amplitude must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.regime_persistence) || self.regime_sd < 0.0 {
            return bad("regime_persistence must lie in [0, 1) and regime_sd be non-negative".into());
        }
        let rates = [
            self.center_center_rate,
            self.center_member_rate,
            self.member_member_rate,
            self.background_rate,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("flow rates must be finite and non-negative".into());
        }
        if !(self.radius_km > 0.0) {
            return bad("radius_km must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub grid: CellGrid,
    pub od: OdTensor,
    /// Cell-level POI flags (N x p).
    pub poi: PoiMatrix,
    /// Planted partition, community k centered on `centers[k]`.
    pub truth: Assignment,
    pub centers: Vec<usize>,
    /// Base pair rates (N x N); the NB mean of `od[i, j, t]` is
    /// `base[i, j] * scale[community(i), t]`.
    pub base: Array2<f64>,
    /// Daily profile times regime factor per community and slot (M* x T).
    pub scale: Array2<f64>,
}

impl SyntheticData {
    /// Mean of the count distribution before zero inflation.
    pub fn intensity(&self, i: usize, j: usize, t: usize) -> f64 {
        self.base[[i, j]] * self.scale[[self.truth.labels()[i], t]]
    }
}

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_cells;
    let m = cfg.n_communities;
    let grid = CellGrid::hex_lattice(n, cfg.radius_km, cfg.lon0, cfg.lat0)?;
    let xy = grid.local_xy();

    let centers = pick_centers(&xy, m, &mut rng);
    let labels: Vec<usize> = xy
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, &c) in centers.iter().enumerate() {
                let d = dist2(*p, xy[c]);
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            best
        })
        .collect();
    let truth = Assignment::from_labels(labels.clone(), m)?;
    let mut is_center = vec![false; n];
    for &c in &centers {
        is_center[c] = true;
    }

    let weight: Vec<f64> = (0..n)
        .map(|i| if is_center[i] { rng.random_range(0.7..1.3) } else { rng.random_range(0.5..1.5) })
        .collect();
    let mut base = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let same = labels[i] == labels[j];
            let rate = match (is_center[i], is_center[j]) {
                (true, true) => cfg.center_center_rate,
                (true, false) | (false, true) if same => cfg.center_member_rate,
                (false, false) if same => cfg.member_member_rate,
                _ => cfg.background_rate,
            };
            base[[i, j]] = rate * weight[i] * weight[j];
        }
    }

    let period = cfg.slots_per_day;
    let phase: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let t_total = cfg.n_slots();
    let regime = regime_paths(cfg, m, t_total, &mut rng);

    let mut data = Array3::<f64>::zeros((n, n, t_total));
    let mut scale_all = Array2::<f64>::zeros((m, t_total));
    let pi = cfg.zero_inflation;
    let r = cfg.dispersion;
    for t in 0..t_total {
        let hour = (t % period) as f64 / period as f64;
        let scale: Vec<f64> = (0..m)
            .map(|c| (1.0 + cfg.daily_amplitude * (std::f64::consts::TAU * hour + phase[c]).sin()) * regime[[c, t]])
            .collect();
        for (c, &v) in scale.iter().enumerate() {
            scale_all[[c, t]] = v;
        }
        for i in 0..n {
            let s = scale[labels[i]];
            for j in 0..n {
                let mu = base[[i, j]] * s;
                if mu <= 0.0 {
                    continue;
                }
                data[[i, j, t]] = match cfg.count_model {
                    CountModel::Zinb => {
                        if rng.random::<f64>() < pi {
                            0.0
                        } else {
                            let lambda = Gamma::new(r, mu / r).expect("positive shape and scale").sample(&mut rng);
                            poisson(lambda, &mut rng)
                        }
                    }
                    CountModel::Poisson => poisson(mu, &mut rng),
                };
            }
        }
    }

    let poi = synth_poi(cfg, &labels, &is_center, &mut rng);
    Ok(SyntheticData {
        grid,
        od: OdTensor::new(data)?.with_timing(0, 24.0 / period as f64),
        poi,
        truth,
        centers,
        base,
        scale: scale_all,
    })
}

fn poisson(lambda: f64, rng: &mut ChaCha8Rng) -> f64 {
    if lambda > 0.0 {
        Poisson::new(lambda).expect("finite positive rate").sample(rng)
    } else {
        0.0
    }
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// k-means++ seeding plus a few Lloyd rounds on cell positions; each
/// centroid is then snapped to its nearest unused cell. Returned sorted.
fn pick_centers(xy: &[(f64, f64)], m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = xy.len();
    let mut cent: Vec<(f64, f64)> = vec![xy[rng.random_range(0..n)]];
    while cent.len() < m {
        let d: Vec<f64> = xy
            .iter()
            .map(|&p| cent.iter().map(|&c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            d.iter()
                .position(|&w| {
                    u -= w;
                    u <= 0.0
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        cent.push(xy[pick]);
    }
    for _ in 0..25 {
        let mut acc = vec![(0.0, 0.0, 0usize); m];
        for &p in xy {
            let k = (0..m)
                .min_by(|&a, &b| dist2(p, cent[a]).total_cmp(&dist2(p, cent[b])))
                .expect("m >= 1");
            acc[k].0 += p.0;
            acc[k].1 += p.1;
            acc[k].2 += 1;
        }
        for (c, a) in cent.iter_mut().zip(&acc) {
            if a.2 > 0 {
                *c = (a.0 / a.2 as f64, a.1 / a.2 as f64);
            }
        }
    }
    let mut used = vec![false; n];
    let mut centers = Vec::with_capacity(m);
    for c in &cent {
        let best = (0..n)
            .filter(|&i| !used[i])
            .min_by(|&a, &b| dist2(xy[a], *c).total_cmp(&dist2(xy[b], *c)))
            .expect("m <= n");
        used[best] = true;
        centers.push(best);
    }
    centers.sort_unstable();
    centers
}

/// Mean-one multiplicative regime factor per community and slot.
fn regime_paths(cfg: &SynthConfig, m: usize, t_total: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let sd = cfg.regime_sd;
    let rho = cfg.regime_persistence;
    let mut out = Array2::from_elem((m, t_total), 1.0);
    if sd == 0.0 {
        return out;
    }
    let innov = Normal::new(0.0, sd * (1.0 - rho * rho).sqrt()).expect("finite sd");
    let start = Normal::new(0.0, sd).expect("finite sd");
    for c in 0..m {
        let mut z: f64 = start.sample(rng);
        for t in 0..t_total {
            if t > 0 {
                z = rho * z + innov.sample(rng);
            }
            out[[c, t]] = (z - 0.5 * sd * sd).exp();
        }
    }
    out
}

fn synth_poi(cfg: &SynthConfig, labels: &[usize], is_center: &[bool], rng: &mut ChaCha8Rng) -> PoiMatrix {
    let p = cfg.poi_categories;
    let m = cfg.n_communities;
    let preferred: Vec<Vec<bool>> = (0..m).map(|_| (0..p).map(|_| rng.random::<f64>() < 0.3).collect()).collect();
    let mut data = Array2::zeros((labels.len(), p));
    for (i, &c) in labels.iter().enumerate() {
        for k in 0..p {
            let prob = match (preferred[c][k], is_center[i]) {
                (true, true) => 1.0,
                (true, false) => 0.5,
                (false, _) => 0.05,
            };
            if rng.random::<f64>() < prob {
                data[[i, k]] = 1.0;
            }
        }
    }
    PoiMatrix::new(data).expect("binary by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sparsity_rate;

    fn small(pi: f64) -> SynthConfig {
        SynthConfig {
            n_cells: 30,
            n_communities: 3,
            days: 3,
            zero_inflation: pi,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn full_zero_inflation_gives_all_zeros() {
        let d = generate_synthetic(&small(1.0), 1).unwrap();
        assert_eq!(d.od.total(), 0.0);
    }

    #[test]
    fn too_many_communities_is_error() {
        let cfg = SynthConfig {
            n_cells: 4,
            n_communities: 5,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }

    #[test]
    fn sparsity_grows_with_zero_inflation() {
        // averaged over a few seeds so the ordering is not a sampling accident
        let mean_rate = |pi: f64| -> f64 {
            (0..4)
                .map(|s| sparsity_rate(&generate_synthetic(&small(pi), s).unwrap().od).unwrap())
                .sum::<f64>()
                / 4.0
        };
        let rates: Vec<f64> = [0.1, 0.4, 0.7].iter().map(|&p| mean_rate(p)).collect();
        assert!(rates[0] < rates[1] && rates[1] < rates[2], "{rates:?}");
    }

    #[test]
    fn default_sparsity_in_city_regime() {
        let d = generate_synthetic(&SynthConfig::default(), 7).unwrap();
        let s = sparsity_rate(&d.od).unwrap();
        assert!((0.95..=0.995).contains(&s), "sparsity {s}");
    }

    #[test]
    fn centers_carry_the_largest_flows() {
        let cfg = SynthConfig {
            n_cells: 60,
            n_communities: 6,
            ..SynthConfig::default()
        };
        let d = generate_synthetic(&cfg, 2).unwrap();
        let x = d.od.data();
        let t = x.dim().2 as f64;
        let f: Vec<f64> = (0..60)
            .map(|i| (x.index_axis(ndarray::Axis(0), i).sum() + x.index_axis(ndarray::Axis(1), i).sum()) / t)
            .collect();
        let min_center = d.centers.iter().map(|&c| f[c]).fold(f64::INFINITY, f64::min);
        let max_member = (0..60)
            .filter(|i| !d.centers.contains(i))
            .map(|i| f[i])
            .fold(0.0, f64::max);
        assert!(min_center > max_member, "{min_center} vs {max_member}");
        for (k, &c) in d.centers.iter().enumerate() {
            assert_eq!(d.truth.labels()[c], k);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic(&small(0.3), 9).unwrap();
        let b = generate_synthetic(&small(0.3), 9).unwrap();
        assert_eq!(a.od, b.od);
        assert_eq!(a.poi, b.poi);
    }
}
