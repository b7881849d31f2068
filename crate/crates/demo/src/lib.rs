//! WebAssembly bindings for the static page in `www/`.
//!
//! Each exported function takes plain numbers and returns JSON, so the page
//! needs no bundler. The same functions are ordinary Rust on native targets.

use odced::coarsening::{adjusted_rand_index, coarsen, CoarsenParams};
use odced::data::{generate_synthetic, sparsity_rate, SynthConfig, SyntheticData};
use odced::zinb;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Days simulated for the demo city; a week keeps generation interactive.
const DEMO_DAYS: usize = 7;
const MAX_CELLS: usize = 200;
const MAX_PMF_SUPPORT: usize = 500;

#[derive(Debug, Serialize)]
pub struct CityView {
    pub xy: Vec<(f64, f64)>,
    pub truth: Vec<usize>,
    pub labels: Vec<usize>,
    pub dense: Vec<usize>,
    pub centers: Vec<usize>,
    pub ari: f64,
    pub sparsity_fine: f64,
    pub sparsity_coarse: f64,
    pub iterations: usize,
}

#[derive(Debug, Serialize)]
pub struct PmfView {
    pub pmf: Vec<f64>,
    pub mean: f64,
    pub zero_inflated_mean: f64,
    pub mass: f64,
}

#[derive(Debug, Serialize)]
pub struct SeriesView {
    pub counts: Vec<f64>,
    pub intensity: Vec<f64>,
    pub slots_per_day: usize,
}

fn city(seed: u64, n_cells: usize, n_communities: usize) -> odced::Result<SyntheticData> {
    if n_cells > MAX_CELLS {
        return Err(odced::Error::Config(format!("demo is limited to {MAX_CELLS} cells")));
    }
    let cfg = SynthConfig {
        n_cells,
        n_communities,
        days: DEMO_DAYS,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    generate_synthetic(&cfg, seed)
}

/// Generates a city and coarsens it into as many super-cells as planted communities.
pub fn city_view(seed: u64, n_cells: usize, n_communities: usize) -> odced::Result<CityView> {
    let s = city(seed, n_cells, n_communities)?;
    let params = CoarsenParams {
        m: n_communities,
        ..CoarsenParams::default()
    };
    let c = coarsen(&s.od, &s.grid, &params)?;
    Ok(CityView {
        xy: s.grid.local_xy(),
        truth: s.truth.labels().to_vec(),
        labels: c.assignment.labels().to_vec(),
        ari: adjusted_rand_index(c.assignment.labels(), s.truth.labels())?,
        sparsity_fine: sparsity_rate(&s.od)?,
        sparsity_coarse: sparsity_rate(&c.x_s)?,
        dense: c.dense,
        centers: s.centers,
        iterations: c.iterations,
    })
}

/// Pmf on 0..=max_x together with both mean forms.
pub fn pmf_view(n: f64, p: f64, pi: f64, max_x: usize) -> odced::Result<PmfView> {
    let max_x = max_x.min(MAX_PMF_SUPPORT);
    let pmf = (0..=max_x as u64)
        .map(|x| zinb::pmf(x, n, p, pi))
        .collect::<odced::Result<Vec<_>>>()?;
    let mean = n * (1.0 - p) / p;
    Ok(PmfView {
        mass: pmf.iter().sum(),
        pmf,
        mean,
        zero_inflated_mean: (1.0 - pi) * mean,
    })
}

/// Sampled counts and the planted mean of one flow over the demo week.
pub fn series_view(seed: u64, n_cells: usize, n_communities: usize, origin: usize, destination: usize) -> odced::Result<SeriesView> {
    let s = city(seed, n_cells, n_communities)?;
    if origin >= n_cells || destination >= n_cells {
        return Err(odced::Error::Config(format!("cells are numbered 0..{n_cells}")));
    }
    let slots = s.od.n_slots();
    Ok(SeriesView {
        counts: (0..slots).map(|t| s.od.get(origin, destination, t)).collect(),
        intensity: (0..slots).map(|t| s.intensity(origin, destination, t)).collect(),
        slots_per_day: slots / DEMO_DAYS,
    })
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("views are plain data")
}

#[wasm_bindgen(js_name = coarsenCity)]
pub fn coarsen_city(seed: u32, n_cells: u32, n_communities: u32) -> Result<String, JsError> {
    Ok(json(&city_view(seed.into(), n_cells as usize, n_communities as usize)?))
}

#[wasm_bindgen(js_name = zinbPmf)]
pub fn zinb_pmf(n: f64, p: f64, pi: f64, max_x: u32) -> Result<String, JsError> {
    Ok(json(&pmf_view(n, p, pi, max_x as usize)?))
}

#[wasm_bindgen(js_name = flowSeries)]
pub fn flow_series(seed: u32, n_cells: u32, n_communities: u32, origin: u32, destination: u32) -> Result<String, JsError> {
    let v = series_view(
        seed.into(),
        n_cells as usize,
        n_communities as usize,
        origin as usize,
        destination as usize,
    )?;
    Ok(json(&v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn city_view_recovers_planted_communities() {
        let v = city_view(1, 60, 6).unwrap();
        assert_eq!(v.xy.len(), 60);
        assert_eq!(v.dense.len(), 6);
        assert!(v.ari >= 0.9, "ari {}", v.ari);
        assert!(v.sparsity_coarse < v.sparsity_fine);
    }

    #[test]
    fn pmf_view_mass_and_means() {
        let v = pmf_view(3.0, 0.4, 0.25, 200).unwrap();
        assert!((v.mass - 1.0).abs() < 1e-9);
        assert!((v.mean - 4.5).abs() < 1e-12);
        assert!((v.zero_inflated_mean - 3.375).abs() < 1e-12);
        assert!(pmf_view(3.0, 1.5, 0.0, 10).is_err());
    }

    #[test]
    fn series_view_covers_the_week() {
        let v = series_view(2, 40, 4, 0, 1).unwrap();
        assert_eq!(v.counts.len(), DEMO_DAYS * v.slots_per_day);
        assert_eq!(v.intensity.len(), v.counts.len());
        assert!(v.intensity.iter().all(|&m| m >= 0.0));
        assert!(series_view(2, 40, 4, 40, 0).is_err());
        assert!(city_view(0, MAX_CELLS + 1, 4).is_err());
    }
}
