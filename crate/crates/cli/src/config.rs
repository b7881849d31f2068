//! One TOML file drives every command; `--set section.key=value` overrides
//! single entries before validation.

use std::path::Path;

use odced::coarsening::CoarsenParams;
use odced::data::SynthConfig;
use odced::model::ModelConfig;
use odced::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Seed of the synthetic generator.
    pub seed: u64,
    pub synth: SynthConfig,
}

/// Which entries the metrics are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Entries whose ground truth is non-zero.
    #[default]
    NonzeroTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mask: MaskPolicy,
    /// Days averaged by the historical-average baseline; all whole days when absent.
    pub ha_days: Option<usize>,
    /// Lags of the per-flow regressions; the model's K when absent.
    pub regression_lags: Option<usize>,
    pub lasso_lambda: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mask: MaskPolicy::NonzeroTruth,
            ha_days: None,
            regression_lags: None,
            lasso_lambda: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub coarsening: CoarsenParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            coarsening: CoarsenParams {
                m: synth.n_communities,
                ..CoarsenParams::default()
            },
            model: ModelConfig {
                n_cells: synth.n_cells,
                n_super: synth.n_communities,
                poi_dim: synth.poi_categories,
                ..ModelConfig::default()
            },
            data: DataConfig { seed: 0, synth },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), applies `key=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| odced::Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| odced::Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        // partial sections fall back to the run defaults, not each section's own
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("config is plain data");
        merge(&mut merged, table);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| odced::Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is plain data")
    }

    /// Per-section checks plus the shapes the sections must agree on.
    pub fn validate(&self) -> odced::Result<()> {
        let bad = |m: String| Err(odced::Error::Config(m));
        self.data.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let (synth, model) = (&self.data.synth, &self.model);
        if model.n_cells != synth.n_cells {
            return bad(format!("model.n_cells = {} but data.synth.n_cells = {}", model.n_cells, synth.n_cells));
        }
        if model.n_super != self.coarsening.m {
            return bad(format!("model.n_super = {} but coarsening.m = {}", model.n_super, self.coarsening.m));
        }
        if model.poi_dim != synth.poi_categories {
            return bad(format!(
                "model.poi_dim = {} but data.synth.poi_categories = {}",
                model.poi_dim, synth.poi_categories
            ));
        }
        if synth.n_slots() < model.k + model.tau {
            return bad(format!(
                "{} slots cannot hold a window of k + tau = {}",
                synth.n_slots(),
                model.k + model.tau
            ));
        }
        let c = &self.coarsening;
        if !(0.0..=1.0).contains(&c.alpha) || !(0.0..=1.0).contains(&c.beta) || !(c.tol > 0.0) || c.max_iter == 0 {
            return bad("coarsening needs alpha, beta in [0, 1], tol > 0 and max_iter >= 1".into());
        }
        if !(self.eval.lasso_lambda >= 0.0) || self.eval.regression_lags == Some(0) || self.eval.ha_days == Some(0) {
            return bad("eval needs lasso_lambda >= 0 and positive lags and days".into());
        }
        Ok(())
    }

    /// Checks a loaded dataset against the model section.
    pub fn check_data(&self, n_cells: usize, poi_categories: usize) -> odced::Result<()> {
        if n_cells != self.model.n_cells || poi_categories != self.model.poi_dim {
            return Err(odced::Error::Config(format!(
                "dataset has {n_cells} cells and {poi_categories} POI categories, config expects {} and {}",
                self.model.n_cells, self.model.poi_dim
            )));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, entry: &str) -> CliResult<()> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{entry}` is not key=value")))?;
    // values that are not valid TOML are taken as strings
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in path {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("`{p}` in `{key}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_sections() {
        let sets = ["train.max_epochs=3", "data.synth.days=4", "model.embed_softmax=rows"].map(String::from);
        let cfg = RunConfig::load(None, &sets).unwrap();
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.data.synth.days, 4);
        assert_eq!(cfg.model.embed_softmax, odced::model::EmbedSoftmax::Rows);
    }

    #[test]
    fn inconsistent_sections_rejected() {
        for set in ["coarsening.m=7", "model.n_cells=50", "model.poi_dim=3", "data.synth.days=0"] {
            assert!(RunConfig::load(None, &[set.to_string()]).is_err(), "{set}");
        }
        assert!(RunConfig::load(None, &["no_equals".to_string()]).is_err());
        assert!(RunConfig::load(None, &["train.unknown=1".to_string()]).is_err());
    }
}
