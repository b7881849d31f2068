use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelInput, OdCed};
use crate::data::{coarsen_tensor, Assignment, OdTensor, PoiMatrix};
use crate::diff::{Mat, NamedTensor, ParamStore};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "odced-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: model config header, the coarsening it was trained with,
/// free-form numeric metadata and every parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub assignment: Vec<usize>,
    pub poi_super: NamedTensor,
    pub meta: BTreeMap<String, f64>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let c: Self = serde_json::from_reader(r).map_err(|e| Error::Serde(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                c.format, c.version
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.to_writer(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(f))
    }
}

/// A model together with the coarsening and super-cell POI it was trained on.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub model: OdCed,
    pub assignment: Assignment,
    pub poi_s: Mat,
    mask: Mat,
}

impl Forecaster {
    pub fn new(model: OdCed, assignment: Assignment, poi_s: Mat) -> Result<Self> {
        let cfg = model.config();
        if assignment.n_cells() != cfg.n_cells || assignment.n_super() != cfg.n_super {
            return Err(Error::shape(
                "forecaster",
                format!(
                    "assignment {}->{} vs model {}->{}",
                    assignment.n_cells(),
                    assignment.n_super(),
                    cfg.n_cells,
                    cfg.n_super
                ),
            ));
        }
        if poi_s.dim() != (cfg.n_super, cfg.poi_dim) {
            return Err(Error::shape(
                "forecaster",
                format!("super-cell POI {:?} vs {:?}", poi_s.dim(), (cfg.n_super, cfg.poi_dim)),
            ));
        }
        let mask = assignment.matrix();
        Ok(Self {
            model,
            assignment,
            poi_s,
            mask,
        })
    }

    /// Uses the cell-level POI matrix, aggregated to super-cells.
    pub fn with_cell_poi(model: OdCed, assignment: Assignment, poi: &PoiMatrix) -> Result<Self> {
        let poi_s = poi.aggregate(&assignment)?.data().clone();
        Self::new(model, assignment, poi_s)
    }

    pub fn mask(&self) -> &Mat {
        &self.mask
    }

    pub fn input<'a>(&'a self, x_s: ArrayView3<'a, f64>) -> ModelInput<'a> {
        ModelInput {
            x_s,
            poi_s: &self.poi_s,
            mask: &self.mask,
        }
    }

    /// Forecast from a fine history of exactly K slots.
    pub fn predict_fine(&self, history: &OdTensor) -> Result<Array3<f64>> {
        let cfg = self.model.config();
        if history.n_cells() != cfg.n_cells || history.n_slots() != cfg.k {
            return Err(Error::shape(
                "predict",
                format!(
                    "history {}x{}x{}, model expects {}x{}x{}",
                    history.n_cells(),
                    history.n_cells(),
                    history.n_slots(),
                    cfg.n_cells,
                    cfg.n_cells,
                    cfg.k
                ),
            ));
        }
        let x_s = coarsen_tensor(history, &self.assignment)?;
        self.model.predict(&self.input(x_s.data().view()))
    }

    pub fn to_checkpoint(&self, meta: BTreeMap<String, f64>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.model.config().clone(),
            assignment: self.assignment.labels().to_vec(),
            poi_super: NamedTensor {
                name: "poi_super".into(),
                shape: vec![self.poi_s.nrows(), self.poi_s.ncols()],
                values: self.poi_s.iter().copied().collect(),
            },
            meta,
            tensors: self.model.params().to_tensors(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let store = ParamStore::from_tensors(&c.tensors)?;
        let model = OdCed::from_store(c.model.clone(), &store)?;
        let assignment = Assignment::from_labels(c.assignment.clone(), c.model.n_super)?;
        let poi = ParamStore::from_tensors(std::slice::from_ref(&c.poi_super))?;
        Self::new(model, assignment, poi.values()[0].clone())
    }
}
