use serde::{Deserialize, Serialize};

use super::{Graph, Mat, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Serialised form of one tensor: row-major values plus shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered set of named trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Put every parameter on `g` as a gradient-receiving leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.values.iter().map(|v| g.param(v.clone())).collect()
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| NamedTensor {
                name: name.clone(),
                shape: vec![v.nrows(), v.ncols()],
                values: v.iter().copied().collect(),
            })
            .collect()
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let mut store = Self::new();
        for t in tensors {
            let &[r, c] = t.shape.as_slice() else {
                return Err(Error::Serde(format!("tensor {} has shape {:?}, expected 2-d", t.name, t.shape)));
            };
            let m = Mat::from_shape_vec((r, c), t.values.clone())
                .map_err(|e| Error::Serde(format!("tensor {}: {e}", t.name)))?;
            if store.find(&t.name).is_some() {
                return Err(Error::Serde(format!("duplicate tensor {}", t.name)));
            }
            store.add(t.name.clone(), m);
        }
        Ok(store)
    }

    /// Overwrite values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, v) in self.names.iter().zip(self.values.iter_mut()) {
            let id = other
                .find(name)
                .ok_or_else(|| Error::Serde(format!("checkpoint is missing tensor {name}")))?;
            let src = other.get(id);
            if src.dim() != v.dim() {
                return Err(Error::shape(
                    "load_params",
                    format!("{name}: checkpoint {:?} vs model {:?}", src.dim(), v.dim()),
                ));
            }
            v.assign(src);
        }
        Ok(())
    }
}
