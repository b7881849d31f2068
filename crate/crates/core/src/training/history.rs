use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean NLL over the epoch's mini-batches (full pass for epoch 0).
    pub train_nll: f64,
    pub val_nll: f64,
    pub val_wmape: f64,
    pub lr: f64,
}

pub fn write_history_csv<W: Write>(w: W, records: &[EpochRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::Serde(e.to_string()))
}

pub fn save_history_csv(path: impl AsRef<Path>, records: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_history_csv(BufWriter::new(f), records)
}

pub fn read_history_csv(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Serde(format!("{}: {e}", path.display()))))
        .collect()
}
