pub mod coarsening;
pub mod data;
pub mod diff;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod training;
pub mod verify;
pub mod zinb;

pub use error::{Error, Result};
