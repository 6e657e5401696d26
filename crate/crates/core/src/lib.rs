pub mod error;
pub mod geometry;
pub mod inference;
pub mod model;
pub mod observation;
pub mod prediction;
pub mod simulation;
pub mod sparse;
pub mod spde;
pub mod temporal;

pub use error::{Error, Result};
