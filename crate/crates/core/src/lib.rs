pub mod causal;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod extremes;
pub mod hotspot;
pub mod lattice;
pub mod maxstep;
pub mod num;
pub mod optim;
pub mod simulate;
pub mod smooth;
pub mod sparse;

pub use error::{Error, Result};
