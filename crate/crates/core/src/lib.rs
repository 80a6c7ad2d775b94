pub mod error;
pub mod tensor;
pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tpca;
pub mod train;
pub mod xlr;

pub use error::{Error, Result};
