pub mod autograd;
pub mod checkpoint;
pub mod container;
pub mod correlation;
pub mod encoder;
pub mod error;
pub mod gls;
pub mod init;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod refine;
pub mod sequence;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
