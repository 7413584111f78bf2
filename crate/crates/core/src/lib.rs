pub mod autograd;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod diffmask;
pub mod error;
pub mod experiments;
pub mod hardconcrete;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod toytask;

pub use error::{Error, Result};
