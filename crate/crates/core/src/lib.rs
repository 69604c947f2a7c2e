pub mod autodiff;
pub mod data;
mod error;
pub mod nn;
pub mod metrics;
pub mod objectives;
pub mod train;
pub mod ubl;

pub use error::{Error, Result};
