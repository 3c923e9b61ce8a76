pub mod analysis;
pub mod cli;
pub mod coxfit;
pub mod diagnostics;
pub mod error;
pub mod matcher;
pub mod par;
pub mod process;
pub mod registry;
pub mod simgen;
pub mod splinefit;

pub use error::{Error, Result};
