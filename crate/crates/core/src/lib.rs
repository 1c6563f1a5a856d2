//! Mean-field simulation of rf outcoupling from a magnetically trapped
//! F = 1 condensate in the absence of gravity.

pub mod analysis;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod fieldmodel;
pub mod grid;
pub mod groundstate;
pub mod run;
pub mod scanner;
pub mod units;
pub mod zeeman;

pub use error::{Error, Result};
