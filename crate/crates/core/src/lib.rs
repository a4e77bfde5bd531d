//! Hyper-representation learning over zoos of small classifiers.

pub mod ae;
pub mod arch;
pub mod classifier;
pub mod container;
pub mod data;
pub mod downstream;
pub mod error;
pub mod grad_analysis;
pub mod io;
pub mod losses;
pub mod tokenizer;
pub mod training;
pub mod zoo;

pub use error::{Result, WslError};
