//! Conditional adversarial support alignment for domain adaptation under
//! label shift, with exact finite-sample oracles for the support
//! divergences and integral measure discrepancy bounds it relies on.

pub mod datagen;
pub mod divergences;
pub mod error;
pub mod harness;
pub mod imd;
pub mod losses;
pub mod models;
pub mod sampling;
pub mod serde_ext;
pub mod tensor;

pub use error::{Error, Result};
