//! Open-path path-integral molecular dynamics with variational enhanced
//! sampling for directional momentum distributions.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod oracle1d;
pub mod path;
pub mod potentials;
pub mod rdm;
pub mod run;
pub mod ves;

pub use error::{Error, Result};
