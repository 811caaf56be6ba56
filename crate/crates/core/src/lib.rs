//! Max-infinitely divisible spatial extremes: simulation, closed-form
//! distribution functions, and a variational autoencoder emulator.

pub mod cli;
pub mod error;
pub mod field;
pub mod grad_tape;
pub mod io;
pub mod marginal_models;
pub mod maxid_process;
pub mod optim;
pub mod quadrature;
pub mod seed;
pub mod spatial_basis;
pub mod stable_dist;
pub mod tail_metrics;
pub mod vae;

pub use error::{Error, Result};
pub use field::{Field, Scale};
pub use spatial_basis::{BasisMatrix, KnotConfig, SiteSet};
