//! Geodesic density regression for 4D CT.

pub mod adjoint;
pub mod cli;
pub mod density;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod metrics;
pub mod optimize;
pub mod par;
pub mod phantom;
pub mod regression;

pub use error::{GdrError, Result};
