//! Fourier-domain single-particle reconstruction with fixed poses, and the
//! Hessian-diagonal preconditioned SGD that keeps high-resolution shells from
//! stalling.
//!
//! Modules follow the pipeline: [`grid`] layout and shells, [`forward`]
//! projection and synthetic data, [`hessian`] structure of the normal
//! operator, [`optim`] the solvers, [`metrics`] evaluation, and [`config`] the
//! experiment description shared by the CLI and the Python bindings.

pub mod config;
pub mod error;
pub mod forward;
pub mod grid;
pub mod hessian;
pub mod io;
pub mod metrics;
pub mod optim;
mod parallel;
mod rng;

pub use error::{FsldError, Result};
