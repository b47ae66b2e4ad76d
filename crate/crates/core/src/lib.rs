#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod certificate;
pub mod error;
pub mod experiment;
pub mod hessian;
pub mod kernels;
pub mod libs;
pub mod metrics;
pub mod model;
pub mod solver;

pub use error::{Error, Result};

/// Version of this library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
