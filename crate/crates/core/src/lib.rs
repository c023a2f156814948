//! Masked-diffusion language-model inference with a proxy-guided partial
//! layer cache: per-layer update identification on (low-rank) value
//! projections, sparse recomputation of the drifting tokens, and a layer-wise
//! update budget.

pub mod bench;
pub mod budget;
pub mod cache;
pub mod decoder;
pub mod error;
pub mod flops;
pub mod io;
pub mod linalg;
pub mod model;
pub mod proxy;
pub mod verify;

pub use error::{Error, Result};
