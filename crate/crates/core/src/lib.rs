//! Dropout training of two-layer ReLU networks in the lazy regime.
//!
//! [`trainer`] runs one-pass online dropout SGD with max-norm projection on
//! `f(x; W) = (1/√m) aᵀσ(Wx)`; [`theory`] builds the competitor
//! `U = W₁ + λV`, evaluates the bound constants and checks a traced run
//! against each convergence and concentration statement.
//!
//! ```
//! use dropnet::{data, numerics::{streams, RngStream}, theory, trainer};
//!
//! let spec = data::MarginSpec::axis_halfspace(5, 0.5, 0.5)?;
//! let mut cfg = trainer::TrainConfig::new(64, 5, 0.5, 0.5, 10.0, 50, 7);
//! cfg.snapshot_stride = 10;
//! let data = data::HalfspaceSampler::new(RngStream::new(7, streams::DATA), &spec)?;
//! let out = trainer::train(cfg, data, None)?;
//! assert_eq!(out.records.len(), 6);
//! assert!(out.final_params.max_row_norm() <= 10.0);
//! # Ok::<(), dropnet::Error>(())
//! ```

pub mod data;
mod error;
pub mod model;
pub mod numerics;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{DropoutMask, NetworkParams};
pub use trainer::{train, TrainConfig, Trainer, Variant};

// Book chapters run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/competitor.md")]
    mod competitor {}
    #[doc = include_str!("../../../book/src/bounds.md")]
    mod bounds {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
}
