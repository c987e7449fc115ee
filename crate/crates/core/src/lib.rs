//! AquaCast: a multi-input transformer forecaster for urban drainage series.
//!
//! History channels (endogenous sensors plus exogenous rain history) are embedded
//! jointly by strided convolutions into temporal tokens; each exogenous forecast
//! series becomes one extra token. A transformer encoder mixes the tokens and a
//! single affine decoder regresses the target horizon.
//!
//! The crate also ships the preprocessing pipeline, a synthetic drainage
//! generator ([`cdm`]) and the point, DTW-accuracy and ordinal-complexity metrics.

pub mod autodiff;
pub mod cdm;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
