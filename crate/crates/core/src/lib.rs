//! Two-stage space-time DeepKriging.
//!
//! Stage one ([`interpolator`]) fits quantile feed-forward networks on a
//! stacked basis embedding of the coordinates ([`basis`]). Stage two
//! ([`forecaster`], [`convforecaster`]) trains LSTM / ConvLSTM quantile
//! forecasters on the interpolated series at a target location.
//! [`simulator`] draws Gaussian space-time fields for verification and
//! [`evaluation`] scores predictions.

pub mod basis;
pub mod convforecaster;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod forecaster;
pub mod interpolator;
pub mod nn;
pub mod quantile;
pub mod simulator;

pub use dataset::{Observation, SpaceTimeDataset};
pub use error::{Error, Result};
