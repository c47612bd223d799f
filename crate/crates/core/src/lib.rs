//! Rating prediction with multinomial mixture models when ratings are
//! missing not at random.
//!
//! * [`mixture`]: Bayesian multinomial mixture fitted by MAP-EM, ignoring
//!   the missing-data mechanism.
//! * [`cptv`]: the same mixture combined with a CPT-v missing-data model
//!   (observation probability depends on the rating value), plus held-out
//!   estimation of the observation probabilities.
//! * [`predict`]: posterior predictive distributions, median prediction,
//!   MAE and the train/test protocol runner.
//! * [`analysis`]: marginal-distribution diagnostics between two samples.
//! * [`synthetic`]: ground-truth generators and brute-force oracles.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod cli;
pub mod cptv;
pub mod data;
pub mod error;
pub mod mixture;
pub mod model_io;
pub mod numeric;
pub mod predict;
pub mod synthetic;

pub use cptv::{fit_nmar, CptvParams, MuMode};
pub use data::{Observation, RatingDataset, SplitPair};
pub use error::{Error, Result};
pub use mixture::{fit_mar, FitConfig, FitResult, MixtureParams, Responsibilities};
pub use predict::FittedModel;
