//! Area-level small area estimation when the covariate is itself a survey
//! estimate whose error is correlated with the response's sampling error.
//!
//! The pipeline is: [`model::validate_dataset`] to build a [`Dataset`],
//! [`estimation::fit_mecor`] for `omega_hat`, [`prediction::predict_all`] for
//! the area predictors and [`mspe`] for jackknife MSPE estimates. The
//! [`baselines`] module holds the comparator procedures, [`simulation`] the
//! Monte Carlo engine and [`survey_prep`] the unit-to-area preparation step.

pub mod baselines;
pub mod error;
pub mod estimation;
pub mod io;
pub mod model;
pub mod mspe;
pub mod optimize;
pub mod prediction;
pub mod report;
pub mod simulation;
pub mod survey_prep;

pub use error::{ErrorClass, Result, SaeError};
pub use estimation::{fit_mecor, FitResult, Method};
pub use model::{validate_dataset, AreaObservation, Dataset, ErrorCov, LatentTruth, ModelParams};
pub use mspe::{JkScale, JackknifeSet, MspeRecord};
pub use prediction::PredictionRecord;
