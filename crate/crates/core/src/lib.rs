//! g-estimation of structural nested mean models (coarse, standard,
//! multiplicative and optimal-regime) identified under time-varying
//! conditional parallel trends.
//!
//! The crate covers panel ingestion ([`panel`]), blip models and blip-down
//! transforms ([`blip`]), nuisance models ([`nuisance`]), doubly robust
//! estimation with cross-fitting, influence-function variance and bootstrap
//! ([`gestimation`]), plug-in counterfactual quantities ([`derived`]),
//! optimal regimes ([`regime`]), sensitivity analysis ([`sensitivity`]) and
//! simulation designs with counterfactual oracles ([`simulation`]).

pub mod acceptance;
pub mod basis;
pub mod blip;
pub mod derived;
pub mod error;
pub mod gestimation;
pub mod linalg;
pub mod nuisance;
pub mod panel;
pub mod regime;
pub mod sensitivity;
pub mod simulation;

pub use error::{Error, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
