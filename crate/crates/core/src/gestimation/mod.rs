//! Doubly robust g-estimation.
//!
//! For each subject the estimating function is
//!
//! ```text
//! U = Σ_{m<k} R_m {H_mk(ψ) - H_{m,k-1}(ψ) - v̂_m(k, L̄_m)} {s_m(k, ·) - Ê[s_m(k, ·) | L̄_m]}
//! ```
//!
//! with `R_m = 1{T >= m}` for coarse models and `R_m = 1` otherwise. When the
//! blip is linear in `ψ` and the trend model is least squares, the trend
//! fit is itself linear in `ψ`, so `P_n U(ψ) = b - Mψ` and the root is
//! available in closed form. Otherwise a damped Newton solver is used, with
//! the trend model refit at every candidate `ψ`.

pub mod bootstrap;
pub mod design;
pub mod solve;

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::blip::{BlipBasis, BlipModel};
use crate::error::Result;
use crate::nuisance::{LearnerRegistry, NuisanceSpec};
use crate::panel::{LBar, PanelDataset};
use crate::sensitivity::BiasFunction;

pub use bootstrap::{bootstrap, bootstrap_design, bootstrap_indices, bootstrap_weights, BootstrapResult};
pub use design::Design;
pub use solve::SolverConfig;

/// Estimator variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Full-sample nuisances, linear system solved directly.
    ClosedForm,
    /// Full-sample nuisances, Newton iterations with trend refits.
    Iterative,
    /// Fold-wise estimates with out-of-fold nuisances, averaged.
    Crossfit,
}

impl std::str::FromStr for Method {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed-form" => Ok(Method::ClosedForm),
            "iterative" => Ok(Method::Iterative),
            "crossfit" | "cross-fit" => Ok(Method::Crossfit),
            _ => Err(crate::Error::Config(format!(
                "unknown method `{s}` (expected closed-form, iterative or crossfit)"
            ))),
        }
    }
}

/// The user-chosen index function `s_m(k, L̄_m, a_m)` with values in `R^d`.
///
/// Centering `Ê[s | L̄_m]` plugs the fitted treatment mean into `s`, which is
/// exact when `s` is affine in the treatment (always the case for binary
/// scalar treatments).
pub trait SFunction: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn eval(&self, h: &LBar<'_>, a: &[f64], m: usize, k: usize, out: &mut [f64]);
}

/// `s_m(k, ·) = B_mk(·)`: the blip's own feature map.
#[derive(Debug, Clone)]
pub struct BasisS(pub Arc<dyn BlipBasis>);

impl SFunction for BasisS {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval(&self, h: &LBar<'_>, a: &[f64], m: usize, k: usize, out: &mut [f64]) {
        self.0.features(h, a, m, k, out)
    }
}

/// Options shared by all estimators.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub method: Method,
    /// Explicit ridge `ε` added to the normalized system `M/n + εI`.
    pub ridge: f64,
    pub solver: SolverConfig,
    /// Anchors `m` below this value contribute no estimating-equation terms.
    pub min_anchor: usize,
    /// Custom index function; defaults to the blip feature map.
    pub s: Option<Arc<dyn SFunction>>,
    /// Bias function for sensitivity analysis (coarse, binary treatment).
    pub bias: Option<Arc<dyn BiasFunction>>,
    pub registry: LearnerRegistry,
    /// Starting value for iterative solves; zero by default.
    pub start: Option<Vec<f64>>,
    /// Solve each cross-fitting fold iteratively even for linear models.
    pub iterative_folds: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            method: Method::ClosedForm,
            ridge: 0.0,
            solver: SolverConfig::default(),
            min_anchor: 0,
            s: None,
            bias: None,
            registry: LearnerRegistry::default(),
            start: None,
            iterative_folds: false,
        }
    }
}

impl FitOptions {
    pub fn method(method: Method) -> Self {
        FitOptions {
            method,
            ..Default::default()
        }
    }
}

/// Solver and nuisance diagnostics attached to every fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    /// `‖P_n U(ψ̂)‖∞`, worst fold for cross-fitting.
    pub residual_norm: f64,
    pub tolerance: f64,
    pub iterations: usize,
    pub fold_seed: Option<u64>,
    pub ridge: f64,
    /// How the Jacobian was obtained: "exact" or "finite-difference".
    pub jacobian: String,
    pub trace: Vec<f64>,
    pub flags: Vec<String>,
}

/// A fitted parameter vector with its inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GEstimate {
    pub psi_hat: Vec<f64>,
    pub names: Vec<String>,
    pub method: Method,
    /// Mean Jacobian `Ĵ = ∂P_n U/∂ψ` (average over folds for cross-fitting).
    pub jacobian: Vec<Vec<f64>>,
    /// Covariance of `ψ̂` from the empirical variance of the influence function.
    pub covariance: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    /// 95% Wald intervals.
    pub ci: Vec<[f64; 2]>,
    pub fold_estimates: Vec<Vec<f64>>,
    /// Per-subject influence values `-Ĵ⁻¹U_i`.
    #[serde(skip)]
    pub influence: Vec<Vec<f64>>,
    /// Number of subjects (sum of weights).
    pub n: f64,
    pub diagnostics: Diagnostics,
}

impl GEstimate {
    pub fn dim(&self) -> usize {
        self.psi_hat.len()
    }
}

/// Fits with the method named in `opts`.
pub fn fit(data: &PanelDataset, model: &BlipModel, spec: &NuisanceSpec, opts: &FitOptions) -> Result<GEstimate> {
    Design::build(data, model, spec, opts)?.fit()
}

/// Direct solution of the linear moment system.
pub fn closed_form_fit(
    data: &PanelDataset,
    model: &BlipModel,
    spec: &NuisanceSpec,
    opts: &FitOptions,
) -> Result<GEstimate> {
    let o = FitOptions {
        method: Method::ClosedForm,
        ..opts.clone()
    };
    fit(data, model, spec, &o)
}

/// Newton iterations on `P_n U(ψ) = 0` with the trend refit at each iterate.
pub fn solve_iterative(
    data: &PanelDataset,
    model: &BlipModel,
    spec: &NuisanceSpec,
    opts: &FitOptions,
) -> Result<GEstimate> {
    let o = FitOptions {
        method: Method::Iterative,
        ..opts.clone()
    };
    fit(data, model, spec, &o)
}

/// Cross-fit estimate: fold-wise roots with out-of-fold nuisances, averaged.
pub fn crossfit_estimate(
    data: &PanelDataset,
    model: &BlipModel,
    spec: &NuisanceSpec,
    opts: &FitOptions,
) -> Result<GEstimate> {
    let o = FitOptions {
        method: Method::Crossfit,
        ..opts.clone()
    };
    fit(data, model, spec, &o)
}

/// Per-subject estimating functions `U_i(ψ)` with full-sample nuisances
/// fitted at `ψ`.
pub fn evaluate_u(
    data: &PanelDataset,
    model: &BlipModel,
    psi: &[f64],
    spec: &NuisanceSpec,
    opts: &FitOptions,
) -> Result<Vec<Vec<f64>>> {
    Design::build(data, model, spec, opts)?.subject_moments(psi)
}
