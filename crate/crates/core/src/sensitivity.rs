//! Sensitivity analysis for departures from coarse parallel trends via
//! analyst-specified bias functions `c(l̄_m, k)`.
//!
//! A bias function gives the treated-minus-untreated gap in untreated outcome
//! trends. The fit swaps the coarse blip-down transform at horizon `k` for its
//! bias-adjusted version and otherwise runs the usual g-estimation pipeline.

use std::fmt::Debug;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::covariate_index;
use crate::blip::{binary_component, BlipModel, Flavor};
use crate::derived::{self, Context, Query};
use crate::error::{Error, Result};
use crate::gestimation::{self, FitOptions, GEstimate};
use crate::nuisance::NuisanceSpec;
use crate::panel::{LBar, PanelDataset};

const MIN_SUCCESS_RATE: f64 = 0.8;

/// `c(l̄_m, k)`: the treated-minus-untreated gap in untreated outcome trends
/// at horizon `k` among subjects at risk at `m = h.time()`.
pub trait BiasFunction: Send + Sync + Debug {
    fn eval(&self, h: &LBar<'_>, k: usize) -> f64;
}

/// `c ≡ c0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantBias {
    pub c0: f64,
}

impl BiasFunction for ConstantBias {
    fn eval(&self, _h: &LBar<'_>, _k: usize) -> f64 {
        self.c0
    }
}

/// `c = c0 (k - m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonScaledBias {
    pub c0: f64,
}

impl BiasFunction for HorizonScaledBias {
    fn eval(&self, h: &LBar<'_>, k: usize) -> f64 {
        self.c0 * (k as f64 - h.time() as f64)
    }
}

/// `c = c0 + Σ_j c1_j Z_m[j]` over the listed covariate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateLinearBias {
    pub c0: f64,
    slopes: Vec<(usize, f64)>,
}

impl CovariateLinearBias {
    pub fn new(c0: f64, slopes: &[(String, f64)], data: &PanelDataset) -> Result<Self> {
        let slopes = slopes
            .iter()
            .map(|(name, b)| Ok((covariate_index(data, name)?, *b)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CovariateLinearBias { c0, slopes })
    }
}

impl BiasFunction for CovariateLinearBias {
    fn eval(&self, h: &LBar<'_>, _k: usize) -> f64 {
        let z = h.covariates(h.time() as i64).unwrap_or(&[]);
        self.c0 + self.slopes.iter().map(|(j, b)| b * z[*j]).sum::<f64>()
    }
}

/// Serializable one-parameter families indexed by `c0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum BiasFamily {
    Constant,
    HorizonScaled,
    /// `c0 + Σ slope · Z_m[column]` with fixed slopes.
    CovariateLinear { slopes: Vec<(String, f64)> },
}

impl BiasFamily {
    pub fn at(&self, c0: f64, data: &PanelDataset) -> Result<Arc<dyn BiasFunction>> {
        Ok(match self {
            BiasFamily::Constant => Arc::new(ConstantBias { c0 }),
            BiasFamily::HorizonScaled => Arc::new(HorizonScaledBias { c0 }),
            BiasFamily::CovariateLinear { slopes } => Arc::new(CovariateLinearBias::new(c0, slopes, data)?),
        })
    }
}

/// A family of bias functions indexed by a scalar, either built in or custom.
#[derive(Clone)]
pub enum Family {
    Builtin(BiasFamily),
    Custom(Arc<dyn Fn(f64) -> Arc<dyn BiasFunction> + Send + Sync>),
}

impl Family {
    fn at(&self, c0: f64, data: &PanelDataset) -> Result<Arc<dyn BiasFunction>> {
        match self {
            Family::Builtin(b) => b.at(c0, data),
            Family::Custom(f) => Ok(f(c0)),
        }
    }
}

impl From<BiasFamily> for Family {
    fn from(b: BiasFamily) -> Self {
        Family::Builtin(b)
    }
}

fn check_model(data: &PanelDataset, model: &BlipModel) -> Result<()> {
    if model.flavor != Flavor::Coarse {
        return Err(Error::Unsupported(
            "sensitivity analysis is available for coarse models only".into(),
        ));
    }
    binary_component(model, data).map_err(|e| match e {
        Error::Unsupported(m) | Error::Config(m) => Error::Unsupported(m),
        other => other,
    })?;
    Ok(())
}

/// g-estimate of a coarse model with the bias-adjusted transform.
pub fn sensitivity_fit(
    data: &PanelDataset,
    model: &BlipModel,
    bias: Arc<dyn BiasFunction>,
    spec: &NuisanceSpec,
    opts: &FitOptions,
) -> Result<GEstimate> {
    check_model(data, model)?;
    let o = FitOptions {
        bias: Some(bias),
        ..opts.clone()
    };
    gestimation::fit(data, model, spec, &o)
}

/// A target whose interval is tracked across the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetValue {
    pub label: String,
    pub estimate: f64,
    pub ci: Option<[f64; 2]>,
}

/// Fit at one grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub c0: f64,
    pub psi_hat: Option<Vec<f64>>,
    pub ci: Option<Vec<[f64; 2]>>,
    pub targets: Vec<TargetValue>,
    pub error: Option<String>,
}

/// Smallest `|c0|` in each direction at which a target interval covers 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub label: String,
    /// `None` when the interval excludes 0 across the grid on that side.
    pub positive: Option<f64>,
    pub negative: Option<f64>,
    /// Interval already covers 0 without adjustment.
    pub covers_at_zero: bool,
}

/// `ψ̂(c)` and derived targets across a grid of bias parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub names: Vec<String>,
    pub points: Vec<SensitivityPoint>,
    pub breakdown: Vec<Breakdown>,
}

/// Everything needed to refit at a bias value.
pub struct SensitivityProblem<'a> {
    pub data: &'a PanelDataset,
    pub model: &'a BlipModel,
    pub spec: &'a NuisanceSpec,
    pub opts: &'a FitOptions,
    pub family: Family,
    pub targets: Vec<Query>,
}

impl SensitivityProblem<'_> {
    /// Fits at one grid value; targets carry delta-method intervals.
    pub fn point(&self, c0: f64) -> SensitivityPoint {
        match self.try_point(c0) {
            Ok(p) => p,
            Err(e) => SensitivityPoint {
                c0,
                psi_hat: None,
                ci: None,
                targets: vec![],
                error: Some(e.to_string()),
            },
        }
    }

    fn try_point(&self, c0: f64) -> Result<SensitivityPoint> {
        let bias = self.family.at(c0, self.data)?;
        let fit = sensitivity_fit(self.data, self.model, bias, self.spec, self.opts)?;
        let ctx = Context {
            data: self.data,
            model: self.model,
            fit: &fit,
            spec: self.spec,
            opts: self.opts,
        };
        let targets = self
            .targets
            .iter()
            .map(|q| {
                derived::evaluate(&ctx, q, true).map(|v| TargetValue {
                    label: v.label,
                    estimate: v.estimate,
                    ci: v.ci,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SensitivityPoint {
            c0,
            psi_hat: Some(fit.psi_hat.clone()),
            ci: Some(fit.ci.clone()),
            targets,
            error: None,
        })
    }

    /// Intervals of every tracked quantity: coefficients then targets.
    fn intervals(point: &SensitivityPoint) -> Option<Vec<[f64; 2]>> {
        let mut out = point.ci.clone()?;
        for t in &point.targets {
            out.push(t.ci?);
        }
        Some(out)
    }
}

/// Position of an interval relative to 0: above, covering, or below.
fn side_of_zero(ci: [f64; 2]) -> i8 {
    if ci[0] > 0.0 {
        1
    } else if ci[1] < 0.0 {
        -1
    } else {
        0
    }
}

/// Fits every grid point in parallel; fails only if fewer than 80% succeed.
pub fn sensitivity_grid(problem: &SensitivityProblem<'_>, grid: &[f64]) -> Result<SensitivityCurve> {
    if grid.is_empty() {
        return Err(Error::Config("sensitivity grid is empty".into()));
    }
    if grid.iter().any(|c| !c.is_finite()) {
        return Err(Error::Config("sensitivity grid values must be finite".into()));
    }
    check_model(problem.data, problem.model)?;
    let mut grid = grid.to_vec();
    if !grid.contains(&0.0) {
        grid.push(0.0);
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let points: Vec<SensitivityPoint> = grid.par_iter().map(|c| problem.point(*c)).collect();
    let ok = points.iter().filter(|p| p.error.is_none()).count();
    if (ok as f64) < MIN_SUCCESS_RATE * points.len() as f64 {
        let first = points.iter().find_map(|p| p.error.clone()).unwrap_or_default();
        return Err(Error::Config(format!(
            "only {ok} of {} sensitivity grid points could be fitted (first failure: {first})",
            points.len()
        )));
    }
    let names = problem.model.names();
    let mut labels = names.clone();
    labels.extend(problem.targets.iter().map(|q| q.label()));
    let breakdown = (0..labels.len())
        .map(|t| breakdown(problem, &points, t, &labels[t]))
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityCurve {
        names,
        points,
        breakdown,
    })
}

/// Interval of tracked quantity `t` at `c0`, refitting.
fn interval_at(problem: &SensitivityProblem<'_>, c0: f64, t: usize) -> Result<[f64; 2]> {
    let p = problem.try_point(c0)?;
    SensitivityProblem::intervals(&p)
        .map(|v| v[t])
        .ok_or_else(|| Error::Config("interval unavailable".into()))
}

const BISECTION_TOL: f64 = 1e-6;

/// Smallest `|c0|` on each side of 0 at which quantity `t`'s interval
/// reaches 0: locate the first grid cell whose far end no longer lies on the
/// same side of 0 as the unadjusted interval, then bisect inside it.
fn breakdown(
    problem: &SensitivityProblem<'_>,
    points: &[SensitivityPoint],
    t: usize,
    label: &str,
) -> Result<Breakdown> {
    let ci = |p: &SensitivityPoint| SensitivityProblem::intervals(p).map(|v| v[t]);
    let zero = points
        .iter()
        .find(|p| p.c0 == 0.0)
        .and_then(ci)
        .ok_or_else(|| Error::Config("fit without bias adjustment failed".into()))?;
    let start = side_of_zero(zero);
    let covers_at_zero = start == 0;
    let side = |sign: f64| -> Result<Option<f64>> {
        if covers_at_zero {
            return Ok(Some(0.0));
        }
        let mut ordered: Vec<&SensitivityPoint> =
            points.iter().filter(|p| p.c0 * sign >= 0.0 && p.error.is_none()).collect();
        ordered.sort_by(|a, b| (a.c0 * sign).total_cmp(&(b.c0 * sign)));
        for w in ordered.windows(2) {
            let Some(hi_ci) = ci(w[1]) else { continue };
            if side_of_zero(hi_ci) == start {
                continue;
            }
            let (mut a, mut b) = (w[0].c0, w[1].c0);
            while (b - a).abs() > BISECTION_TOL * b.abs().max(1.0) {
                let mid = 0.5 * (a + b);
                if side_of_zero(interval_at(problem, mid, t)?) == start {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            return Ok(Some(b.abs()));
        }
        Ok(None)
    };
    let positive = side(1.0)?;
    let negative = side(-1.0)?;
    Ok(Breakdown {
        label: label.to_string(),
        positive,
        negative,
        covers_at_zero,
    })
}

/// Writes plot-ready rows `c0,quantity,estimate,lo,hi`.
pub fn write_curve_csv<W: Write>(w: W, curve: &SensitivityCurve) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["c0", "quantity", "estimate", "lo", "hi"])?;
    for p in &curve.points {
        if let (Some(psi), Some(ci)) = (&p.psi_hat, &p.ci) {
            for (t, name) in curve.names.iter().enumerate() {
                wr.write_record([
                    p.c0.to_string(),
                    name.clone(),
                    psi[t].to_string(),
                    ci[t][0].to_string(),
                    ci[t][1].to_string(),
                ])?;
            }
        }
        for tv in &p.targets {
            let (lo, hi) = tv.ci.map_or((f64::NAN, f64::NAN), |c| (c[0], c[1]));
            wr.write_record([
                p.c0.to_string(),
                tv.label.clone(),
                tv.estimate.to_string(),
                lo.to_string(),
                hi.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{entry, simulate_panel};

    fn violation(n: usize) -> (PanelDataset, BlipModel, NuisanceSpec) {
        let e = entry("violation").unwrap();
        let data = simulate_panel(&e.dgp, n, 11).unwrap();
        let model = e.model.build(&data, None).unwrap();
        (data, model, e.nuisance.clone())
    }

    #[test]
    fn zero_bias_reproduces_unadjusted_fit_bitwise() {
        let (data, model, spec) = violation(3000);
        let opts = FitOptions::default();
        let plain = gestimation::fit(&data, &model, &spec, &opts).unwrap();
        let zero = sensitivity_fit(&data, &model, Arc::new(ConstantBias { c0: 0.0 }), &spec, &opts).unwrap();
        for (a, b) in plain.psi_hat.iter().zip(&zero.psi_hat) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in plain.se.iter().zip(&zero.se) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn estimate_is_affine_in_constant_bias() {
        let (data, model, spec) = violation(3000);
        let opts = FitOptions::default();
        let at = |c0: f64| {
            sensitivity_fit(&data, &model, Arc::new(ConstantBias { c0 }), &spec, &opts)
                .unwrap()
                .psi_hat
        };
        let (p0, p1, p2) = (at(-0.4), at(0.3), at(1.1));
        for t in 0..p0.len() {
            let slope = (p1[t] - p0[t]) / 0.7;
            let predicted = p1[t] + slope * 0.8;
            assert!((predicted - p2[t]).abs() < 1e-8, "coefficient {t}: {predicted} vs {}", p2[t]);
        }
    }

    #[test]
    fn grid_of_zero_matches_unadjusted_fit() {
        let (data, model, spec) = violation(2000);
        let opts = FitOptions::default();
        let plain = gestimation::fit(&data, &model, &spec, &opts).unwrap();
        let problem = SensitivityProblem {
            data: &data,
            model: &model,
            spec: &spec,
            opts: &opts,
            family: BiasFamily::Constant.into(),
            targets: vec![],
        };
        let curve = sensitivity_grid(&problem, &[0.0]).unwrap();
        assert_eq!(curve.points.len(), 1);
        assert_eq!(curve.points[0].psi_hat.as_ref().unwrap(), &plain.psi_hat);
    }

    #[test]
    fn breakdown_bisection_agrees_with_dense_scan() {
        let (data, model, spec) = violation(2000);
        let opts = FitOptions::default();
        let problem = SensitivityProblem {
            data: &data,
            model: &model,
            spec: &spec,
            opts: &opts,
            family: BiasFamily::Constant.into(),
            targets: vec![],
        };
        let grid: Vec<f64> = (-4..=4).map(|v| v as f64 * 0.5).collect();
        let curve = sensitivity_grid(&problem, &grid).unwrap();
        for (t, b) in curve.breakdown.iter().enumerate() {
            if b.covers_at_zero {
                continue;
            }
            for (sign, found) in [(1.0, b.positive), (-1.0, b.negative)] {
                // dense scan oracle on the same side
                let start = side_of_zero(interval_at(&problem, 0.0, t).unwrap());
                let step = 0.02;
                let mut scan = None;
                let mut c = 0.0;
                while c <= 2.0 + 1e-12 {
                    let ci = interval_at(&problem, sign * c, t).unwrap();
                    if side_of_zero(ci) != start {
                        scan = Some(c);
                        break;
                    }
                    c += step;
                }
                match (found, scan) {
                    (Some(f), Some(s)) => assert!(f <= s + 1e-9 && f > s - step - 1e-6, "{}: {f} vs {s}", b.label),
                    (None, None) => {}
                    other => panic!("{}: bisection {:?} vs scan {:?}", b.label, other.0, other.1),
                }
            }
        }
    }

    #[test]
    fn rejects_non_coarse_models() {
        let e = entry("homogeneous").unwrap();
        let data = simulate_panel(&e.dgp, 500, 1).unwrap();
        let mut model = e.model.build(&data, None).unwrap();
        model.flavor = Flavor::Standard;
        let err = sensitivity_fit(&data, &model, Arc::new(ConstantBias { c0: 0.1 }), &e.nuisance, &FitOptions::default())
            .unwrap_err();
        assert_eq!(err.kind(), "unsupported");
    }

    #[test]
    fn bias_families_evaluate_as_documented() {
        let e = entry("coarse-staggered").unwrap();
        let data = simulate_panel(&e.dgp, 5, 2).unwrap();
        let h = data.history(0, 1).lbar();
        assert_eq!(BiasFamily::HorizonScaled.at(0.5, &data).unwrap().eval(&h, 3), 1.0);
        let lin = BiasFamily::CovariateLinear {
            slopes: vec![("l".into(), 2.0)],
        }
        .at(0.5, &data)
        .unwrap();
        let z = data.covariates(0, 1)[0];
        assert_eq!(lin.eval(&h, 3), 0.5 + 2.0 * z);
    }
}
