//! Acceptance suite: Monte Carlo and oracle checks of the estimators on the
//! simulation gallery.
//!
//! "Within 3 MC SEs" means that over `R` replicates the mean estimate `ψ̄`
//! satisfies `|ψ̄ - truth| < 3 sqrt(sd²/R + se_truth²)`, where `sd` is the
//! replicate standard deviation and `se_truth` the Monte Carlo error of an
//! oracle truth (0 for planted parameters).

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{HistoryBasis, HistoryTerm};
use crate::blip::{blip_down, BlipModel, Flavor, PerPairBasis};
use crate::derived::{evaluate, Cohort, Comparator, Context, Predicate, Query};
use crate::error::{Error, Result};
use crate::gestimation::{bootstrap_design, fit, Design, FitOptions, Method};
use crate::nuisance::{NuisanceSpec, TreatmentFamily};
use crate::panel::{load_csv, PanelDataset};
use crate::regime::{fit_optimal_regime, optimal_action_for_history, regime_value};
use crate::sensitivity::{sensitivity_fit, ConstantBias};
use crate::simulation::{
    cde_oracle, entry, expectation, gallery, misspecify, oracle_truth, regime_oracle, simulate_panel, GalleryEntry,
    MeanSe, Misspecification,
};

/// Replicate counts and sample sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Sizes as stated by each criterion, with runtime limits enforced.
    Full,
    /// A tenth of the replicates and a fifth of the sample size; a smoke run
    /// whose verdicts are indicative only.
    Quick,
}

impl Scale {
    fn reps(self, full: usize) -> usize {
        match self {
            Scale::Full => full,
            Scale::Quick => (full / 10).max(10),
        }
    }

    fn n(self, full: usize) -> usize {
        match self {
            Scale::Full => full,
            Scale::Quick => (full / 5).max(1000),
        }
    }

    fn timed(self) -> bool {
        self == Scale::Full
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

/// Outcome of one criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub id: usize,
    pub title: String,
    pub status: Status,
    pub seconds: f64,
    pub details: Vec<String>,
}

impl CriterionReport {
    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        write!(f, "criterion {:>2} {s} {} ({:.1}s)", self.id, self.title, self.seconds)?;
        for d in &self.details {
            write!(f, "\n    {d}")?;
        }
        Ok(())
    }
}

pub const TITLES: [&str; 11] = [
    "identification: residualized trend regression on treatment",
    "consistency of closed-form, iterative and cross-fit estimators",
    "double robustness under nuisance misspecification",
    "closed-form and iterative roots agree",
    "Wald and bootstrap interval coverage",
    "multiplicative model recovery",
    "sensitivity analysis on a parallel-trends violation",
    "optimal regime rule and value",
    "coarse controlled direct effect",
    "derived never-treated and conditional means",
    "real-data coarse model (optional)",
];

/// Runs criterion `id` (1-based).
pub fn run(id: usize, scale: Scale) -> CriterionReport {
    let start = Instant::now();
    let mut details = Vec::new();
    let result = match id {
        1 => identification(scale, &mut details),
        2 => consistency(scale, &mut details),
        3 => double_robustness(scale, &mut details),
        4 => solver_equivalence(scale, &mut details),
        5 => coverage(scale, &mut details),
        6 => multiplicative(scale, &mut details),
        7 => sensitivity(scale, &mut details),
        8 => optimal_regime(scale, &mut details),
        9 => controlled_direct_effect(scale, &mut details),
        10 => derived_means(scale, &mut details),
        11 => real_data(&mut details),
        _ => Err(Error::Config(format!("no criterion {id}"))),
    };
    let status = match result {
        Ok(s) => s,
        Err(e) => {
            details.push(format!("error: {e}"));
            Status::Fail
        }
    };
    CriterionReport {
        id,
        title: TITLES.get(id.wrapping_sub(1)).copied().unwrap_or("unknown").to_string(),
        status,
        seconds: start.elapsed().as_secs_f64(),
        details,
    }
}

/// Runs every criterion in order.
pub fn run_all(scale: Scale) -> Vec<CriterionReport> {
    (1..=TITLES.len()).map(|id| run(id, scale)).collect()
}

fn verdict(ok: bool) -> Status {
    if ok {
        Status::Pass
    } else {
        Status::Fail
    }
}

fn gallery_entry(name: &str) -> Result<GalleryEntry> {
    entry(name).ok_or_else(|| Error::Config(format!("no gallery entry `{name}`")))
}

/// Replicate mean against a truth.
#[derive(Debug, Clone, Copy)]
struct McStat {
    mean: f64,
    bias: f64,
    mcse: f64,
}

impl McStat {
    fn z(&self) -> f64 {
        self.bias / self.mcse
    }
}

impl fmt::Display for McStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mean {:.4} bias {:+.4} mcse {:.4} z {:+.2}",
            self.mean,
            self.bias,
            self.mcse,
            self.z()
        )
    }
}

fn mc_stat(values: &[f64], truth: f64, truth_se: f64) -> McStat {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0).max(1.0);
    McStat {
        mean,
        bias: mean - truth,
        mcse: (var / r + truth_se * truth_se).sqrt(),
    }
}

fn column(samples: &[Vec<f64>], t: usize) -> Vec<f64> {
    samples.iter().map(|s| s[t]).collect()
}

/// Simulates replicate `rep` and applies `f`; replicates run in parallel.
fn replicate<T, F>(e: &GalleryEntry, n: usize, reps: usize, base_seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&PanelDataset, &BlipModel) -> Result<T> + Sync,
{
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let data = simulate_panel(&e.dgp, n, base_seed + r as u64)?;
            let model = e.model.build(&data, None)?;
            f(&data, &model)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 1. identification

/// OLS of `y` on `x` (row-major, `p` columns) with HC0 standard errors.
fn ols_hc0(x: &[f64], p: usize, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = y.len();
    let xm = DMatrix::from_row_slice(n, p, x);
    let yv = DVector::from_column_slice(y);
    let xtx = xm.transpose() * &xm;
    let inv = xtx
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Rank("identification regression design is singular".into()))?;
    let beta = &inv * (xm.transpose() * &yv);
    let resid = &yv - &xm * &beta;
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let row = xm.row(i);
        let e2 = resid[i] * resid[i];
        meat += row.transpose() * row * e2;
    }
    let cov = &inv * meat * &inv;
    Ok((beta.iter().copied().collect(), (0..p).map(|j| cov[(j, j)].sqrt()).collect()))
}

fn identification(scale: Scale, details: &mut Vec<String>) -> Result<Status> {
    let start = Instant::now();
    let n = scale.n(100_000);
    let mut ok = true;
    for name in ["coarse-staggered", "standard-general"] {
        let e = gallery_entry(name)?;
        let data = simulate_panel(&e.dgp, n, 1_001)?;
        let model = e.model.build(&data, None)?;
        let basis = HistoryBasis::resolve(&e.nuisance.trend_basis, &data)?;
        let kk = data.horizon();
        let mut worst: f64 = 0.0;
        for m in 0..kk {
            let rows: Vec<usize> = (0..data.n_subjects())
                .filter(|&i| model.flavor != Flavor::Coarse || model.initiation_time(&data, i).at_risk(m))
                .collect();
            let p = 1 + basis.dim(m);
            for k in m + 1..=kk {
                let mut x = Vec::with_capacity(rows.len() * p);
                let mut y = Vec::with_capacity(rows.len());
                for &i in &rows {
                    let dh = blip_down(&model, &e.psi, &data, i, m, k)?.value
                        - blip_down(&model, &e.psi, &data, i, m, k - 1)?.value;
                    y.push(dh);
                    x.push(data.treatment(i, m)[0]);
                    x.extend(basis.eval(&data.history(i, m).lbar()));
                }
                let (b, se) = ols_hc0(&x, p, &y)?;
                let z = b[0] / se[0];
                worst = worst.max(z.abs());
                let pass = z.abs() < 3.0;
                ok &= pass;
                details.push(format!(
                    "{name} (m={m}, k={k}): coefficient {:+.5} se {:.5} z {:+.2}{}",
                    b[0],
                    se[0],
                    z,
                    if pass { "" } else { "  <-- exceeds 3 SE" }
                ));
            }
        }
        details.push(format!("{name}: n = {n}, largest |z| = {worst:.2}"));
    }
    let secs = start.elapsed().as_secs_f64();
    if scale.timed() && secs >= 120.0 {
        details.push(format!("runtime {secs:.1}s exceeds 120s"));
        ok = false;
    }
    Ok(verdict(ok))
}

// ---------------------------------------------------------------------------
// 2. consistency

fn consistency(scale: Scale, details: &mut Vec<String>) -> Result<Status> {
    let n = scale.n(10_000);
    let reps = scale.reps(100);
    let methods = [Method::ClosedForm, Method::Iterative, Method::Crossfit];
    let mut ok = true;
    let mut slowest: f64 = 0.0;
    for name in ["coarse-staggered", "standard-general"] {
        let e = gallery_entry(name)?;
        let out = replicate(&e, n, reps, 2_000, |data, model| {
            methods
                .iter()
                .map(|m| {
                    let t = Instant::now();
                    let g = fit(data, model, &e.nuisance, &FitOptions::method(*m))?;
                    Ok((g.psi_hat, t.elapsed().as_secs_f64()))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (mi, method) in methods.iter().enumerate() {
            let samples: Vec<Vec<f64>> = out.iter().map(|r| r[mi].0.clone()).collect();
            slowest = out.iter().map(|r| r[mi].1).fold(slowest, f64::max);
            let mut worst: f64 = 0.0;
            for t in 0..e.psi.len() {
                let s = mc_stat(&column(&samples, t), e.psi[t], 0.0);
                worst = worst.max(s.z().abs());
                if s.z().abs() >= 3.0 {
                    ok = false;
                    details.push(format!("{name} {method:?} coefficient {t}: {s}  <-- exceeds 3 MC SE"));
                }
            }
            details.push(format!("{name} {method:?}: {reps} reps at n = {n}, largest |z| = {worst:.2}"));
        }
    }
    let e = gallery_entry("null")?;
    let data = simulate_panel(&e.dgp, n, 2_999)?;
    let model = e.model.build(&data, None)?;
    for method in methods {
        let g = fit(&data, &model, &e.nuisance, &FitOptions::method(method))?;
        let worst = g
            .psi_hat
            .iter()
            .zip(&g.se)
            .map(|(p, s)| (p / s).abs())
            .fold(0.0, f64::max);
        ok &= worst < 3.0;
        details.push(format!("null {method:?}: largest |psi/se| = {worst:.2}"));
    }
    details.push(format!("slowest single fit {slowest:.2}s"));
    if scale.timed() && slowest >= 60.0 {
        ok = false;
        details.push("a fit exceeded 60s".into());
    }
    Ok(verdict(ok))
}

// ---------------------------------------------------------------------------
// 3. double robustness

fn double_robustness(scale: Scale, details: &mut Vec<String>) -> Result<Status> {
    let start = Instant::now();
    let n = scale.n(10_000);
    let reps = scale.reps(200);
    let modes = [
        Misspecification::TreatmentWrong,
        Misspecification::TrendWrong,
        Misspecification::BothWrong,
    ];
    let mut ok = true;
    for name in ["coarse-staggered", "standard-general"] {
        let e = gallery_entry(name)?;
        let specs: Vec<NuisanceSpec> = modes.iter().map(|m| misspecify(&e.nuisance, *m)).collect();
        let out = replicate(&e, n, reps, 3_000, |data, model| {
            specs
                .iter()
                .map(|s| Ok(fit(data, model, s, &FitOptions::default())?.psi_hat))
                .collect::<Result<Vec<_>>>()
        })?;
        for (mi, mode) in modes.iter().enumerate() {
            let samples: Vec<Vec<f64>> = out.iter().map(|r| r[mi].clone()).collect();
            let zs: Vec<f64> = (0..e.psi.len())
                .map(|t| mc_stat(&column(&samples, t), e.psi[t], 0.0).z().abs())
                .collect();
            let worst = zs.iter().copied().fold(0.0, f64::max);
            let pass = match mode {
                Misspecification::BothWrong => worst > 5.0,
                _ => worst < 3.0,
            };
            ok &= pass;
            details.push(format!(
                "{name} {mode:?}: largest |bias|/mcse = {worst:.2} ({}){}",
                if *mode == Misspecification::BothWrong { "needs > 5" } else { "needs < 3 for every coefficient" },
                if pass { "" } else { "  <-- fails" }
            ));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    details.push(format!("{reps} reps at n = {n}"));
    if scale.timed() && secs >= 1800.0 {
        ok = false;
        details.push(format!("runtime {secs:.0}s exceeds 30 min"));
    }
    Ok(verdict(ok))
}

// ---------------------------------------------------------------------------
// 4. solver equivalence

fn solver_equivalence(_scale: Scale, details: &mut Vec<String>) -> Result<Status> {
    let names = ["coarse-staggered", "null", "homogeneous", "standard-general", "violation", "cde"];
    let mut rng = ChaCha8Rng::seed_from_u64(4_000);
    let instances: Vec<(usize, usize, u64)> = (0..50)
        .map(|_| (rng.random_range(0..names.len()), rng.random_range(500..3000), rng.random::<u64>()))
        .collect();
    let diffs = instances
        .par_iter()
        .map(|&(ni, n, seed)| {
            let e = gallery_entry(names[ni])?;
            let data = simulate_panel(&e.dgp, n, seed)?;
            let model = e.model.build(&data, None)?;
            let a = fit(&data, &model, &e.nuisance, &FitOptions::method(Method::ClosedForm))?;
            let b = fit(&data, &model, &e.nuisance, &FitOptions::method(Method::Iterative))?;
            Ok(a.psi_hat
                .iter()
                .zip(&b.psi_hat)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    let worst = diffs.iter().copied().fold(0.0, f64::max);
    details.push(format!("50 instances, largest max-norm difference {worst:.3e} (limit 1e-8)"));
    Ok(verdict(worst <= 1e-8))
}

// ---------------------------------------------------------------------------
// 5. coverage

fn coverage(scale: Scale, details: &mut Vec<String>) -> Result<Status> {
    let start = Instant::now();
    let n = scale.n(4_000);
    let reps = scale.reps(500);
    let b = 200;
    let e = gallery_entry("homogeneous")?;
    let out = replicate(&e, n, reps, 5_000, |data, model| {
        let opts = FitOptions::default();
        let design = Design::build(data, model, &e.nuisance, &opts)?;
        let g = design.fit()?;
        let boot = bootstrap_design(&design, &g.psi_hat, Method::ClosedForm, e.nuisance.seed, b, 77)?;
        Ok((g.ci.clone(), boot.percentile_ci, g.psi_hat.clone(), g.se.clone()))
    })?;
    type Row = (Vec<[f64; 2]>, Vec<[f64; 2]>, Vec<f64>, Vec<f64>);
    let mut ok = true;
    for t in 0..e.psi.len() {
        let cover = |f: &dyn Fn(&Row) -> [f64; 2]| {
            100.0 * out.iter().filter(|r| (f(r)[0]..=f(r)[1]).contains(&e.psi[t])).count() as f64 / reps as f64
        };
        let wald = cover(&|r| r.0[t]);
        let boot = cover(&|r| r.1[t]);
        let est: Vec<f64> = out.iter().map(|r| r.2[t]).collect();
        let sd = mc_stat(&est, e.psi[t], 0.0).mcse * (reps as f64).sqrt();
        let mean_se = out.iter().map(|r| r.3[t]).sum::<f64>() / reps as f64;
        details.push(format!(
            "coefficient {t}: Monte Carlo sd of the estimate {sd:.5}, mean influence-function se {mean_se:.5}"
        ));
        for (label, c) in [("Wald (influence function)", wald), ("bootstrap percentile", boot)] {
            let pass = (93.0..=97.0).contains(&c);
            ok &= pass;
            details.push(format!(
                "{label} coverage of coefficient {t}: {c:.1}% over {reps} reps (n = {n}, B = {b}){}",
                if pass { "" } else { "  <-- outside 95 ± 2" }
            ));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if scale.timed() && secs >= 2700.0 {
        ok = false;
        details.push(format!("runtime {secs:.0}s exceeds 45 min"));
    }
    Ok(verdict(ok))
}

// ---------------------------------------------------------------------------
// 6. multiplicative

fn multiplicative(scale: Scale, details: &mut Vec<String>) -> Result<Status> {
    let n = scale.n(10_000);
    let reps = scale.reps(100);
    let e = gallery_entry("multiplicative")?;
    let samples = replicate(&e, n, reps, 6_000, |data, model| {
        Ok(fit(data, model, &e.nuisance, &FitOptions::method(Method::Iterative))?.psi_hat)
    })?;
    let mut ok = true;
    for t in 0..e.psi.len() {
        let s = mc_stat(&column(&samples, t), e.psi[t], 0.0);
        ok &= s.z().abs() < 3.0;
        details.push(format!("coefficient {t} (truth {}): {s}", e.psi[t]));
    }
    details.push(format!("{reps} reps at n = {n}"));
    Ok(verdict(ok))
}

// ---------------------------------------------------------------------------
// 7. sensitivity

fn sensitivity(scale: Scale, details: &mut Vec<String>) -> Result<Status> {
    let n = scale.n(10_000);
    let reps = scale.reps(100);
    let e = gallery_entry("violation")?;
    let c0 = e
        .dgp
        .violation
        .ok_or_else(|| Error::Config("violation entry has no planted violation".into()))?;
    let opts = FitOptions::default();
    let out = replicate(&e, n, reps, 7_000, |data, model| {
        let adjusted = sensitivity_fit(data, model, Arc::new(ConstantBias { c0 }), &e.nuisance, &opts)?;
        let plain = fit(data, model, &e.nuisance, &opts)?;
        Ok((adjusted.psi_hat, plain.psi_hat))
    })?;
    let adjusted: Vec<Vec<f64>> = out.iter().map(|r| r.0.clone()).collect();
    let plain: Vec<Vec<f64>> = out.iter().map(|r| r.1.clone()).collect();
    let mut ok = true;
    let mut worst_adj: f64 = 0.0;
    let mut worst_plain: f64 = 0.0;
    for t in 0..e.psi.len() {
        let a = mc_stat(&column(&adjusted, t), e.psi[t], 0.0);
        let p = mc_stat(&column(&plain, t), e.psi[t], 0.0);
        worst_adj = worst_adj.max(a.z().abs());
        worst_plain = worst_plain.max(p.z().abs());
        details.push(format!("coefficient {t}: adjusted {a}; unadjusted {p}"));
    }
    ok &= worst_adj < 3.0;
    ok &= worst_plain > 5.0;
    details.push(format!(
        "c0 = {c0}, {reps} reps at n = {n}: adjusted largest |z| {worst_adj:.2} (needs < 3), \
         unadjusted largest |z| {worst_plain:.2} (needs > 5)"
    ));
    let data = simulate_panel(&e.dgp, n, 7_999)?;
    let model = e.model.build(&data, None)?;
    let zero = sensitivity_fit(&data, &model, Arc::new(ConstantBias { c0: 0.0 }), &e.nuisance, &opts)?;
    let plain = fit(&data, &model, &e.nuisance, &opts)?;
    let bitwise = zero
        .psi_hat
        .iter()
        .chain(&zero.se)
        .zip(plain.psi_hat.iter().chain(&plain.se))
        .all(|(a, b)| a.to_bits() == b.to_bits());
    ok &= bitwise;
    details.push(format!("zero bias reproduces the unadjusted fit bitwise: {bitwise}"));
    Ok(verdict(ok))
}

// ---------------------------------------------------------------------------
// 8. optimal regime

fn optimal_regime(scale: Scale, details: &mut Vec<String>) -> Result<Status> {
    let n = scale.n(10_000);
    let reps = scale.reps(100);
    let e = gallery_entry("regime")?;
    let oracle = regime_oracle(&e.dgp, scale.n(400_000), 8_999)?;
    let cells = &oracle.cells;
    let out = replicate(&e, n, reps, 8_000, |data, model| {
        let f = fit_optimal_regime(data, model, &e.nuisance, &FitOptions::default())?;
        let psi = &f.estimate.psi_hat;
        let mut matched = 0usize;
        for c in cells {
            let cov: Vec<Vec<f64>> = c.l.iter().map(|v| vec![f64::from(*v)]).collect();
            let tr: Vec<Vec<f64>> = c.a.iter().map(|v| vec![f64::from(*v)]).collect();
            let y = vec![0.0; c.time];
            let g = optimal_action_for_history(model, psi, data, c.time, &cov, &tr, &y)?;
            matched += usize::from(g[0] == f64::from(c.best_action));
        }
        let v = regime_value(data, model, &f.estimate)?;
        Ok((matched, v.estimate))
    })?;
    let total = reps * cells.len();
    let matched: usize = out.iter().map(|r| r.0).sum();
    let rate = 100.0 * matched as f64 / total as f64;
    let values: Vec<f64> = out.iter().map(|r| r.1).collect();
    let s = mc_stat(&values, oracle.optimal_value.mean, oracle.optimal_value.se);
    let min_margin = cells.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min);
    details.push(format!(
        "rule agreement {rate:.2}% of {} cells x {reps} reps (needs >= 99%); smallest oracle margin {min_margin:.3}",
        cells.len()
    ));
    details.push(format!(
        "value: {s} against oracle {:.4} (observed-policy value {:.4})",
        oracle.optimal_value.mean, oracle.observed_value.mean
    ));
    Ok(verdict(rate >= 99.0 && s.z().abs() < 3.0))
}

// ---------------------------------------------------------------------------
// 9. CDE

fn controlled_direct_effect(scale: Scale, details: &mut Vec<String>) -> Result<Status> {
    let n = scale.n(10_000);
    let reps = scale.reps(100);
    let e = gallery_entry("cde")?;
    let horizons = [1usize, 2];
    let truths = horizons
        .iter()
        .map(|k| cde_oracle(&e.dgp, scale.n(1_000_000), 9_999, 0, *k))
        .collect::<Result<Vec<MeanSe>>>()?;
    let opts = FitOptions::default();
    let samples = replicate(&e, n, reps, 9_000, |data, model| {
        let g = fit(data, model, &e.nuisance, &opts)?;
        let ctx = Context {
            data,
            model,
            fit: &g,
            spec: &e.nuisance,
            opts: &opts,
        };
        horizons
            .iter()
            .map(|k| {
                let q = Query::Cde {
                    m: 0,
                    k: *k,
                    a_component: "a".into(),
                    r_component: "r".into(),
                    r_covariates: vec![],
                    r_nuisance: None,
                };
                Ok(evaluate(&ctx, &q, false)?.estimate)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut ok = true;
    for (t, k) in horizons.iter().enumerate() {
        let s = mc_stat(&column(&samples, t), truths[t].mean, truths[t].se);
        ok &= s.z().abs() < 3.0;
        details.push(format!("CDE (m=0, k={k}) truth {:.4}: {s}", truths[t].mean));
    }
    details.push(format!("{reps} reps at n = {n}"));
    Ok(verdict(ok))
}

// ---------------------------------------------------------------------------
// 10. derived quantities

/// Oracle for `E[Y_k(Ā_{m-1}, 0) | L_m = 1]`: natural treatment before `m`,
/// none from `m` on.
fn stopped_mean(e: &GalleryEntry, mc: usize, seed: u64, m: usize, k: usize) -> MeanSe {
    let cfg = &e.dgp;
    let policy = move |t: usize, _: &[f64], _: &[Vec<f64>], nat: &[f64]| {
        if t < m {
            nat.to_vec()
        } else {
            vec![0.0; nat.len()]
        }
    };
    expectation(cfg, mc, seed, |lat, nat| (lat.l[m] == 1.0).then(|| cfg.under(lat, nat, &policy).y[k]))
}

fn derived_means(scale: Scale, details: &mut Vec<String>) -> Result<Status> {
    let n = scale.n(10_000);
    let reps = scale.reps(40);
    let mc = scale.n(1_000_000);
    let mut ok = true;
    let mut checks = 0usize;
    for e in gallery() {
        let kk = e.dgp.horizon;
        let truth = oracle_truth(&e.dgp, mc, 10_999)?;
        let coarse = e.model.flavor == Flavor::Coarse;
        let mut queries: Vec<(Query, MeanSe)> = (0..=kk)
            .map(|k| (Query::MeanNeverTreated { k }, truth.never_treated[k]))
            .collect();
        for m in 0..kk {
            for k in m..=kk {
                if coarse {
                    if let Some(t) = truth.cohort_never.get(&format!("{m},{k}")) {
                        if t.count as f64 >= 0.02 * mc as f64 {
                            queries.push((
                                Query::ConditionalMean {
                                    m,
                                    k,
                                    predicates: vec![],
                                    cohort: Some(Cohort::Initiated),
                                },
                                *t,
                            ));
                        }
                    }
                } else if m > 0 {
                    let pred = Predicate {
                        column: "l".into(),
                        comparator: Comparator::Eq,
                        threshold: 1.0,
                        time: m,
                    };
                    queries.push((
                        Query::ConditionalMean {
                            m,
                            k,
                            predicates: vec![pred],
                            cohort: Some(Cohort::All),
                        },
                        stopped_mean(&e, mc, 10_998, m, k),
                    ));
                }
            }
        }
        let method = if e.model.flavor == Flavor::Multiplicative {
            Method::Iterative
        } else {
            Method::ClosedForm
        };
        let opts = FitOptions::method(method);
        let samples = replicate(&e, n, reps, 10_000, |data, model| {
            // a planted violation is known, so the correctly specified fit is the adjusted one
            let g = match e.dgp.violation {
                Some(c0) => sensitivity_fit(data, model, Arc::new(ConstantBias { c0 }), &e.nuisance, &opts)?,
                None => fit(data, model, &e.nuisance, &opts)?,
            };
            let ctx = Context {
                data,
                model,
                fit: &g,
                spec: &e.nuisance,
                opts: &opts,
            };
            queries
                .iter()
                .map(|(q, _)| Ok(evaluate(&ctx, q, false)?.estimate))
                .collect::<Result<Vec<_>>>()
        })?;
        let mut worst: f64 = 0.0;
        for (t, (q, tr)) in queries.iter().enumerate() {
            let s = mc_stat(&column(&samples, t), tr.mean, tr.se);
            worst = worst.max(s.z().abs());
            checks += 1;
            if s.z().abs() >= 3.0 {
                ok = false;
                details.push(format!("{} {}: {s}  <-- exceeds 3 MC SE", e.dgp.name, q.label()));
            }
        }
        details.push(format!(
            "{}: {} quantities, largest |z| = {worst:.2}",
            e.dgp.name,
            queries.len()
        ));
    }
    details.push(format!("{checks} comparisons, {reps} reps at n = {n}, oracle size {mc}"));
    Ok(verdict(ok))
}

// ---------------------------------------------------------------------------
// 11. real data

/// Environment variable naming the county panel: columns `subject_id`,
/// `time`, `y` (log house price index), `a_dereg` (deregulation indicator)
/// and `z_mortgage` (log mortgage volume in the previous year).
pub const REAL_DATA_ENV: &str = "SNMM_DEREGULATION_CSV";

fn real_data(details: &mut Vec<String>) -> Result<Status> {
    let path = std::env::var_os(REAL_DATA_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/deregulation.csv"));
    if !path.exists() {
        details.push(format!(
            "skipped: no panel at {} (set {REAL_DATA_ENV} to run)",
            path.display()
        ));
        return Ok(Status::Skip);
    }
    let data = load_csv(&path, None)?;
    let a = data
        .treatment_names()
        .first()
        .cloned()
        .ok_or_else(|| Error::Data("no treatment column".into()))?;
    let z = data
        .covariate_names()
        .first()
        .cloned()
        .ok_or_else(|| Error::Data("no covariate column".into()))?;
    let comp = data.treatment_index(&a).unwrap_or(0);
    let j = data.covariate_index(&z).unwrap_or(0);
    let basis = PerPairBasis::new(data.horizon(), comp, vec![(j, z.clone())], 0);
    let model = BlipModel::linear(Flavor::Coarse, Arc::new(basis));
    let cov = |power| HistoryTerm::Covariate {
        name: z.clone(),
        lag: 0,
        power,
    };
    let spec = NuisanceSpec::new(
        TreatmentFamily::Linear,
        vec![HistoryTerm::Intercept, cov(1), cov(2)],
        vec![HistoryTerm::Intercept, cov(1)],
    );
    let opts = FitOptions::default();
    let design = Design::build(&data, &model, &spec, &opts)?;
    let g = design.fit()?;
    let bi = g.psi_hat.len() - 1;
    let boot = bootstrap_design(&design, &g.psi_hat, Method::ClosedForm, 0, 500, 11)?;
    let ci = boot.percentile_ci[bi];
    let beta = g.psi_hat[bi];
    let overlaps = ci[0] <= 0.061 && ci[1] >= 0.026;
    let close = (beta - 0.044).abs() <= 0.005;
    details.push(format!(
        "beta = {beta:.4}, bootstrap CI [{:.4}, {:.4}] (reference 0.044, [0.026, 0.061])",
        ci[0], ci[1]
    ));
    Ok(verdict(overlaps && close))
}
