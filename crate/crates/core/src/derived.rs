//! Plug-in counterfactual quantities computed from a fitted blip model.
//!
//! Every quantity is a (ratio of) sample average(s) of per-subject terms
//! `f_i(ψ̂)`, so a delta-method standard error follows from the subject-level
//! influence values of `ψ̂`. Those intervals are a fast approximation; the
//! default intervals come from [`pipeline_bootstrap`], which refits the model
//! inside every replicate.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{covariate_index, treatment_index};
use crate::blip::{blip_down, blip_down_standard, BlipModel, Flavor, PerPairBasis};
use crate::error::{Error, Result};
use crate::gestimation::{self, bootstrap, FitOptions, GEstimate};
use crate::nuisance::NuisanceSpec;
use crate::panel::{InitiationTime, PanelDataset};

const Z95: f64 = 1.959_963_984_540_054;

/// Comparison used by a subgroup predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Lt,
    Le,
    Eq,
    Ne,
    Ge,
    Gt,
}

impl Comparator {
    fn holds(self, v: f64, t: f64) -> bool {
        match self {
            Comparator::Lt => v < t,
            Comparator::Le => v <= t,
            Comparator::Eq => v == t,
            Comparator::Ne => v != t,
            Comparator::Ge => v >= t,
            Comparator::Gt => v > t,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Eq => "==",
            Comparator::Ne => "!=",
            Comparator::Ge => ">=",
            Comparator::Gt => ">",
        }
    }
}

/// Declarative subgroup condition `column[time] <comparator> threshold` on the
/// history `(Ā_{m-1}, L̄_m)`; `time` is a time index `0..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predicate {
    pub column: String,
    pub comparator: Comparator,
    pub threshold: f64,
    pub time: usize,
}

impl std::fmt::Display for Predicate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}[{}] {} {}", self.column, self.time, self.comparator.symbol(), self.threshold)
    }
}

#[derive(Debug, Clone, Copy)]
enum Column {
    Outcome,
    Treatment(usize),
    Covariate(usize),
}

#[derive(Debug, Clone)]
struct ResolvedPredicate {
    column: Column,
    comparator: Comparator,
    threshold: f64,
    time: usize,
}

impl ResolvedPredicate {
    fn holds(&self, data: &PanelDataset, i: usize) -> bool {
        let v = match self.column {
            Column::Outcome => data.outcome(i, self.time),
            Column::Treatment(c) => data.treatment(i, self.time)[c],
            Column::Covariate(j) => data.covariates(i, self.time)[j],
        };
        self.comparator.holds(v, self.threshold)
    }
}

impl Predicate {
    fn resolve(&self, data: &PanelDataset, m: usize) -> Result<ResolvedPredicate> {
        let column = if self.column == data.outcome_name() || self.column == "y" {
            Column::Outcome
        } else if let Ok(c) = treatment_index(data, &self.column) {
            Column::Treatment(c)
        } else if let Ok(j) = covariate_index(data, &self.column) {
            Column::Covariate(j)
        } else {
            return Err(Error::Config(format!("predicate `{self}`: unknown column")));
        };
        let in_history = match column {
            Column::Covariate(_) => self.time <= m,
            _ => self.time < m,
        };
        if !in_history {
            return Err(Error::Config(format!(
                "predicate `{self}` is not part of the history at anchor {m}"
            )));
        }
        Ok(ResolvedPredicate {
            column,
            comparator: self.comparator,
            threshold: self.threshold,
            time: self.time,
        })
    }
}

/// Which subjects a conditional quantity averages over, besides the predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    /// `T = m`.
    Initiated,
    /// `T >= m`.
    AtRisk,
    /// Everyone (standard and multiplicative models).
    All,
}

/// A counterfactual quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Query {
    /// `P_n[H_0k]`: `E[Y_k(∞)]` (coarse) or `E[Y_k(0̄)]`.
    MeanNeverTreated { k: usize },
    /// `P^{cohort, B}[H_mk]`.
    ConditionalMean {
        m: usize,
        k: usize,
        #[serde(default)]
        predicates: Vec<Predicate>,
        #[serde(default)]
        cohort: Option<Cohort>,
    },
    /// `P_n[Y_k - H_0k]`.
    ObservedVsNever { k: usize },
    /// Average of `γ_{m,m+lag}(L̄_m, A_m)` over initiations with `m + lag <= K`.
    LagAverage { lag: usize },
    /// Average blip `γ_mk(L̄_m, action)` over a subgroup, optionally with
    /// covariates at `m` set to given values.
    Blip {
        m: usize,
        k: usize,
        action: Vec<f64>,
        #[serde(default)]
        predicates: Vec<Predicate>,
        #[serde(default)]
        cohort: Option<Cohort>,
        #[serde(default)]
        at: BTreeMap<String, f64>,
    },
    /// Coarse controlled direct effect of starting `a_component` at `m` with
    /// `r_component` held at baseline, among `T_A = m, T_R > m`.
    Cde {
        m: usize,
        k: usize,
        a_component: String,
        r_component: String,
        #[serde(default)]
        r_covariates: Vec<String>,
        #[serde(default)]
        r_nuisance: Option<NuisanceSpec>,
    },
}

impl Query {
    pub fn label(&self) -> String {
        let preds = |p: &[Predicate]| {
            if p.is_empty() {
                String::new()
            } else {
                format!(" | {}", p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "))
            }
        };
        match self {
            Query::MeanNeverTreated { k } => format!("mean_never_treated(k={k})"),
            Query::ConditionalMean { m, k, predicates, .. } => {
                format!("conditional_mean(m={m}, k={k}{})", preds(predicates))
            }
            Query::ObservedVsNever { k } => format!("observed_vs_never(k={k})"),
            Query::LagAverage { lag } => format!("lag_average(lag={lag})"),
            Query::Blip { m, k, action, predicates, .. } => {
                format!("blip(m={m}, k={k}, a={action:?}{})", preds(predicates))
            }
            Query::Cde { m, k, .. } => format!("cde(m={m}, k={k})"),
        }
    }
}

/// A derived estimate with its interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedValue {
    pub label: String,
    pub query: Query,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci: Option<[f64; 2]>,
    /// How the interval was computed.
    pub ci_method: Option<String>,
    /// Subjects contributing to the average.
    pub n: usize,
    pub warnings: Vec<String>,
}

/// A fitted model together with what is needed to refit or evaluate it.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub data: &'a PanelDataset,
    pub model: &'a BlipModel,
    pub fit: &'a GEstimate,
    pub spec: &'a NuisanceSpec,
    pub opts: &'a FitOptions,
}

/// `H_mk` for derived quantities; regime models use the plain transform.
fn h_value(model: &BlipModel, psi: &[f64], data: &PanelDataset, i: usize, m: usize, k: usize) -> Result<f64> {
    if model.flavor == Flavor::Regime {
        Ok(blip_down_standard(model, psi, data, i, m, k)?.value)
    } else {
        Ok(blip_down(model, psi, data, i, m, k)?.value)
    }
}

/// Ratio estimator `Σ f_i(ψ) / Σ w_i` with a delta-method standard error.
pub(crate) struct RatioTerm<'f> {
    pub(crate) weights: Vec<f64>,
    pub(crate) f: Box<dyn Fn(&[f64], usize) -> Result<f64> + 'f>,
}

fn total(term: &RatioTerm<'_>, psi: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for (i, w) in term.weights.iter().enumerate() {
        if *w != 0.0 {
            s += (term.f)(psi, i)?;
        }
    }
    Ok(s)
}

/// Estimate and delta-method SE of `Σ_i f_i(ψ̂) / Σ_i w_i`, where `ψ̂ - ψ ≈
/// (1/scale) Σ_i IF_i` over the subjects carrying influence values.
pub(crate) fn ratio_estimate(
    term: &RatioTerm<'_>,
    fit: &GEstimate,
    influence_scale: f64,
    with_se: bool,
) -> Result<(f64, Option<f64>, Vec<f64>)> {
    let psi = &fit.psi_hat;
    let n = term.weights.len();
    let wsum: f64 = term.weights.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::Empty("no subjects contribute".into()));
    }
    let mut fi = vec![0.0; n];
    for i in 0..n {
        if term.weights[i] != 0.0 {
            fi[i] = (term.f)(psi, i)?;
        }
    }
    let est = fi.iter().sum::<f64>() / wsum;
    if !with_se || fit.influence.len() != n {
        return Ok((est, None, vec![]));
    }
    let d = psi.len();
    let mut grad = vec![0.0; d];
    let mut p = psi.clone();
    for t in 0..d {
        let h = 1e-6 * psi[t].abs().max(1.0);
        p[t] = psi[t] + h;
        let up = total(term, &p)?;
        p[t] = psi[t] - h;
        let dn = total(term, &p)?;
        p[t] = psi[t];
        grad[t] = (up - dn) / (2.0 * h * wsum);
    }
    let nn = n as f64;
    let infl: Vec<f64> = (0..n)
        .map(|i| {
            let own = nn / wsum * (fi[i] - est * term.weights[i]);
            let through: f64 = grad.iter().zip(&fit.influence[i]).map(|(g, v)| g * v).sum();
            own + through * nn / influence_scale
        })
        .collect();
    let var = infl.iter().map(|v| v * v).sum::<f64>() / (nn * nn);
    Ok((est, Some(var.sqrt()), infl))
}

fn initiation(ctx: &Context<'_>, i: usize) -> InitiationTime {
    ctx.model.initiation_time(ctx.data, i)
}

fn subgroup(ctx: &Context<'_>, m: usize, predicates: &[Predicate], cohort: Option<Cohort>) -> Result<Vec<f64>> {
    let data = ctx.data;
    if m > data.horizon() {
        return Err(Error::Config(format!("anchor {m} beyond horizon {}", data.horizon())));
    }
    let preds = predicates
        .iter()
        .map(|p| p.resolve(data, m))
        .collect::<Result<Vec<_>>>()?;
    let coarse = ctx.model.flavor == Flavor::Coarse;
    let cohort = cohort.unwrap_or(if coarse { Cohort::Initiated } else { Cohort::All });
    if coarse && cohort == Cohort::All {
        return Err(Error::Config(
            "coarse conditional quantities need cohort `initiated` or `at_risk`".into(),
        ));
    }
    let w: Vec<f64> = (0..data.n_subjects())
        .map(|i| {
            let t = initiation(ctx, i);
            let in_cohort = match cohort {
                Cohort::Initiated => t.is(m),
                Cohort::AtRisk => t.at_risk(m),
                Cohort::All => true,
            };
            f64::from(u8::from(in_cohort && preds.iter().all(|p| p.holds(data, i))))
        })
        .collect();
    if w.iter().all(|v| *v == 0.0) {
        let desc = predicates.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(", ");
        return Err(Error::Empty(format!(
            "no subjects match cohort {cohort:?} at m={m}{}",
            if desc.is_empty() { String::new() } else { format!(" with {desc}") }
        )));
    }
    Ok(w)
}

fn value(query: &Query, est: f64, se: Option<f64>, n: usize, warnings: Vec<String>) -> DerivedValue {
    DerivedValue {
        label: query.label(),
        query: query.clone(),
        estimate: est,
        se,
        ci: se.map(|s| [est - Z95 * s, est + Z95 * s]),
        ci_method: se.map(|_| "delta method (approximate)".to_string()),
        n,
        warnings,
    }
}

fn check_k(data: &PanelDataset, k: usize) -> Result<()> {
    if k > data.horizon() {
        return Err(Error::Config(format!("horizon k={k} beyond K={}", data.horizon())));
    }
    Ok(())
}

/// Evaluates one query; `with_se` adds delta-method intervals.
pub fn evaluate(ctx: &Context<'_>, query: &Query, with_se: bool) -> Result<DerivedValue> {
    let data = ctx.data;
    let model = ctx.model;
    let n = data.n_subjects();
    let scale = n as f64;
    let count = |w: &[f64]| w.iter().filter(|v| **v != 0.0).count();
    match query {
        Query::MeanNeverTreated { k } => {
            check_k(data, *k)?;
            let term = RatioTerm {
                weights: vec![1.0; n],
                f: Box::new(|psi, i| h_value(model, psi, data, i, 0, *k)),
            };
            let (est, se, _) = ratio_estimate(&term, ctx.fit, scale, with_se)?;
            Ok(value(query, est, se, n, vec![]))
        }
        Query::ConditionalMean {
            m,
            k,
            predicates,
            cohort,
        } => {
            check_k(data, *k)?;
            if m > k {
                return Err(Error::Config(format!("conditional mean needs m <= k, got m={m}, k={k}")));
            }
            let weights = subgroup(ctx, *m, predicates, *cohort)?;
            let nsub = count(&weights);
            let term = RatioTerm {
                weights,
                f: Box::new(|psi, i| h_value(model, psi, data, i, *m, *k)),
            };
            let (est, se, _) = ratio_estimate(&term, ctx.fit, scale, with_se)?;
            Ok(value(query, est, se, nsub, vec![]))
        }
        Query::ObservedVsNever { k } => {
            check_k(data, *k)?;
            let term = RatioTerm {
                weights: vec![1.0; n],
                f: Box::new(|psi, i| Ok(data.outcome(i, *k) - h_value(model, psi, data, i, 0, *k)?)),
            };
            let (est, se, _) = ratio_estimate(&term, ctx.fit, scale, with_se)?;
            Ok(value(query, est, se, n, vec![]))
        }
        Query::LagAverage { lag } => {
            if model.flavor != Flavor::Coarse {
                return Err(Error::Config("lag averages are defined for coarse models".into()));
            }
            if *lag == 0 {
                return Err(Error::Config("lag must be at least 1".into()));
            }
            let kk = data.horizon();
            let weights: Vec<f64> = (0..n)
                .map(|i| match initiation(ctx, i).time() {
                    Some(m) if m + lag <= kk => 1.0,
                    _ => 0.0,
                })
                .collect();
            if weights.iter().all(|w| *w == 0.0) {
                return Err(Error::Empty(format!("no initiations with {lag} periods of follow-up")));
            }
            let nsub = count(&weights);
            let term = RatioTerm {
                weights,
                f: Box::new(|psi, i| match initiation(ctx, i) {
                    InitiationTime::At { time, value } => {
                        model.eval(psi, &data.history(i, time).lbar(), &value, time, time + lag)
                    }
                    InitiationTime::Never => Ok(0.0),
                }),
            };
            let (est, se, _) = ratio_estimate(&term, ctx.fit, scale, with_se)?;
            Ok(value(query, est, se, nsub, vec![]))
        }
        Query::Blip {
            m,
            k,
            action,
            predicates,
            cohort,
            at,
        } => blip_query(ctx, query, *m, *k, action, predicates, *cohort, at, with_se),
        Query::Cde {
            m,
            k,
            a_component,
            r_component,
            r_covariates,
            r_nuisance,
        } => cde(
            ctx,
            query,
            *m,
            *k,
            a_component,
            r_component,
            r_covariates,
            r_nuisance.as_ref(),
            with_se,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn blip_query(
    ctx: &Context<'_>,
    query: &Query,
    m: usize,
    k: usize,
    action: &[f64],
    predicates: &[Predicate],
    cohort: Option<Cohort>,
    at: &BTreeMap<String, f64>,
    with_se: bool,
) -> Result<DerivedValue> {
    let data = ctx.data;
    check_k(data, k)?;
    if k <= m {
        return Err(Error::Config(format!("blip needs k > m, got m={m}, k={k}")));
    }
    if action.len() != data.n_treatments() {
        return Err(Error::Dimension(format!(
            "action has {} components, data has {}",
            action.len(),
            data.n_treatments()
        )));
    }
    let cohort = cohort.or(if ctx.model.flavor == Flavor::Coarse {
        Some(Cohort::AtRisk)
    } else {
        None
    });
    let weights = subgroup(ctx, m, predicates, cohort)?;
    let mut warnings = Vec::new();
    let mut modified = data.clone();
    for (name, v) in at {
        let j = covariate_index(data, name)?;
        let (lo, hi) = data.covariate_range(j, m);
        if *v < lo || *v > hi {
            warnings.push(format!(
                "{name} = {v} at m={m} lies outside the observed range [{lo}, {hi}]"
            ));
        }
        modified = modified.with_covariate_value(j, m, *v);
    }
    for (c, a) in action.iter().enumerate() {
        let (lo, hi) = (0..data.n_subjects())
            .map(|i| data.treatment(i, m)[c])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if *a < lo || *a > hi {
            warnings.push(format!(
                "action component {c} = {a} lies outside the observed range [{lo}, {hi}] at m={m}"
            ));
        }
    }
    let treated_in_group = (0..data.n_subjects()).any(|i| {
        weights[i] != 0.0
            && if ctx.model.flavor == Flavor::Coarse {
                initiation(ctx, i).is(m)
            } else {
                data.treatment(i, m).iter().any(|v| *v != 0.0)
            }
    });
    if !treated_in_group {
        warnings.push(format!("no subject in the subgroup was treated at m={m}; the blip is extrapolated"));
    }
    let model = ctx.model;
    let md = &modified;
    let nsub = weights.iter().filter(|w| **w != 0.0).count();
    let term = RatioTerm {
        weights,
        f: Box::new(move |psi, i| model.eval(psi, &md.history(i, m).lbar(), action, m, k)),
    };
    let (est, se, _) = ratio_estimate(&term, ctx.fit, data.n_subjects() as f64, with_se)?;
    Ok(value(query, est, se, nsub, warnings))
}

#[allow(clippy::too_many_arguments)]
fn cde(
    ctx: &Context<'_>,
    query: &Query,
    m: usize,
    k: usize,
    a_name: &str,
    r_name: &str,
    r_covariates: &[String],
    r_nuisance: Option<&NuisanceSpec>,
    with_se: bool,
) -> Result<DerivedValue> {
    let data = ctx.data;
    let model = ctx.model;
    check_k(data, k)?;
    if k <= m {
        return Err(Error::Config(format!("effect needs k > m, got m={m}, k={k}")));
    }
    if model.flavor != Flavor::Coarse {
        return Err(Error::Config("coarse controlled direct effects need a coarse joint model".into()));
    }
    let ca = treatment_index(data, a_name)?;
    let cr = treatment_index(data, r_name)?;
    if !model.initiation.contains(&ca) || !model.initiation.contains(&cr) {
        return Err(Error::Config(
            "the joint model's initiation must include both treatment components".into(),
        ));
    }
    let n = data.n_subjects();
    let ta: Vec<InitiationTime> = (0..n).map(|i| data.initiation_time_for(i, &[ca])).collect();
    let tr: Vec<InitiationTime> = (0..n).map(|i| data.initiation_time_for(i, &[cr])).collect();
    let cohort: Vec<usize> = (0..n).filter(|&i| ta[i].is(m)).collect();
    if cohort.is_empty() {
        return Err(Error::Empty(format!("no subjects start {a_name} at m={m}")));
    }
    let kk = data.horizon();
    let mut pairs = Vec::new();
    for j in m..kk {
        if cohort.iter().any(|&i| tr[i].is(j)) {
            pairs.extend((j + 1..=kk).map(|kq| (j, kq)));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty(format!(
            "{r_name} is never initiated at times {m}..{} among subjects starting {a_name} at m={m}; \
             its effects are not identified",
            kk.saturating_sub(1)
        )));
    }
    let sub = data.select_subjects(&cohort)?;
    let covs = r_covariates
        .iter()
        .map(|c| Ok((covariate_index(data, c)?, c.clone())))
        .collect::<Result<Vec<_>>>()?;
    let rbasis = PerPairBasis::with_pairs(pairs, cr, covs).named(&format!("{r_name}:"));
    let rmodel = BlipModel::linear(Flavor::Coarse, Arc::new(rbasis)).with_initiation(vec![cr]);
    let ropts = FitOptions {
        min_anchor: m,
        ..ctx.opts.clone()
    };
    let rfit = gestimation::fit(&sub, &rmodel, r_nuisance.unwrap_or(ctx.spec), &ropts)?;

    // target subgroup within the cohort: T_R > m
    let in_target: Vec<bool> = cohort.iter().map(|&i| tr[i].time().is_none_or(|t| t > m)).collect();
    let nt: f64 = in_target.iter().filter(|b| **b).count() as f64;
    if nt == 0.0 {
        return Err(Error::Empty(format!("no subjects start {a_name} at m={m} without {r_name}")));
    }
    let term1 = |psi: &[f64], s: usize| Ok(blip_down(&rmodel, psi, &sub, s, m, k)?.value);
    let term2 = |psi: &[f64], i: usize| h_value(model, psi, data, i, m, k);
    let mut diff = vec![0.0; cohort.len()];
    for (s, &i) in cohort.iter().enumerate() {
        if in_target[s] {
            diff[s] = term1(&rfit.psi_hat, s)? - term2(&ctx.fit.psi_hat, i)?;
        }
    }
    let est = diff.iter().sum::<f64>() / nt;
    let mut se = None;
    if with_se && ctx.fit.influence.len() == n && rfit.influence.len() == cohort.len() {
        let grad = |f: &dyn Fn(&[f64], usize) -> Result<f64>, psi: &[f64], idx: &dyn Fn(usize) -> usize| {
            let mut g = vec![0.0; psi.len()];
            let mut p = psi.to_vec();
            for t in 0..psi.len() {
                let h = 1e-6 * psi[t].abs().max(1.0);
                let mut up = 0.0;
                let mut dn = 0.0;
                for s in 0..cohort.len() {
                    if !in_target[s] {
                        continue;
                    }
                    p[t] = psi[t] + h;
                    up += f(&p, idx(s))?;
                    p[t] = psi[t] - h;
                    dn += f(&p, idx(s))?;
                    p[t] = psi[t];
                }
                g[t] = (up - dn) / (2.0 * h * nt);
            }
            Ok::<_, Error>(g)
        };
        let g1 = grad(&term1, &rfit.psi_hat, &|s| s)?;
        let g2 = grad(&term2, &ctx.fit.psi_hat, &|s| cohort[s])?;
        let nn = n as f64;
        let nc = cohort.len() as f64;
        let mut infl = vec![0.0; n];
        for (i, v) in infl.iter_mut().enumerate() {
            *v -= g2.iter().zip(&ctx.fit.influence[i]).map(|(g, x)| g * x).sum::<f64>();
        }
        for (s, &i) in cohort.iter().enumerate() {
            if in_target[s] {
                infl[i] += nn / nt * (diff[s] - est);
            }
            infl[i] += nn / nc * g1.iter().zip(&rfit.influence[s]).map(|(g, x)| g * x).sum::<f64>();
        }
        se = Some((infl.iter().map(|v| v * v).sum::<f64>() / (nn * nn)).sqrt());
    }
    let mut warnings = Vec::new();
    warnings.extend(rfit.diagnostics.flags.iter().map(|f| format!("{r_name} stage: {f}")));
    Ok(value(query, est, se, nt as usize, warnings))
}

/// Evaluates a batch of queries with delta-method intervals.
pub fn evaluate_all(ctx: &Context<'_>, queries: &[Query]) -> Result<Vec<DerivedValue>> {
    queries.iter().map(|q| evaluate(ctx, q, true)).collect()
}

/// Point estimates from the full-sample fit with percentile intervals from a
/// subject-level bootstrap that refits the model in every replicate.
pub fn pipeline_bootstrap(
    data: &PanelDataset,
    model: &BlipModel,
    spec: &NuisanceSpec,
    opts: &FitOptions,
    queries: &[Query],
    replicates: usize,
    seed: u64,
) -> Result<(GEstimate, Vec<DerivedValue>)> {
    let fit = gestimation::fit(data, model, spec, opts)?;
    let ctx = Context {
        data,
        model,
        fit: &fit,
        spec,
        opts,
    };
    let mut values = evaluate_all(&ctx, queries)?;
    let est: Vec<f64> = values.iter().map(|v| v.estimate).collect();
    let boot = bootstrap(data.n_subjects(), &est, replicates, seed, |idx, _| {
        let d = data.select_subjects(idx)?;
        let f = gestimation::fit(&d, model, spec, opts)?;
        let c = Context {
            data: &d,
            model,
            fit: &f,
            spec,
            opts,
        };
        queries.iter().map(|q| evaluate(&c, q, false).map(|v| v.estimate)).collect()
    })?;
    for (t, v) in values.iter_mut().enumerate() {
        v.se = Some(boot.se[t]);
        v.ci = Some(boot.percentile_ci[t]);
        v.ci_method = Some(format!(
            "bootstrap percentile ({} of {} replicates, seed {seed})",
            boot.replicates.len(),
            boot.requested
        ));
    }
    Ok((fit, values))
}

/// Writes plot-ready rows `x,estimate,lo,hi`.
pub fn write_plot_csv<W: Write>(w: W, x_name: &str, rows: &[(f64, &DerivedValue)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([x_name, "estimate", "lo", "hi"])?;
    for (x, v) in rows {
        let (lo, hi) = v.ci.map_or((f64::NAN, f64::NAN), |c| (c[0], c[1]));
        wr.write_record([x.to_string(), v.estimate.to_string(), lo.to_string(), hi.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gestimation::{Diagnostics, Method};

    fn estimate(psi: Vec<f64>, influence: Vec<Vec<f64>>) -> GEstimate {
        let d = psi.len();
        GEstimate {
            names: (0..d).map(|t| format!("p{t}")).collect(),
            method: Method::ClosedForm,
            jacobian: vec![vec![0.0; d]; d],
            covariance: vec![vec![0.0; d]; d],
            se: vec![0.0; d],
            ci: vec![[0.0, 0.0]; d],
            fold_estimates: vec![],
            n: influence.len() as f64,
            influence,
            psi_hat: psi,
            diagnostics: Diagnostics::default(),
        }
    }

    #[test]
    fn ratio_influence_combines_sampling_and_parameter_terms() {
        let x = [1.0, 4.0, -2.0, 5.0];
        let infl = [0.5, -1.0, 2.0, -1.5];
        let fit = estimate(vec![2.0], infl.iter().map(|v| vec![*v]).collect());
        // f_i = x_i + 3 psi, so d mean / d psi = 3.
        let term = RatioTerm {
            weights: vec![1.0; 4],
            f: Box::new(move |psi: &[f64], i: usize| Ok(x[i] + 3.0 * psi[0])),
        };
        let (est, se, if_vals) = ratio_estimate(&term, &fit, 4.0, true).unwrap();
        let mean_x = x.iter().sum::<f64>() / 4.0;
        assert!((est - (mean_x + 6.0)).abs() < 1e-12);
        for i in 0..4 {
            assert!((if_vals[i] - (x[i] - mean_x + 3.0 * infl[i])).abs() < 1e-6);
        }
        let var = if_vals.iter().map(|v| v * v).sum::<f64>() / 16.0;
        assert!((se.unwrap() - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ratio_over_a_subgroup_uses_its_size() {
        let fit = estimate(vec![0.0], vec![vec![0.0]; 3]);
        let term = RatioTerm {
            weights: vec![1.0, 0.0, 1.0],
            f: Box::new(|_: &[f64], i: usize| Ok(i as f64)),
        };
        let (est, se, _) = ratio_estimate(&term, &fit, 3.0, false).unwrap();
        assert_eq!(est, 1.0);
        assert!(se.is_none());
        let empty = RatioTerm {
            weights: vec![0.0; 3],
            f: Box::new(|_: &[f64], _: usize| Ok(0.0)),
        };
        assert!(matches!(ratio_estimate(&empty, &fit, 3.0, true), Err(Error::Empty(_))));
    }

    #[test]
    fn comparators_and_labels() {
        assert!(Comparator::Le.holds(1.0, 1.0) && !Comparator::Lt.holds(1.0, 1.0));
        assert!(Comparator::Ne.holds(0.0, 1.0) && Comparator::Gt.holds(2.0, 1.0));
        let p = Predicate {
            column: "l".into(),
            comparator: Comparator::Ge,
            threshold: 0.5,
            time: 2,
        };
        assert_eq!(p.to_string(), "l[2] >= 0.5");
        let q = Query::ConditionalMean {
            m: 2,
            k: 3,
            predicates: vec![p],
            cohort: None,
        };
        assert_eq!(q.label(), "conditional_mean(m=2, k=3 | l[2] >= 0.5)");
    }
}
