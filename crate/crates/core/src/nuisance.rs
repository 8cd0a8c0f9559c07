//! Nuisance models: the treatment model `E[A_m | L̄_m]` (full history or
//! at-risk set `T >= m`) and the trend model `v_m(k, L̄_m)`, with fold
//! assignment for cross-fitting.

use std::collections::HashMap;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{HistoryBasis, HistoryTerm};
use crate::blip::{blip_down, BlipModel, Flavor};
use crate::error::{Error, Result};
use crate::linalg::{weighted_ols, GramSolver, NormalEquations};
use crate::panel::PanelDataset;

/// Family of the treatment model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreatmentFamily {
    /// Cell means over distinct basis values.
    Saturated,
    /// Least squares per component.
    Linear,
    /// Logistic regression by iteratively reweighted least squares.
    Logistic,
    /// Logistic for binary components, least squares otherwise.
    #[default]
    Auto,
    /// A registered learner.
    Learner { name: String },
}

/// Family of the trend model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrendFamily {
    /// Separate least-squares fit `φ_mk'D_m` per `(m, k)`.
    #[default]
    Linear,
    Learner { name: String },
}

/// Which subjects inform the treatment and trend models at time `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// All subjects, conditioning on `(L̄_m, Ā_{m-1})`.
    FullHistory,
    /// Subjects with `T >= m` only.
    AtRisk,
}

impl Conditioning {
    pub fn for_flavor(f: Flavor) -> Self {
        if f.at_risk_conditioning() {
            Conditioning::AtRisk
        } else {
            Conditioning::FullHistory
        }
    }
}

fn intercept() -> Vec<HistoryTerm> {
    vec![HistoryTerm::Intercept]
}

fn two() -> usize {
    2
}

/// Serializable nuisance specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpec {
    #[serde(default)]
    pub treatment_family: TreatmentFamily,
    #[serde(default = "intercept")]
    pub treatment_basis: Vec<HistoryTerm>,
    #[serde(default)]
    pub trend_family: TrendFamily,
    /// `D_mk`: functions of the history only, never of `A_m`.
    #[serde(default = "intercept")]
    pub trend_basis: Vec<HistoryTerm>,
    #[serde(default = "two")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to at-risk for coarse models, full history otherwise.
    #[serde(default)]
    pub conditioning: Option<Conditioning>,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        NuisanceSpec {
            treatment_family: TreatmentFamily::Auto,
            treatment_basis: intercept(),
            trend_family: TrendFamily::Linear,
            trend_basis: intercept(),
            folds: 2,
            seed: 0,
            conditioning: None,
        }
    }
}

impl NuisanceSpec {
    pub fn new(
        treatment_family: TreatmentFamily,
        treatment_basis: Vec<HistoryTerm>,
        trend_basis: Vec<HistoryTerm>,
    ) -> Self {
        NuisanceSpec {
            treatment_family,
            treatment_basis,
            trend_basis,
            ..Default::default()
        }
    }

    pub fn with_folds(mut self, folds: usize, seed: u64) -> Self {
        self.folds = folds;
        self.seed = seed;
        self
    }

    pub fn conditioning_for(&self, flavor: Flavor) -> Conditioning {
        self.conditioning.unwrap_or(Conditioning::for_flavor(flavor))
    }
}

// ---------------------------------------------------------------------------
// Learner hook

/// Fitted predictor returned by a [`Learner`].
pub trait Predictor: Send + Sync + Debug {
    fn predict(&self, x: &[f64]) -> f64;
    /// Coefficients for audit export, when the predictor has any.
    fn coefficients(&self) -> Option<Vec<f64>> {
        None
    }
}

/// Trainer contract: design matrix (row-major, `q` columns), response and
/// weights in, predictor out.
pub trait Learner: Send + Sync + Debug {
    fn train(&self, x: &[f64], q: usize, y: &[f64], w: &[f64]) -> Result<Arc<dyn Predictor>>;
}

#[derive(Debug, Clone)]
struct LinearPredictor {
    beta: Vec<f64>,
    logistic: bool,
}

impl Predictor for LinearPredictor {
    fn predict(&self, x: &[f64]) -> f64 {
        let eta: f64 = self.beta.iter().zip(x).map(|(b, v)| b * v).sum();
        if self.logistic {
            expit(eta)
        } else {
            eta
        }
    }

    fn coefficients(&self) -> Option<Vec<f64>> {
        Some(self.beta.clone())
    }
}

/// Weighted least squares learner.
#[derive(Debug, Clone, Default)]
pub struct OlsLearner;

impl Learner for OlsLearner {
    fn train(&self, x: &[f64], q: usize, y: &[f64], w: &[f64]) -> Result<Arc<dyn Predictor>> {
        let beta = weighted_ols(x, q, y, w).ok_or_else(|| Error::Rank("least-squares design is singular".into()))?;
        Ok(Arc::new(LinearPredictor {
            beta: beta.iter().copied().collect(),
            logistic: false,
        }))
    }
}

/// Weighted logistic regression learner.
#[derive(Debug, Clone, Default)]
pub struct LogisticLearner;

impl Learner for LogisticLearner {
    fn train(&self, x: &[f64], q: usize, y: &[f64], w: &[f64]) -> Result<Arc<dyn Predictor>> {
        let beta = irls(x, q, y, w).map_err(|col| match col {
            Some(c) => Error::Rank(format!("logistic fit separated on column {c}")),
            None => Error::Rank("logistic design is singular".into()),
        })?;
        Ok(Arc::new(LinearPredictor { beta, logistic: true }))
    }
}

/// Learners available by name.
#[derive(Debug, Clone)]
pub struct LearnerRegistry {
    learners: HashMap<String, Arc<dyn Learner>>,
}

impl Default for LearnerRegistry {
    fn default() -> Self {
        let mut learners: HashMap<String, Arc<dyn Learner>> = HashMap::new();
        learners.insert("ols".into(), Arc::new(OlsLearner));
        learners.insert("logistic".into(), Arc::new(LogisticLearner));
        LearnerRegistry { learners }
    }
}

impl LearnerRegistry {
    pub fn register(&mut self, name: impl Into<String>, learner: Arc<dyn Learner>) {
        self.learners.insert(name.into(), learner);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Learner>> {
        self.learners
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no learner registered under `{name}`")))
    }
}

// ---------------------------------------------------------------------------
// Folds

/// Assignment of subjects to cross-fitting folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold: Vec<usize>,
    pub n_folds: usize,
    pub seed: u64,
}

impl FoldAssignment {
    /// Every subject in one fold; used for full-sample fits.
    pub fn single(n: usize) -> Self {
        FoldAssignment {
            fold: vec![0; n],
            n_folds: 1,
            seed: 0,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_folds];
        for &f in &self.fold {
            s[f] += 1;
        }
        s
    }

    pub fn members(&self, f: usize) -> Vec<usize> {
        (0..self.fold.len()).filter(|&i| self.fold[i] == f).collect()
    }
}

/// Random balanced partition of `n` subjects, deterministic in `seed`.
pub fn split_folds(n_subjects: usize, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    if n_folds > n_subjects {
        return Err(Error::Config(format!(
            "{n_folds} folds requested for {n_subjects} subjects"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n_subjects).collect();
    perm.shuffle(&mut rng);
    let mut fold = vec![0; n_subjects];
    for (pos, &i) in perm.iter().enumerate() {
        fold[i] = pos % n_folds;
    }
    Ok(FoldAssignment {
        fold,
        n_folds,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Treatment model

pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic IRLS. `Err(Some(col))` signals separation on `col`,
/// `Err(None)` a singular design.
fn irls(x: &[f64], q: usize, y: &[f64], w: &[f64]) -> std::result::Result<Vec<f64>, Option<usize>> {
    let n = y.len();
    let mut beta = DVector::<f64>::zeros(q);
    let dev = |b: &DVector<f64>| -> f64 {
        let mut d = 0.0;
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let eta: f64 = (0..q).map(|a| x[i * q + a] * b[a]).sum();
            // log(1 + e^eta) - y eta, computed stably
            let sp = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            d += w[i] * (sp - y[i] * eta);
        }
        d
    };
    let mut cur = dev(&beta);
    let mut converged = false;
    for _ in 0..100 {
        let mut ne = NormalEquations::new(q);
        let mut grad = DVector::zeros(q);
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let row = &x[i * q..(i + 1) * q];
            let eta: f64 = (0..q).map(|a| row[a] * beta[a]).sum();
            let p = expit(eta);
            let v = (p * (1.0 - p)).max(1e-12);
            ne.add(row, w[i] * v);
            for a in 0..q {
                grad[a] += w[i] * (y[i] - p) * row[a];
            }
        }
        let Some(solver) = GramSolver::new(&ne.xtx) else {
            // information collapses when fitted probabilities saturate
            return Err(largest_slope(&beta));
        };
        let step = solver.solve(&grad);
        let mut t = 1.0;
        let mut next = &beta + &step * t;
        let mut nd = dev(&next);
        while nd > cur + 1e-12 * (1.0 + cur.abs()) && t > 1e-8 {
            t *= 0.5;
            next = &beta + &step * t;
            nd = dev(&next);
        }
        let change = (&next - &beta).amax();
        beta = next;
        cur = nd;
        if change < 1e-10 * (1.0 + beta.amax()) {
            converged = true;
            break;
        }
    }
    let max_eta = (0..n)
        .filter(|&i| w[i] != 0.0)
        .map(|i| (0..q).map(|a| x[i * q + a] * beta[a]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    if !converged || max_eta > 30.0 {
        return Err(largest_slope(&beta));
    }
    Ok(beta.iter().copied().collect())
}

fn largest_slope(beta: &DVector<f64>) -> Option<usize> {
    let mut best = None;
    let mut bv = -1.0;
    for (j, b) in beta.iter().enumerate() {
        if b.abs() > bv {
            bv = b.abs();
            best = Some(j);
        }
    }
    best
}

fn cell_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect()
}

#[derive(Debug, Clone)]
enum ComponentFit {
    Cells { cells: HashMap<Vec<u64>, f64>, fallback: f64 },
    Coef { beta: Vec<f64>, logistic: bool },
    Constant(f64),
    Learned(Arc<dyn Predictor>),
}

impl ComponentFit {
    fn predict(&self, x: &[f64]) -> (f64, bool) {
        match self {
            ComponentFit::Cells { cells, fallback } => match cells.get(&cell_key(x)) {
                Some(v) => (*v, false),
                None => (*fallback, true),
            },
            ComponentFit::Coef { beta, logistic } => {
                let eta: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
                (if *logistic { expit(eta) } else { eta }, false)
            }
            ComponentFit::Constant(v) => (*v, false),
            ComponentFit::Learned(p) => (p.predict(x), false),
        }
    }

    fn export(&self) -> serde_json::Value {
        match self {
            ComponentFit::Cells { cells, fallback } => {
                let mut rows: Vec<(Vec<f64>, f64)> = cells
                    .iter()
                    .map(|(k, v)| (k.iter().map(|b| f64::from_bits(*b)).collect(), *v))
                    .collect();
                rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
                serde_json::json!({"family": "saturated", "cells": rows, "fallback": fallback})
            }
            ComponentFit::Coef { beta, logistic } => serde_json::json!({
                "family": if *logistic { "logistic" } else { "linear" },
                "coefficients": beta,
            }),
            ComponentFit::Constant(v) => serde_json::json!({"family": "constant", "value": v}),
            ComponentFit::Learned(p) => serde_json::json!({"family": "learner", "coefficients": p.coefficients()}),
        }
    }
}

/// Treatment model fitted at every time for every component.
#[derive(Debug, Clone)]
pub struct TreatmentFit {
    /// `None` where no training subjects were available at `m`.
    per_time: Vec<Option<Vec<ComponentFit>>>,
    column_names: Vec<Vec<String>>,
    pub flags: Vec<String>,
}

impl TreatmentFit {
    /// `Ê[A_m | x]` per component, with a flag for unseen saturated cells.
    pub fn predict(&self, m: usize, x: &[f64]) -> Option<(Vec<f64>, bool)> {
        let comps = self.per_time.get(m)?.as_ref()?;
        let mut unseen = false;
        let v = comps
            .iter()
            .map(|c| {
                let (p, u) = c.predict(x);
                unseen |= u;
                p
            })
            .collect();
        Some((v, unseen))
    }

    pub fn is_fitted(&self, m: usize) -> bool {
        self.per_time.get(m).is_some_and(|c| c.is_some())
    }

    /// Coefficient tables for audit.
    pub fn export(&self) -> serde_json::Value {
        let times: Vec<serde_json::Value> = self
            .per_time
            .iter()
            .enumerate()
            .map(|(m, t)| match t {
                None => serde_json::json!({"time": m, "fitted": false}),
                Some(c) => serde_json::json!({
                    "time": m,
                    "columns": self.column_names[m],
                    "components": c.iter().map(|x| x.export()).collect::<Vec<_>>(),
                }),
            })
            .collect();
        serde_json::json!({"times": times, "flags": self.flags})
    }
}

/// Treatment-model design precomputed for every subject and time.
#[derive(Debug, Clone)]
pub struct TreatmentTable {
    pub(crate) n: usize,
    pub(crate) p: usize,
    /// Per time: row-major features (n × dim_m).
    pub(crate) x: Vec<Vec<f64>>,
    pub(crate) dim: Vec<usize>,
    pub(crate) names: Vec<Vec<String>>,
    /// Per time: treatments (n × p).
    pub(crate) a: Vec<Vec<f64>>,
    /// Per time: training eligibility under the chosen conditioning.
    pub(crate) eligible: Vec<Vec<bool>>,
    pub(crate) component_names: Vec<String>,
}

impl TreatmentTable {
    pub fn build(data: &PanelDataset, basis: &HistoryBasis, eligible: Vec<Vec<bool>>) -> Self {
        let n = data.n_subjects();
        let p = data.n_treatments();
        let nt = data.n_times();
        let mut x = Vec::with_capacity(nt);
        let mut a = Vec::with_capacity(nt);
        let mut dim = Vec::with_capacity(nt);
        let mut names = Vec::with_capacity(nt);
        for m in 0..nt {
            let q = basis.dim(m);
            let mut xm = Vec::with_capacity(n * q);
            let mut am = Vec::with_capacity(n * p);
            for i in 0..n {
                let h = data.history(i, m);
                basis.eval_into(&h.lbar(), &mut xm);
                am.extend_from_slice(h.current_treatment());
            }
            x.push(xm);
            a.push(am);
            dim.push(q);
            names.push(basis.column_names(m));
        }
        TreatmentTable {
            n,
            p,
            x,
            dim,
            names,
            a,
            eligible,
            component_names: data.treatment_names().to_vec(),
        }
    }

    pub fn row(&self, m: usize, i: usize) -> &[f64] {
        let q = self.dim[m];
        &self.x[m][i * q..(i + 1) * q]
    }

    pub fn treatment(&self, m: usize, i: usize) -> &[f64] {
        &self.a[m][i * self.p..(i + 1) * self.p]
    }

    /// Fits on subjects with positive `weights` that are eligible at each time.
    pub fn fit(
        &self,
        family: &TreatmentFamily,
        weights: &[f64],
        registry: &LearnerRegistry,
    ) -> Result<TreatmentFit> {
        let mut per_time = Vec::with_capacity(self.x.len());
        let mut flags = Vec::new();
        for m in 0..self.x.len() {
            let rows: Vec<usize> = (0..self.n)
                .filter(|&i| weights[i] > 0.0 && self.eligible[m][i])
                .collect();
            if rows.is_empty() {
                flags.push(format!("no training subjects at time {m}; its terms are excluded"));
                per_time.push(None);
                continue;
            }
            let q = self.dim[m];
            let xs: Vec<f64> = rows.iter().flat_map(|&i| self.row(m, i).iter().copied()).collect();
            let ws: Vec<f64> = rows.iter().map(|&i| weights[i]).collect();
            let mut comps = Vec::with_capacity(self.p);
            for c in 0..self.p {
                let ys: Vec<f64> = rows.iter().map(|&i| self.treatment(m, i)[c]).collect();
                comps.push(self.fit_component(family, m, c, &xs, q, &ys, &ws, registry, &mut flags)?);
            }
            per_time.push(Some(comps));
        }
        Ok(TreatmentFit {
            per_time,
            column_names: self.names.clone(),
            flags,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn fit_component(
        &self,
        family: &TreatmentFamily,
        m: usize,
        c: usize,
        xs: &[f64],
        q: usize,
        ys: &[f64],
        ws: &[f64],
        registry: &LearnerRegistry,
        flags: &mut Vec<String>,
    ) -> Result<ComponentFit> {
        let wsum: f64 = ws.iter().sum();
        let mean = ys.iter().zip(ws).map(|(y, w)| y * w).sum::<f64>() / wsum;
        let constant = ys.iter().all(|y| *y == ys[0]);
        let cname = &self.component_names[c];
        if let TreatmentFamily::Saturated = family {
            let mut acc: HashMap<Vec<u64>, (f64, f64)> = HashMap::new();
            for (r, (y, w)) in ys.iter().zip(ws).enumerate() {
                let e = acc.entry(cell_key(&xs[r * q..(r + 1) * q])).or_insert((0.0, 0.0));
                e.0 += w * y;
                e.1 += w;
            }
            let cells = acc.into_iter().map(|(k, (s, w))| (k, s / w)).collect();
            return Ok(ComponentFit::Cells { cells, fallback: mean });
        }
        if constant {
            flags.push(format!(
                "treatment `{cname}` is constant ({}) among training subjects at time {m}",
                ys[0]
            ));
            return Ok(ComponentFit::Constant(ys[0]));
        }
        let binary = ys.iter().all(|y| *y == 0.0 || *y == 1.0);
        let logistic = match family {
            TreatmentFamily::Logistic => true,
            TreatmentFamily::Auto => binary,
            TreatmentFamily::Linear => false,
            TreatmentFamily::Learner { name } => {
                let learner = registry.get(name)?;
                return Ok(ComponentFit::Learned(learner.train(xs, q, ys, ws)?));
            }
            TreatmentFamily::Saturated => unreachable!(),
        };
        if logistic {
            if !binary {
                return Err(Error::Config(format!(
                    "logistic treatment model needs a binary treatment, `{cname}` is not"
                )));
            }
            match irls(xs, q, ys, ws) {
                Ok(beta) => Ok(ComponentFit::Coef { beta, logistic: true }),
                Err(Some(col)) => Err(Error::Separation {
                    time: m,
                    column: self.names[m].get(col).cloned().unwrap_or_else(|| format!("#{col}")),
                }),
                Err(None) => Err(Error::Rank(format!("treatment design singular at time {m}"))),
            }
        } else {
            let beta = weighted_ols(xs, q, ys, ws)
                .ok_or_else(|| Error::Rank(format!("treatment design singular at time {m} for `{cname}`")))?;
            Ok(ComponentFit::Coef {
                beta: beta.iter().copied().collect(),
                logistic: false,
            })
        }
    }
}

/// Eligibility per time: everyone, or the at-risk set of `model`.
pub(crate) fn eligibility(data: &PanelDataset, model: &BlipModel, cond: Conditioning) -> Vec<Vec<bool>> {
    let n = data.n_subjects();
    let init: Vec<_> = (0..n).map(|i| model.initiation_time(data, i)).collect();
    (0..data.n_times())
        .map(|m| {
            (0..n)
                .map(|i| cond == Conditioning::FullHistory || init[i].at_risk(m))
                .collect()
        })
        .collect()
}

/// Per-fold fitted nuisance predictors plus the fold map they respect.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub folds: FoldAssignment,
    /// Model used for subjects of fold `f`, trained on the other folds
    /// (on everyone for a single-fold fit).
    pub treatment: Vec<TreatmentFit>,
    pub trend: Vec<Option<TrendFit>>,
    pub table: Arc<TreatmentTable>,
    /// Training membership of each fold's models.
    pub training: Vec<Vec<bool>>,
}

impl NuisanceFit {
    /// `Ê[A_m | ·]` for subject `i`, from its own fold's model.
    pub fn treatment_prediction(&self, i: usize, m: usize) -> Option<Vec<f64>> {
        let f = self.folds.fold[i];
        self.treatment[f]
            .predict(m, self.table.row(m, i))
            .map(|(v, _)| v)
    }

    /// True when the predictor consumed for subject `i` was trained without it.
    pub fn trained_without(&self, i: usize) -> bool {
        !self.training[self.folds.fold[i]][i]
    }
}

pub(crate) fn fold_weights(folds: &FoldAssignment, f: usize, weights: &[f64]) -> Vec<f64> {
    (0..folds.fold.len())
        .map(|i| {
            if folds.n_folds == 1 || folds.fold[i] != f {
                weights[i]
            } else {
                0.0
            }
        })
        .collect()
}

/// Fits the treatment model once per fold on the complement of that fold.
/// Pass `FoldAssignment::single(n)` for a full-sample fit.
pub fn fit_treatment_model(
    data: &PanelDataset,
    model: &BlipModel,
    spec: &NuisanceSpec,
    folds: &FoldAssignment,
    conditioning: Conditioning,
    registry: &LearnerRegistry,
) -> Result<NuisanceFit> {
    let basis = HistoryBasis::resolve(&spec.treatment_basis, data)?;
    let table = Arc::new(TreatmentTable::build(data, &basis, eligibility(data, model, conditioning)));
    let w = vec![1.0; data.n_subjects()];
    let training = (0..folds.n_folds)
        .map(|f| fold_weights(folds, f, &w).iter().map(|v| *v > 0.0).collect())
        .collect();
    let treatment = (0..folds.n_folds)
        .map(|f| {
            table
                .fit(&spec.treatment_family, &fold_weights(folds, f, &w), registry)
                .map_err(|e| tag_fold(folds, f, e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NuisanceFit {
        folds: folds.clone(),
        trend: vec![None; folds.n_folds],
        treatment,
        table,
        training,
    })
}

pub(crate) fn tag_fold(folds: &FoldAssignment, f: usize, e: Error) -> Error {
    if folds.n_folds > 1 {
        Error::Fold {
            fold: f,
            source: Box::new(e),
        }
    } else {
        e
    }
}

// ---------------------------------------------------------------------------
// Trend model

/// Fitted trend `v̂_m(k, ·)` for every anchor/horizon pair.
#[derive(Debug, Clone)]
pub struct TrendFit {
    pub(crate) coef: HashMap<(usize, usize), TrendPredictor>,
}

#[derive(Debug, Clone)]
pub(crate) enum TrendPredictor {
    Linear(Vec<f64>),
    Learned(Arc<dyn Predictor>),
    /// No training rows at this anchor: terms excluded.
    Skipped,
}

impl TrendPredictor {
    pub(crate) fn predict(&self, x: &[f64]) -> Option<f64> {
        match self {
            TrendPredictor::Linear(b) => Some(b.iter().zip(x).map(|(a, v)| a * v).sum()),
            TrendPredictor::Learned(p) => Some(p.predict(x)),
            TrendPredictor::Skipped => None,
        }
    }
}

impl TrendFit {
    pub fn predict(&self, m: usize, k: usize, x: &[f64]) -> Option<f64> {
        self.coef.get(&(m, k)).and_then(|p| p.predict(x))
    }

    pub fn export(&self) -> serde_json::Value {
        let mut keys: Vec<_> = self.coef.keys().copied().collect();
        keys.sort();
        serde_json::Value::Array(
            keys.into_iter()
                .map(|(m, k)| {
                    let c = match &self.coef[&(m, k)] {
                        TrendPredictor::Linear(b) => serde_json::json!(b),
                        TrendPredictor::Learned(p) => serde_json::json!(p.coefficients()),
                        TrendPredictor::Skipped => serde_json::Value::Null,
                    };
                    serde_json::json!({"m": m, "k": k, "coefficients": c})
                })
                .collect(),
        )
    }
}

/// Fits one trend regression of `ΔH` on the trend design for pair `(m, k)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_trend_pair(
    family: &TrendFamily,
    m: usize,
    k: usize,
    xs: &[f64],
    q: usize,
    ys: &[f64],
    ws: &[f64],
    registry: &LearnerRegistry,
) -> Result<TrendPredictor> {
    let rows = ws.iter().filter(|w| **w > 0.0).count();
    if rows == 0 {
        return Ok(TrendPredictor::Skipped);
    }
    if rows < q {
        return Err(Error::Rank(format!(
            "trend model at (m={m}, k={k}) has {rows} training rows for {q} basis columns"
        )));
    }
    match family {
        TrendFamily::Linear => weighted_ols(xs, q, ys, ws)
            .map(|b| TrendPredictor::Linear(b.iter().copied().collect()))
            .ok_or_else(|| Error::Rank(format!("trend design singular at (m={m}, k={k})"))),
        TrendFamily::Learner { name } => Ok(TrendPredictor::Learned(registry.get(name)?.train(xs, q, ys, ws)?)),
    }
}

/// Fits `v̂_m(k, ·; γ(ψ))` per fold by regressing `H_mk(ψ) - H_{m,k-1}(ψ)`
/// on the trend basis among eligible training subjects.
pub fn fit_trend_model(
    data: &PanelDataset,
    model: &BlipModel,
    psi: &[f64],
    spec: &NuisanceSpec,
    folds: &FoldAssignment,
    conditioning: Conditioning,
    registry: &LearnerRegistry,
) -> Result<Vec<TrendFit>> {
    let basis = HistoryBasis::resolve(&spec.trend_basis, data)?;
    let elig = eligibility(data, model, conditioning);
    let n = data.n_subjects();
    let kk = data.horizon();
    let w = vec![1.0; n];
    let mut out = Vec::new();
    for f in 0..folds.n_folds {
        let fw = fold_weights(folds, f, &w);
        let mut coef = HashMap::new();
        for m in 0..kk {
            let q = basis.dim(m);
            let xs: Vec<f64> = (0..n)
                .flat_map(|i| basis.eval(&data.history(i, m).lbar()))
                .collect();
            for k in m + 1..=kk {
                let mut ys = vec![0.0; n];
                let mut ws = vec![0.0; n];
                for i in 0..n {
                    if fw[i] > 0.0 && elig[m][i] {
                        ys[i] = blip_down(model, psi, data, i, m, k)?.value
                            - blip_down(model, psi, data, i, m, k - 1)?.value;
                        ws[i] = fw[i];
                    }
                }
                let p = fit_trend_pair(&spec.trend_family, m, k, &xs, q, &ys, &ws, registry)
                    .map_err(|e| tag_fold(folds, f, e))?;
                coef.insert((m, k), p);
            }
        }
        out.push(TrendFit { coef });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blip::PerPairBasis;

    #[test]
    fn folds_balanced_and_deterministic() {
        let f = split_folds(10, 2, 7).unwrap();
        assert_eq!(f.sizes(), vec![5, 5]);
        assert_eq!(f, split_folds(10, 2, 7).unwrap());
        assert_eq!(split_folds(11, 3, 1).unwrap().sizes().iter().max().unwrap() - split_folds(11, 3, 1).unwrap().sizes().iter().min().unwrap(), 1);
        assert!(split_folds(3, 4, 0).is_err());
        assert!(split_folds(3, 1, 0).is_err());
    }

    fn staggered() -> PanelDataset {
        // 6 subjects, K = 2; initiation times 0, 1, 1, never, never, 2
        let paths: [[f64; 3]; 6] = [
            [1.0, 1.0, 1.0],
            [0.0, 1.0, 1.0],
            [0.0, 1.0, 1.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let y: Vec<f64> = (0..18).map(|v| v as f64 * 0.5).collect();
        PanelDataset::new(
            (0..6).map(|i| i.to_string()).collect(),
            vec![0, 1, 2],
            "y",
            vec!["d".into()],
            vec![],
            y,
            paths.iter().flatten().copied().collect(),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn saturated_empty_basis_is_at_risk_frequency() {
        let d = staggered();
        let model = BlipModel::linear(Flavor::Coarse, Arc::new(PerPairBasis::new(2, 0, vec![], 0)));
        let spec = NuisanceSpec::new(TreatmentFamily::Saturated, vec![], vec![HistoryTerm::Intercept]);
        let fit = fit_treatment_model(
            &d,
            &model,
            &spec,
            &FoldAssignment::single(6),
            Conditioning::AtRisk,
            &LearnerRegistry::default(),
        )
        .unwrap();
        // at m=1 the at-risk set is subjects 1..5, two of whom initiate
        let p = fit.treatment[0].predict(1, &[]).unwrap().0[0];
        assert!((p - 2.0 / 5.0).abs() < 1e-15);
        let p2 = fit.treatment[0].predict(2, &[]).unwrap().0[0];
        assert!((p2 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_psi_constant_trend_is_raw_mean_trend() {
        let d = staggered();
        let model = BlipModel::linear(Flavor::Coarse, Arc::new(PerPairBasis::new(2, 0, vec![], 0)));
        let spec = NuisanceSpec::default();
        let fits = fit_trend_model(
            &d,
            &model,
            &[0.0; 3],
            &spec,
            &FoldAssignment::single(6),
            Conditioning::AtRisk,
            &LearnerRegistry::default(),
        )
        .unwrap();
        // at-risk at m=1: subjects 1..5; Y_2 - Y_1 = 0.5 for everyone
        assert!((fits[0].predict(1, 2, &[1.0]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn logistic_separation_is_reported() {
        let n = 40;
        let x: Vec<f64> = (0..n).flat_map(|i| [1.0, i as f64]).collect();
        let y: Vec<f64> = (0..n).map(|i| if i >= 20 { 1.0 } else { 0.0 }).collect();
        assert!(irls(&x, 2, &y, &vec![1.0; n]).is_err());
    }

    #[test]
    fn logistic_recovers_coefficients_on_noiseless_probabilities() {
        // replicate each covariate value with fractional weights equal to the true probabilities
        let beta = [-0.5, 1.2];
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut w = Vec::new();
        for i in 0..5 {
            let v = i as f64 - 2.0;
            let p = expit(beta[0] + beta[1] * v);
            for (yy, ww) in [(1.0, p), (0.0, 1.0 - p)] {
                x.extend_from_slice(&[1.0, v]);
                y.push(yy);
                w.push(ww);
            }
        }
        let b = irls(&x, 2, &y, &w).unwrap();
        assert!((b[0] - beta[0]).abs() < 1e-8 && (b[1] - beta[1]).abs() < 1e-8);
    }
}
