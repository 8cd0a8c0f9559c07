//! Parametric blip models and the blip-down transforms `H_mk` that turn
//! observed outcomes into pseudo-counterfactuals.
//!
//! A blip `γ_mk(l̄_m, a_m; ψ)` is the effect at time `k` of one final
//! treatment `a_m` at time `m`. Linear models are written `ψ'B_mk(l̄_m, a_m)`
//! where the feature map `B` vanishes at the baseline action, so every blip
//! is zero when `ψ = 0` or `a_m = 0`.

use std::collections::HashMap;
use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{covariate_index, treatment_index};
use crate::error::{Error, Result};
use crate::panel::{InitiationTime, LBar, PanelDataset};
use crate::sensitivity::BiasFunction;

/// Largest exponent magnitude accepted by multiplicative transforms.
pub const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// Effects of one last blip of treatment followed by baseline.
    Standard,
    /// Effects of first initiation versus never initiating.
    Coarse,
    /// Standard shape on the multiplicative scale.
    Multiplicative,
    /// Blips relative to a reference (optimal) regime.
    Regime,
}

impl Flavor {
    /// Coarse models condition on the at-risk set `T >= m`.
    pub fn at_risk_conditioning(self) -> bool {
        matches!(self, Flavor::Coarse)
    }
}

/// Feature map `B_mk(l̄_m, a_m)` of a blip model linear in `ψ`.
pub trait BlipBasis: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn names(&self) -> Vec<String>;
    /// Writes `B_mk(h, a)` into `out` (length `dim`). Must be zero when `a = 0`.
    fn features(&self, h: &LBar<'_>, a: &[f64], m: usize, k: usize, out: &mut [f64]);
}

/// Arbitrary blip `γ_mk(h, a; ψ)`; disables the closed-form path.
pub trait BlipFunction: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn names(&self) -> Vec<String>;
    fn eval(&self, h: &LBar<'_>, a: &[f64], m: usize, k: usize, psi: &[f64]) -> f64;
}

#[derive(Debug, Clone)]
pub enum BlipForm {
    Linear(Arc<dyn BlipBasis>),
    General(Arc<dyn BlipFunction>),
}

/// Utility weights and action grid for optimal-regime models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    /// `τ_0..τ_K` in `Y = Σ τ_m Y_m`.
    pub tau: Vec<f64>,
    /// Finite action grid; sorted so the baseline-most action comes first.
    pub actions: Vec<Vec<f64>>,
}

impl RegimeSpec {
    pub fn new(tau: Vec<f64>, mut actions: Vec<Vec<f64>>) -> Result<Self> {
        if tau.iter().all(|t| *t == 0.0) {
            return Err(Error::Config("utility weights are all zero".into()));
        }
        if actions.is_empty() {
            return Err(Error::Config("empty action grid".into()));
        }
        actions.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        actions.dedup();
        Ok(RegimeSpec { tau, actions })
    }

    /// Binary single-component grid `{0, 1}`.
    pub fn binary(tau: Vec<f64>) -> Result<Self> {
        RegimeSpec::new(tau, vec![vec![0.0], vec![1.0]])
    }
}

/// A parametric blip model.
#[derive(Debug, Clone)]
pub struct BlipModel {
    pub flavor: Flavor,
    pub form: BlipForm,
    /// Treatment components whose first departure from 0 defines `T`.
    pub initiation: Vec<usize>,
    /// Present for the optimal-regime variant.
    pub regime: Option<RegimeSpec>,
}

impl BlipModel {
    pub fn linear(flavor: Flavor, basis: Arc<dyn BlipBasis>) -> Self {
        BlipModel {
            flavor,
            form: BlipForm::Linear(basis),
            initiation: vec![0],
            regime: None,
        }
    }

    pub fn general(flavor: Flavor, f: Arc<dyn BlipFunction>) -> Self {
        BlipModel {
            flavor,
            form: BlipForm::General(f),
            initiation: vec![0],
            regime: None,
        }
    }

    pub fn with_initiation(mut self, components: Vec<usize>) -> Self {
        self.initiation = components;
        self
    }

    pub fn with_regime(mut self, regime: RegimeSpec) -> Self {
        self.regime = Some(regime);
        self
    }

    pub fn dim(&self) -> usize {
        match &self.form {
            BlipForm::Linear(b) => b.dim(),
            BlipForm::General(f) => f.dim(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        match &self.form {
            BlipForm::Linear(b) => b.names(),
            BlipForm::General(f) => f.names(),
        }
    }

    pub fn basis(&self) -> Option<&Arc<dyn BlipBasis>> {
        match &self.form {
            BlipForm::Linear(b) => Some(b),
            BlipForm::General(_) => None,
        }
    }

    pub fn initiation_time(&self, data: &PanelDataset, i: usize) -> InitiationTime {
        data.initiation_time_for(i, &self.initiation)
    }

    fn check(&self, psi: &[f64], m: usize, k: usize) -> Result<()> {
        if psi.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "parameter has length {} but the blip model has dimension {}",
                psi.len(),
                self.dim()
            )));
        }
        if k <= m {
            return Err(Error::Config(format!("blip needs k > m, got m={m}, k={k}")));
        }
        Ok(())
    }

    /// `γ_mk(h, a; ψ)`.
    pub fn eval(&self, psi: &[f64], h: &LBar<'_>, a: &[f64], m: usize, k: usize) -> Result<f64> {
        self.check(psi, m, k)?;
        Ok(self.eval_unchecked(psi, h, a, m, k))
    }

    pub(crate) fn eval_unchecked(&self, psi: &[f64], h: &LBar<'_>, a: &[f64], m: usize, k: usize) -> f64 {
        if a.iter().all(|v| *v == 0.0) {
            return 0.0;
        }
        match &self.form {
            BlipForm::Linear(b) => {
                let mut f = vec![0.0; b.dim()];
                b.features(h, a, m, k, &mut f);
                f.iter().zip(psi).map(|(x, p)| x * p).sum()
            }
            BlipForm::General(g) => g.eval(h, a, m, k, psi),
        }
    }

    fn require(&self, flavors: &[Flavor]) -> Result<()> {
        if flavors.contains(&self.flavor) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "transform requires a {:?} model, got {:?}",
                flavors, self.flavor
            )))
        }
    }

    /// Optimal action at time `m`: argmax over the grid of `Σ_{r>m} τ_r γ_mr`,
    /// ties resolved toward the first (smallest) action.
    pub fn optimal_action<'g>(&'g self, psi: &[f64], h: &LBar<'_>, m: usize) -> Result<&'g [f64]> {
        let reg = self
            .regime
            .as_ref()
            .ok_or_else(|| Error::Config("model has no utility weights / action grid".into()))?;
        if reg.actions.is_empty() {
            return Err(Error::Config("empty action grid".into()));
        }
        let horizon = h.data().horizon();
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (ai, a) in reg.actions.iter().enumerate() {
            let mut v = 0.0;
            for r in m + 1..=horizon {
                let t = reg.tau.get(r).copied().unwrap_or(0.0);
                if t != 0.0 {
                    v += t * self.eval_unchecked(psi, h, a, m, r);
                }
            }
            if ai == 0 || v > best_v + 1e-12 * (1.0 + best_v.abs()) {
                best = ai;
                best_v = v;
            }
        }
        Ok(&reg.actions[best])
    }
}

/// A blipped-down outcome `H_mk` for one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlippedOutcome {
    pub subject: usize,
    pub m: usize,
    pub k: usize,
    pub value: f64,
}

fn check_times(data: &PanelDataset, m: usize, k: usize) -> Result<()> {
    if m > k || k > data.horizon() {
        return Err(Error::Config(format!(
            "need m <= k <= K, got m={m}, k={k}, K={}",
            data.horizon()
        )));
    }
    Ok(())
}

fn out(i: usize, m: usize, k: usize, value: f64) -> BlippedOutcome {
    BlippedOutcome { subject: i, m, k, value }
}

/// `H_mk = Y_k - Σ_{j=m}^{k-1} γ_jk(L̄_j, A_j)`.
pub fn blip_down_standard(
    model: &BlipModel,
    psi: &[f64],
    data: &PanelDataset,
    i: usize,
    m: usize,
    k: usize,
) -> Result<BlippedOutcome> {
    model.require(&[Flavor::Standard, Flavor::Regime])?;
    check_times(data, m, k)?;
    let mut v = data.outcome(i, k);
    for j in m..k {
        let h = data.history(i, j);
        v -= model.eval(psi, &h.lbar(), h.current_treatment(), j, k)?;
    }
    Ok(out(i, m, k, v))
}

/// `H^c_mk = Y_k - 1{m <= T <= k-1} γ^c_Tk(L̄_T, A_T)`.
pub fn blip_down_coarse(
    model: &BlipModel,
    psi: &[f64],
    data: &PanelDataset,
    i: usize,
    m: usize,
    k: usize,
) -> Result<BlippedOutcome> {
    model.require(&[Flavor::Coarse])?;
    check_times(data, m, k)?;
    let mut v = data.outcome(i, k);
    if let InitiationTime::At { time, value } = model.initiation_time(data, i) {
        if time >= m && time < k {
            v -= model.eval(psi, &data.history(i, time).lbar(), &value, time, k)?;
        }
    }
    Ok(out(i, m, k, v))
}

/// `H^×_mk = Y_k exp(-Σ_{j=m}^{k-1} γ^×_jk)`.
pub fn blip_down_multiplicative(
    model: &BlipModel,
    psi: &[f64],
    data: &PanelDataset,
    i: usize,
    m: usize,
    k: usize,
) -> Result<BlippedOutcome> {
    model.require(&[Flavor::Multiplicative])?;
    check_times(data, m, k)?;
    let mut e = 0.0;
    for j in m..k {
        let h = data.history(i, j);
        e += model.eval(psi, &h.lbar(), h.current_treatment(), j, k)?;
    }
    if !e.is_finite() || e.abs() > MAX_EXPONENT {
        return Err(Error::Overflow(format!(
            "multiplicative exponent {e} for subject {} (m={m}, k={k}) exceeds {MAX_EXPONENT}",
            data.subject_id(i)
        )));
    }
    Ok(out(i, m, k, data.outcome(i, k) * (-e).exp()))
}

/// Regime blip-down. With utility weights on the model this is the
/// optimal-regime transform
/// `H_mk = Y_k + Σ_{j=m}^{k-1} {γ_jk(L̄_j, g_j) - γ_jk(L̄_j, A_j)}`,
/// `g_j` the argmax action; otherwise the plain standard-shape transform.
pub fn blip_down_regime(
    model: &BlipModel,
    psi: &[f64],
    data: &PanelDataset,
    i: usize,
    m: usize,
    k: usize,
) -> Result<BlippedOutcome> {
    model.require(&[Flavor::Regime])?;
    check_times(data, m, k)?;
    let mut v = data.outcome(i, k);
    for j in m..k {
        let h = data.history(i, j);
        let l = h.lbar();
        v -= model.eval(psi, &l, h.current_treatment(), j, k)?;
        if model.regime.is_some() {
            let g = model.optimal_action(psi, &l, j)?;
            v += model.eval(psi, &l, g, j, k)?;
        }
    }
    Ok(out(i, m, k, v))
}

/// Dispatches to the transform matching the model flavor.
pub fn blip_down(
    model: &BlipModel,
    psi: &[f64],
    data: &PanelDataset,
    i: usize,
    m: usize,
    k: usize,
) -> Result<BlippedOutcome> {
    match model.flavor {
        Flavor::Standard => blip_down_standard(model, psi, data, i, m, k),
        Flavor::Coarse => blip_down_coarse(model, psi, data, i, m, k),
        Flavor::Multiplicative => blip_down_multiplicative(model, psi, data, i, m, k),
        Flavor::Regime => blip_down_regime(model, psi, data, i, m, k),
    }
}

/// Checks the single binary treatment component needed by bias adjustment.
pub(crate) fn binary_component(model: &BlipModel, data: &PanelDataset) -> Result<usize> {
    if model.flavor != Flavor::Coarse {
        return Err(Error::Unsupported("bias adjustment is defined for coarse models".into()));
    }
    if model.initiation.len() != 1 || data.n_treatments() != 1 {
        return Err(Error::Unsupported(
            "bias adjustment requires a single binary treatment".into(),
        ));
    }
    let c = model.initiation[0];
    if !data.is_binary_treatment(c) {
        return Err(Error::Unsupported(
            "bias adjustment requires a binary treatment".into(),
        ));
    }
    Ok(c)
}

/// Bias-adjusted coarse transform
/// `H^{c,a}_mk = H^c_mk - Σ_{j=m}^{k} Pr(1-A_j | L̄_j, T>=j)(2A_j-1) c(L̄_j, k) 1{T>=j}`.
///
/// `prob(j)` returns the fitted `Pr(A_j = 1 | L̄_j, T >= j)` for subject `i`.
#[allow(clippy::too_many_arguments)]
pub fn bias_adjusted_coarse(
    model: &BlipModel,
    psi: &[f64],
    data: &PanelDataset,
    i: usize,
    m: usize,
    k: usize,
    c: &dyn BiasFunction,
    prob: &dyn Fn(usize) -> f64,
) -> Result<BlippedOutcome> {
    let comp = binary_component(model, data)?;
    let base = blip_down_coarse(model, psi, data, i, m, k)?;
    Ok(out(i, m, k, base.value - bias_term(model, data, i, m, k, comp, c, prob)))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bias_term(
    model: &BlipModel,
    data: &PanelDataset,
    i: usize,
    m: usize,
    k: usize,
    comp: usize,
    c: &dyn BiasFunction,
    prob: &dyn Fn(usize) -> f64,
) -> f64 {
    let t = model.initiation_time(data, i);
    let mut adj = 0.0;
    for j in m..=k {
        if !t.at_risk(j) {
            break;
        }
        let a = data.treatment(i, j)[comp];
        let p1 = prob(j);
        let p_other = if a != 0.0 { 1.0 - p1 } else { p1 };
        let sign = 2.0 * a - 1.0;
        adj += p_other * sign * c.eval(&data.history(i, j).lbar(), k);
    }
    adj
}

// ---------------------------------------------------------------------------
// Built-in bases

/// Per-(m,k) effect indicators plus shared covariate slopes:
/// `a (τ_mk + β'Z_m)`.
#[derive(Debug, Clone)]
pub struct PerPairBasis {
    component: usize,
    pairs: Vec<(usize, usize)>,
    index: HashMap<(usize, usize), usize>,
    covariates: Vec<(usize, String)>,
    prefix: String,
}

impl PerPairBasis {
    /// Pairs `min_anchor <= m < k <= horizon`.
    pub fn new(horizon: usize, component: usize, covariates: Vec<(usize, String)>, min_anchor: usize) -> Self {
        let pairs: Vec<(usize, usize)> = (min_anchor..horizon)
            .flat_map(|m| (m + 1..=horizon).map(move |k| (m, k)))
            .collect();
        Self::with_pairs(pairs, component, covariates)
    }

    pub fn with_pairs(pairs: Vec<(usize, usize)>, component: usize, covariates: Vec<(usize, String)>) -> Self {
        let index = pairs.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        PerPairBasis {
            component,
            pairs,
            index,
            covariates,
            prefix: String::new(),
        }
    }

    /// Prefix for parameter names, used when stacking several bases.
    pub fn named(mut self, prefix: &str) -> Self {
        self.prefix = prefix.to_string();
        self
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn pair_index(&self, m: usize, k: usize) -> Option<usize> {
        self.index.get(&(m, k)).copied()
    }
}

impl BlipBasis for PerPairBasis {
    fn dim(&self) -> usize {
        self.pairs.len() + self.covariates.len()
    }

    fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .pairs
            .iter()
            .map(|(m, k)| format!("{}tau[{m},{k}]", self.prefix))
            .collect();
        v.extend(self.covariates.iter().map(|(_, n)| format!("{}beta[{n}]", self.prefix)));
        v
    }

    fn features(&self, h: &LBar<'_>, a: &[f64], m: usize, k: usize, out: &mut [f64]) {
        out.fill(0.0);
        let ac = a[self.component];
        if ac == 0.0 {
            return;
        }
        if let Some(&idx) = self.index.get(&(m, k)) {
            out[idx] = ac;
        }
        let p = self.pairs.len();
        for (t, (j, _)) in self.covariates.iter().enumerate() {
            out[p + t] = ac * h.covariate(m as i64, *j).unwrap_or(0.0);
        }
    }
}

/// Event-time basis `a (1, t_m - ref, k-m, (k-m)^2, Z_{m-lag})`, where `t_m`
/// is the calendar label of time `m`.
#[derive(Debug, Clone)]
pub struct FloodBasis {
    component: usize,
    reference: i64,
    covariate: Option<(usize, usize, String)>,
}

impl FloodBasis {
    pub fn new(component: usize, reference: i64, covariate: Option<(usize, usize, String)>) -> Self {
        FloodBasis {
            component,
            reference,
            covariate,
        }
    }
}

impl BlipBasis for FloodBasis {
    fn dim(&self) -> usize {
        4 + usize::from(self.covariate.is_some())
    }

    fn names(&self) -> Vec<String> {
        let mut v = vec![
            "intercept".to_string(),
            "calendar".into(),
            "lag".into(),
            "lag^2".into(),
        ];
        if let Some((_, lag, n)) = &self.covariate {
            v.push(format!("{n}[m-{lag}]"));
        }
        v
    }

    fn features(&self, h: &LBar<'_>, a: &[f64], m: usize, k: usize, out: &mut [f64]) {
        let ac = a[self.component];
        let lag = (k - m) as f64;
        out[0] = ac;
        out[1] = ac * (h.time_label() - self.reference) as f64;
        out[2] = ac * lag;
        out[3] = ac * lag * lag;
        if let Some((j, l, _)) = &self.covariate {
            out[4] = ac * h.covariate(m as i64 - *l as i64, *j).unwrap_or(0.0);
        }
    }
}

/// One term of a [`TermsBasis`]; each is multiplied by the treatment value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BlipTerm {
    Intercept,
    /// `(k-m)^power`.
    Lag { power: i32 },
    /// Calendar label of `m` minus `reference`.
    Calendar { reference: i64 },
    /// `Z_{m-lag}[name]`.
    Covariate {
        name: String,
        #[serde(default)]
        lag: usize,
    },
    /// `Z_{m-lag}[name] (k-m)`.
    CovariateByLag {
        name: String,
        #[serde(default)]
        lag: usize,
    },
    /// `1{m = anchor}`.
    Anchor { anchor: usize },
}

#[derive(Debug, Clone)]
enum TermR {
    Intercept,
    Lag(i32),
    Calendar(i64),
    Covariate(usize, usize),
    CovariateByLag(usize, usize),
    Anchor(usize),
}

/// Linear combination of simple terms, each multiplied by `a[component]`.
#[derive(Debug, Clone)]
pub struct TermsBasis {
    component: usize,
    terms: Vec<TermR>,
    names: Vec<String>,
}

impl TermsBasis {
    pub fn resolve(terms: &[BlipTerm], component: usize, data: &PanelDataset) -> Result<Self> {
        let mut out = Vec::new();
        let mut names = Vec::new();
        for t in terms {
            let (r, n) = match t {
                BlipTerm::Intercept => (TermR::Intercept, "intercept".to_string()),
                BlipTerm::Lag { power } => (TermR::Lag(*power), format!("lag^{power}")),
                BlipTerm::Calendar { reference } => (TermR::Calendar(*reference), format!("calendar-{reference}")),
                BlipTerm::Covariate { name, lag } => (
                    TermR::Covariate(covariate_index(data, name)?, *lag),
                    format!("{name}[m-{lag}]"),
                ),
                BlipTerm::CovariateByLag { name, lag } => (
                    TermR::CovariateByLag(covariate_index(data, name)?, *lag),
                    format!("{name}[m-{lag}]*lag"),
                ),
                BlipTerm::Anchor { anchor } => (TermR::Anchor(*anchor), format!("anchor={anchor}")),
            };
            out.push(r);
            names.push(n);
        }
        Ok(TermsBasis {
            component,
            terms: out,
            names,
        })
    }
}

impl BlipBasis for TermsBasis {
    fn dim(&self) -> usize {
        self.terms.len()
    }

    fn names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn features(&self, h: &LBar<'_>, a: &[f64], m: usize, k: usize, out: &mut [f64]) {
        let ac = a[self.component];
        let lag = (k - m) as f64;
        for (o, t) in out.iter_mut().zip(&self.terms) {
            let v = match *t {
                TermR::Intercept => 1.0,
                TermR::Lag(p) => lag.powi(p),
                TermR::Calendar(r) => (h.time_label() - r) as f64,
                TermR::Covariate(j, l) => h.covariate(m as i64 - l as i64, j).unwrap_or(0.0),
                TermR::CovariateByLag(j, l) => h.covariate(m as i64 - l as i64, j).unwrap_or(0.0) * lag,
                TermR::Anchor(t) => {
                    if m == t {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            *o = ac * v;
        }
    }
}

/// Concatenation of several bases (e.g. one per treatment component).
#[derive(Debug, Clone)]
pub struct StackBasis {
    blocks: Vec<Arc<dyn BlipBasis>>,
}

impl StackBasis {
    pub fn new(blocks: Vec<Arc<dyn BlipBasis>>) -> Self {
        StackBasis { blocks }
    }
}

impl BlipBasis for StackBasis {
    fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    fn names(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.names()).collect()
    }

    fn features(&self, h: &LBar<'_>, a: &[f64], m: usize, k: usize, out: &mut [f64]) {
        let mut off = 0;
        for b in &self.blocks {
            let d = b.dim();
            b.features(h, a, m, k, &mut out[off..off + d]);
            off += d;
        }
    }
}

// ---------------------------------------------------------------------------
// Serializable specs

fn one() -> usize {
    1
}

/// Named basis constructors with arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BasisSpec {
    PerPair {
        #[serde(default)]
        covariates: Vec<String>,
        #[serde(default)]
        component: Option<String>,
        #[serde(default)]
        min_anchor: usize,
    },
    Flood {
        reference_time: i64,
        #[serde(default)]
        covariate: Option<String>,
        #[serde(default = "one")]
        covariate_lag: usize,
        #[serde(default)]
        component: Option<String>,
    },
    Terms {
        terms: Vec<BlipTerm>,
        #[serde(default)]
        component: Option<String>,
    },
    Stack {
        blocks: Vec<BasisSpec>,
    },
    Custom {
        name: String,
    },
}

/// Bases registered by name for `Custom` specs.
pub type BasisRegistry = HashMap<String, Arc<dyn BlipBasis>>;

fn component(data: &PanelDataset, c: &Option<String>) -> Result<usize> {
    match c {
        Some(name) => treatment_index(data, name),
        None => Ok(0),
    }
}

impl BasisSpec {
    pub fn build(&self, data: &PanelDataset, registry: Option<&BasisRegistry>) -> Result<Arc<dyn BlipBasis>> {
        Ok(match self {
            BasisSpec::PerPair {
                covariates,
                component: c,
                min_anchor,
            } => {
                let covs = covariates
                    .iter()
                    .map(|n| Ok((covariate_index(data, n)?, n.clone())))
                    .collect::<Result<Vec<_>>>()?;
                Arc::new(PerPairBasis::new(data.horizon(), component(data, c)?, covs, *min_anchor))
            }
            BasisSpec::Flood {
                reference_time,
                covariate,
                covariate_lag,
                component: c,
            } => {
                let cov = match covariate {
                    Some(n) => Some((covariate_index(data, n)?, *covariate_lag, n.clone())),
                    None => None,
                };
                Arc::new(FloodBasis::new(component(data, c)?, *reference_time, cov))
            }
            BasisSpec::Terms { terms, component: c } => {
                Arc::new(TermsBasis::resolve(terms, component(data, c)?, data)?)
            }
            BasisSpec::Stack { blocks } => Arc::new(StackBasis::new(
                blocks
                    .iter()
                    .map(|b| b.build(data, registry))
                    .collect::<Result<Vec<_>>>()?,
            )),
            BasisSpec::Custom { name } => registry
                .and_then(|r| r.get(name).cloned())
                .ok_or_else(|| Error::Config(format!("no custom basis registered under `{name}`")))?,
        })
    }
}

/// Serializable blip model: `{flavor, basis, d}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub flavor: Flavor,
    pub basis: BasisSpec,
    /// Treatment components defining initiation; all components when empty.
    #[serde(default)]
    pub initiation: Vec<String>,
    #[serde(default)]
    pub regime: Option<RegimeSpec>,
    /// Expected parameter dimension, checked when present.
    #[serde(default)]
    pub d: Option<usize>,
}

impl ModelSpec {
    pub fn build(&self, data: &PanelDataset, registry: Option<&BasisRegistry>) -> Result<BlipModel> {
        let basis = self.basis.build(data, registry)?;
        if let Some(d) = self.d {
            if d != basis.dim() {
                return Err(Error::Config(format!(
                    "model declares d={d} but the basis has dimension {}",
                    basis.dim()
                )));
            }
        }
        let initiation = if self.initiation.is_empty() {
            (0..data.n_treatments()).collect()
        } else {
            self.initiation
                .iter()
                .map(|n| treatment_index(data, n))
                .collect::<Result<Vec<_>>>()?
        };
        let regime = match &self.regime {
            Some(r) => Some(RegimeSpec::new(r.tau.clone(), r.actions.clone())?),
            None => None,
        };
        if self.flavor == Flavor::Regime && regime.is_none() {
            return Err(Error::Config("regime models need utility weights and an action grid".into()));
        }
        Ok(BlipModel {
            flavor: self.flavor,
            form: BlipForm::Linear(basis),
            initiation,
            regime,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensitivity::ConstantBias;

    fn panel(y: &[&[f64]], a: &[&[f64]], z: &[&[f64]], labels: Vec<i64>) -> PanelDataset {
        let n = y.len();
        PanelDataset::new(
            (0..n).map(|i| i.to_string()).collect(),
            labels,
            "y",
            vec!["d".into()],
            vec!["rate".into()],
            y.iter().flat_map(|r| r.iter().copied()).collect(),
            a.iter().flat_map(|r| r.iter().copied()).collect(),
            z.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn flood_basis_hand_value() {
        // m = 1990, k = 1992, rate_{m-1} = 0.2, psi = 1
        let labels: Vec<i64> = (1988..=1992).collect();
        let d = panel(
            &[&[0.0; 5]],
            &[&[0.0, 0.0, 1.0, 1.0, 1.0]],
            &[&[0.0, 0.2, 0.0, 0.0, 0.0]],
            labels,
        );
        let b = FloodBasis::new(0, 1980, Some((0, 1, "rate".into())));
        let model = BlipModel::linear(Flavor::Standard, Arc::new(b));
        let h = d.history(0, 2);
        let v = model.eval(&[1.0; 5], &h.lbar(), &[1.0], 2, 4).unwrap();
        assert!((v - 17.2).abs() < 1e-12, "{v}");
        assert_eq!(model.eval(&[1.0; 5], &h.lbar(), &[0.0], 2, 4).unwrap(), 0.0);
        assert_eq!(model.eval(&[0.0; 5], &h.lbar(), &[1.0], 2, 4).unwrap(), 0.0);
        assert!(model.eval(&[1.0; 5], &h.lbar(), &[1.0], 2, 2).is_err());
        assert!(model.eval(&[1.0; 4], &h.lbar(), &[1.0], 2, 3).is_err());
    }

    #[test]
    fn standard_transform_hand_expansion() {
        // blip a * psi0 * (k - m)
        let d = panel(
            &[&[1.0, 2.0, 4.0, 8.0]],
            &[&[1.0, 0.0, 1.0, 1.0]],
            &[&[0.0; 4]],
            vec![0, 1, 2, 3],
        );
        let basis = TermsBasis::resolve(&[BlipTerm::Lag { power: 1 }], 0, &d).unwrap();
        let model = BlipModel::linear(Flavor::Standard, Arc::new(basis));
        let psi = [0.5];
        // H_03 = Y_3 - (A0*3 + A1*2 + A2*1)*0.5 = 8 - (3 + 0 + 1)*0.5
        let h = blip_down_standard(&model, &psi, &d, 0, 0, 3).unwrap();
        assert!((h.value - 6.0).abs() < 1e-12);
        assert_eq!(blip_down_standard(&model, &psi, &d, 0, 2, 2).unwrap().value, 4.0);
        // additivity H_mk = H_{m+1,k} - gamma_mk
        let h13 = blip_down_standard(&model, &psi, &d, 0, 1, 3).unwrap().value;
        assert!((h.value - (h13 - 1.0 * 3.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn coarse_transform_uses_only_initiation() {
        let d = panel(
            &[&[1.0, 2.0, 4.0], &[1.0, 1.0, 1.0]],
            &[&[0.0, 1.0, 1.0], &[0.0, 0.0, 0.0]],
            &[&[0.0; 3], &[0.0; 3]],
            vec![0, 1, 2],
        );
        let model = BlipModel::linear(Flavor::Coarse, Arc::new(PerPairBasis::new(2, 0, vec![], 0)));
        let psi = [10.0, 20.0, 3.0];
        assert_eq!(blip_down_coarse(&model, &psi, &d, 0, 0, 2).unwrap().value, 1.0);
        // T=1 < m=2: no subtraction
        assert_eq!(blip_down_coarse(&model, &psi, &d, 0, 2, 2).unwrap().value, 4.0);
        assert_eq!(blip_down_coarse(&model, &psi, &d, 1, 0, 2).unwrap().value, 1.0);
        assert!(blip_down_standard(&model, &psi, &d, 0, 0, 2).is_err());
    }

    #[test]
    fn multiplicative_halving_and_overflow() {
        let d = panel(&[&[3.0, 8.0]], &[&[1.0, 1.0]], &[&[0.0; 2]], vec![0, 1]);
        let basis = TermsBasis::resolve(&[BlipTerm::Intercept], 0, &d).unwrap();
        let model = BlipModel::linear(Flavor::Multiplicative, Arc::new(basis));
        let h = blip_down_multiplicative(&model, &[2f64.ln()], &d, 0, 0, 1).unwrap();
        assert!((h.value - 4.0).abs() < 1e-12);
        assert!(matches!(
            blip_down_multiplicative(&model, &[800.0], &d, 0, 0, 1),
            Err(Error::Overflow(_))
        ));
    }

    #[test]
    fn bias_adjustment_hand_expansion() {
        // never treated, A_j = 0, p = 0.3, constant c = 2: H + (#j with T>=j) p c
        let d = panel(&[&[1.0, 2.0, 4.0]], &[&[0.0, 0.0, 0.0]], &[&[0.0; 3]], vec![0, 1, 2]);
        let model = BlipModel::linear(Flavor::Coarse, Arc::new(PerPairBasis::new(2, 0, vec![], 0)));
        let c = ConstantBias { c0: 2.0 };
        let h = bias_adjusted_coarse(&model, &[0.0; 3], &d, 0, 0, 2, &c, &|_| 0.3).unwrap();
        assert!((h.value - (4.0 + 3.0 * 0.3 * 2.0)).abs() < 1e-12);
        let zero = ConstantBias { c0: 0.0 };
        let h0 = bias_adjusted_coarse(&model, &[0.0; 3], &d, 0, 0, 2, &zero, &|_| 0.3).unwrap();
        assert_eq!(h0.value, 4.0);
    }

    #[test]
    fn optimal_action_tie_breaks_to_baseline() {
        let d = panel(&[&[0.0; 3]], &[&[0.0; 3]], &[&[0.0; 3]], vec![0, 1, 2]);
        let basis = TermsBasis::resolve(&[BlipTerm::Intercept], 0, &d).unwrap();
        let model = BlipModel::linear(Flavor::Regime, Arc::new(basis))
            .with_regime(RegimeSpec::binary(vec![0.0, 1.0, 1.0]).unwrap());
        let l = d.history(0, 0).lbar();
        assert_eq!(model.optimal_action(&[0.0], &l, 0).unwrap(), &[0.0]);
        assert_eq!(model.optimal_action(&[1.0], &l, 0).unwrap(), &[1.0]);
        assert_eq!(model.optimal_action(&[-1.0], &l, 0).unwrap(), &[0.0]);
    }

    #[test]
    fn spec_roundtrip() {
        let json = r#"{"flavor":"coarse","basis":{"type":"per_pair","covariates":["rate"]}}"#;
        let spec: ModelSpec = serde_json::from_str(json).unwrap();
        let d = panel(&[&[0.0; 3]], &[&[0.0; 3]], &[&[0.0; 3]], vec![0, 1, 2]);
        let model = spec.build(&d, None).unwrap();
        assert_eq!(model.dim(), 4);
        assert_eq!(model.names()[3], "beta[rate]");
        let back: ModelSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
