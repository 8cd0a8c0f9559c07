//! Optimal-regime estimation: g-estimation with the argmax-corrected
//! transform, the fitted decision rule, and the value of following it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blip::{blip_down_regime, BlipForm, BlipModel, Flavor, RegimeSpec};
use crate::derived::{ratio_estimate, RatioTerm};
use crate::error::{Error, Result};
use crate::gestimation::{self, bootstrap, BootstrapResult, FitOptions, GEstimate};
use crate::nuisance::NuisanceSpec;
use crate::panel::{LBar, PanelDataset};

const Z95: f64 = 1.959_963_984_540_054;

/// Identifying premises of optimal-regime estimates. They concern the
/// data-generating process and cannot be checked from the data.
pub const ASSUMPTIONS: &str = "Optimal-regime estimates assume: \
(1) sequential exchangeability given the unmeasured U: treatment at each time is independent of \
counterfactual outcomes given the measured history and U; \
(2) no additive effect modification by U: blips do not depend on U given the measured history; \
(3) conditional parallel trends hold for untreated outcomes under every regime, not only under \
the observed treatment process. The third premise is strong: it restricts how U may shift \
outcome trends along every treatment path the rule could follow.";

/// Utility weights `τ_0..τ_K` of `Y = Σ τ_m Y_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UtilityWeights(Vec<f64>);

impl UtilityWeights {
    pub fn new(tau: Vec<f64>) -> Result<Self> {
        if tau.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("utility weights must be finite".into()));
        }
        if tau.iter().all(|t| *t == 0.0) {
            return Err(Error::Config("utility weights are all zero".into()));
        }
        Ok(UtilityWeights(tau))
    }

    /// `τ = e_k` on a horizon `K`.
    pub fn one_hot(k: usize, horizon: usize) -> Result<Self> {
        if k > horizon {
            return Err(Error::Config(format!("time {k} beyond horizon {horizon}")));
        }
        let mut t = vec![0.0; horizon + 1];
        t[k] = 1.0;
        Ok(UtilityWeights(t))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for UtilityWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        UtilityWeights::new(v)
    }
}

impl From<UtilityWeights> for Vec<f64> {
    fn from(w: UtilityWeights) -> Self {
        w.0
    }
}

fn regime_spec(model: &BlipModel) -> Result<&RegimeSpec> {
    if model.flavor != Flavor::Regime {
        return Err(Error::Config(format!(
            "optimal-regime estimation needs a regime model, got {:?}",
            model.flavor
        )));
    }
    model
        .regime
        .as_ref()
        .ok_or_else(|| Error::Config("regime model has no utility weights / action grid".into()))
}

fn check_regime(data: &PanelDataset, model: &BlipModel) -> Result<()> {
    let reg = regime_spec(model)?;
    if reg.actions.is_empty() {
        return Err(Error::Config("empty action grid".into()));
    }
    if let Some(a) = reg.actions.iter().find(|a| a.len() != data.n_treatments()) {
        return Err(Error::Dimension(format!(
            "action {a:?} has {} components, data has {}",
            a.len(),
            data.n_treatments()
        )));
    }
    if reg.tau.len() != data.n_times() {
        return Err(Error::Dimension(format!(
            "{} utility weights for {} time points",
            reg.tau.len(),
            data.n_times()
        )));
    }
    UtilityWeights::new(reg.tau.clone())?;
    Ok(())
}

/// Fitted optimal-regime model with its premises.
#[derive(Debug, Clone, Serialize)]
pub struct RegimeFit {
    pub estimate: GEstimate,
    pub tau: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub assumptions: String,
}

/// g-estimate of `ψ_{g_opt}`; the argmax is re-evaluated at every candidate.
pub fn fit_optimal_regime(
    data: &PanelDataset,
    model: &BlipModel,
    spec: &NuisanceSpec,
    opts: &FitOptions,
) -> Result<RegimeFit> {
    check_regime(data, model)?;
    let reg = regime_spec(model)?;
    let estimate = gestimation::fit(data, model, spec, opts)?;
    Ok(RegimeFit {
        estimate,
        tau: reg.tau.clone(),
        actions: reg.actions.clone(),
        assumptions: ASSUMPTIONS.to_string(),
    })
}

/// `argmax_a Σ_{j>m} τ_j γ_mj(h, a; ψ)`, smallest action on ties.
pub fn optimal_action(model: &BlipModel, psi: &[f64], h: &LBar<'_>, m: usize) -> Result<Vec<f64>> {
    model.optimal_action(psi, h, m).map(<[f64]>::to_vec)
}

/// Optimal action at `m` for a hand-specified history: covariates at
/// `0..=m`, treatments and outcomes at `0..m`. Names and time labels are
/// taken from `template`.
pub fn optimal_action_for_history(
    model: &BlipModel,
    psi: &[f64],
    template: &PanelDataset,
    m: usize,
    covariates: &[Vec<f64>],
    treatments: &[Vec<f64>],
    outcomes: &[f64],
) -> Result<Vec<f64>> {
    let nt = template.n_times();
    let p = template.n_treatments();
    let q = template.n_covariates();
    if m >= nt || covariates.len() != m + 1 || treatments.len() != m || outcomes.len() != m {
        return Err(Error::Dimension(format!(
            "history at m={m} needs {} covariate rows and {m} treatment rows and outcomes",
            m + 1
        )));
    }
    let mut y = vec![0.0; nt];
    let mut a = vec![0.0; nt * p];
    let mut z = vec![0.0; nt * q];
    for t in 0..=m {
        if covariates[t].len() != q {
            return Err(Error::Dimension(format!("covariate row {t} needs {q} values")));
        }
        z[t * q..(t + 1) * q].copy_from_slice(&covariates[t]);
        if t < m {
            if treatments[t].len() != p {
                return Err(Error::Dimension(format!("treatment row {t} needs {p} values")));
            }
            a[t * p..(t + 1) * p].copy_from_slice(&treatments[t]);
            y[t] = outcomes[t];
        }
    }
    let d = PanelDataset::new(
        vec!["history".into()],
        template.time_labels().to_vec(),
        template.outcome_name(),
        template.treatment_names().to_vec(),
        template.covariate_names().to_vec(),
        y,
        a,
        z,
    )?;
    optimal_action(model, psi, &d.history(0, m).lbar(), m)
}

/// One row of an exported decision table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub time: usize,
    /// `Σ_{j>m} τ_j B_mj(h, a)` for every action on the grid (linear
    /// models), otherwise empty.
    pub features: Vec<Vec<f64>>,
    /// `Σ_{j>m} τ_j γ_mj(h, a; ψ̂)` for every action.
    pub scores: Vec<f64>,
    pub action: Vec<f64>,
    /// Subjects whose history falls in this row.
    pub count: usize,
    /// A representative subject with its covariates at `m` and treatment at `m-1`.
    pub example_subject: String,
    pub example_covariates: BTreeMap<String, f64>,
    pub example_previous_treatment: Option<Vec<f64>>,
}

/// Fitted decision rule over the histories observed in a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRule {
    pub parameter_names: Vec<String>,
    pub psi: Vec<f64>,
    pub tau: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub rows: Vec<DecisionRow>,
    pub assumptions: String,
}

impl RegimeRule {
    /// Groups observed histories by their per-action score inputs and
    /// records the chosen action for each group.
    pub fn from_fit(model: &BlipModel, psi: &[f64], data: &PanelDataset) -> Result<RegimeRule> {
        check_regime(data, model)?;
        let reg = regime_spec(model)?;
        let kk = data.horizon();
        let mut rows: Vec<DecisionRow> = Vec::new();
        let mut index: BTreeMap<(usize, Vec<u64>), usize> = BTreeMap::new();
        for m in 0..kk {
            for i in 0..data.n_subjects() {
                let h = data.history(i, m).lbar();
                let mut features = Vec::new();
                let mut scores = Vec::new();
                for a in &reg.actions {
                    let mut s = 0.0;
                    let mut f = match &model.form {
                        BlipForm::Linear(b) => vec![0.0; b.dim()],
                        BlipForm::General(_) => vec![],
                    };
                    for j in m + 1..=kk {
                        let t = reg.tau[j];
                        if t == 0.0 {
                            continue;
                        }
                        s += t * model.eval(psi, &h, a, m, j)?;
                        if let BlipForm::Linear(b) = &model.form {
                            if a.iter().any(|v| *v != 0.0) {
                                let mut fj = vec![0.0; b.dim()];
                                b.features(&h, a, m, j, &mut fj);
                                for (x, y) in f.iter_mut().zip(&fj) {
                                    *x += t * y;
                                }
                            }
                        }
                    }
                    features.push(f);
                    scores.push(s);
                }
                let key_src: Vec<f64> = if features.iter().all(|f| f.is_empty()) {
                    scores.clone()
                } else {
                    features.concat()
                };
                let key = (m, key_src.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                if let Some(&r) = index.get(&key) {
                    rows[r].count += 1;
                    continue;
                }
                let action = optimal_action(model, psi, &h, m)?;
                index.insert(key, rows.len());
                rows.push(DecisionRow {
                    time: m,
                    features,
                    scores,
                    action,
                    count: 1,
                    example_subject: data.subject_id(i).to_string(),
                    example_covariates: data
                        .covariate_names()
                        .iter()
                        .cloned()
                        .zip(data.covariates(i, m).iter().copied())
                        .collect(),
                    example_previous_treatment: (m > 0).then(|| data.treatment(i, m - 1).to_vec()),
                });
            }
        }
        Ok(RegimeRule {
            parameter_names: model.names(),
            psi: psi.to_vec(),
            tau: reg.tau.clone(),
            actions: reg.actions.clone(),
            rows,
            assumptions: ASSUMPTIONS.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Estimated value of the fitted rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeValue {
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci: Option<[f64; 2]>,
    pub ci_method: Option<String>,
    /// `Σ τ_k P_n[Y_k]` under the observed treatments, for comparison.
    pub observed: f64,
    pub assumptions: String,
}

/// `Σ_k τ_k P_n[H_0k(ψ̂)]` with a delta-method interval.
pub fn regime_value(data: &PanelDataset, model: &BlipModel, fit: &GEstimate) -> Result<RegimeValue> {
    check_regime(data, model)?;
    let tau = regime_spec(model)?.tau.clone();
    let kk = data.horizon();
    let n = data.n_subjects();
    let tau_f = tau.clone();
    let term = RatioTerm {
        weights: vec![1.0; n],
        f: Box::new(move |psi: &[f64], i: usize| {
            let mut v = 0.0;
            for (k, t) in tau_f.iter().enumerate().take(kk + 1) {
                if *t != 0.0 {
                    v += t * blip_down_regime(model, psi, data, i, 0, k)?.value;
                }
            }
            Ok(v)
        }),
    };
    let (estimate, se, _) = ratio_estimate(&term, fit, n as f64, true)?;
    let observed = (0..n)
        .map(|i| tau.iter().enumerate().map(|(k, t)| t * data.outcome(i, k)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    Ok(RegimeValue {
        estimate,
        se,
        ci: se.map(|s| [estimate - Z95 * s, estimate + Z95 * s]),
        ci_method: se.map(|_| "delta method (approximate)".into()),
        observed,
        assumptions: ASSUMPTIONS.to_string(),
    })
}

/// Value with a bootstrap interval that refits `ψ̂_{g_opt}` in every replicate.
pub fn regime_value_bootstrap(
    data: &PanelDataset,
    model: &BlipModel,
    spec: &NuisanceSpec,
    opts: &FitOptions,
    replicates: usize,
    seed: u64,
) -> Result<(RegimeValue, BootstrapResult)> {
    let fit = fit_optimal_regime(data, model, spec, opts)?;
    let mut value = regime_value(data, model, &fit.estimate)?;
    let boot = bootstrap(data.n_subjects(), &[value.estimate], replicates, seed, |idx, _| {
        let d = data.select_subjects(idx)?;
        let f = gestimation::fit(&d, model, spec, opts)?;
        Ok(vec![regime_value(&d, model, &f)?.estimate])
    })?;
    value.se = Some(boot.se[0]);
    value.ci = Some(boot.percentile_ci[0]);
    value.ci_method = Some(format!(
        "bootstrap percentile ({} of {} replicates, seed {seed})",
        boot.replicates.len(),
        boot.requested
    ));
    Ok((value, boot))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::blip::{BlipTerm, TermsBasis};
    use crate::simulation::{entry, simulate_panel};

    fn regime_data(n: usize) -> (PanelDataset, BlipModel, NuisanceSpec) {
        let e = entry("regime").unwrap();
        let data = simulate_panel(&e.dgp, n, 5).unwrap();
        let model = e.model.build(&data, None).unwrap();
        (data, model, e.nuisance.clone())
    }

    #[test]
    fn zero_parameter_gives_baseline_action() {
        let (data, model, _) = regime_data(50);
        let psi = vec![0.0; model.dim()];
        for i in 0..data.n_subjects() {
            for m in 0..data.horizon() {
                let a = optimal_action(&model, &psi, &data.history(i, m).lbar(), m).unwrap();
                assert_eq!(a, vec![0.0]);
            }
        }
    }

    #[test]
    fn dominant_action_is_chosen_and_scale_invariant() {
        let (data, model, _) = regime_data(50);
        let psi = vec![0.4, -0.9, 0.6];
        let mut scaled = model.clone();
        if let Some(r) = scaled.regime.as_mut() {
            r.tau.iter_mut().for_each(|t| *t *= 3.5);
        }
        for i in 0..data.n_subjects() {
            for m in 0..data.horizon() {
                let h = data.history(i, m).lbar();
                assert_eq!(
                    optimal_action(&model, &psi, &h, m).unwrap(),
                    optimal_action(&scaled, &psi, &h, m).unwrap()
                );
            }
        }
        let dominant = vec![5.0, 0.0, 0.0];
        let h = data.history(0, 0).lbar();
        assert_eq!(optimal_action(&model, &dominant, &h, 0).unwrap(), vec![1.0]);
        let negative = vec![-5.0, 0.0, 0.0];
        assert_eq!(optimal_action(&model, &negative, &h, 0).unwrap(), vec![0.0]);
    }

    #[test]
    fn one_hot_weights_give_blipped_mean() {
        let (data, model, spec) = regime_data(400);
        let mut m1 = model.clone();
        m1.regime = Some(RegimeSpec::binary(UtilityWeights::one_hot(2, 2).unwrap().into()).unwrap());
        let fit = gestimation::fit(&data, &m1, &spec, &FitOptions::default()).unwrap();
        let v = regime_value(&data, &m1, &fit).unwrap();
        let direct = (0..data.n_subjects())
            .map(|i| blip_down_regime(&m1, &fit.psi_hat, &data, i, 0, 2).unwrap().value)
            .sum::<f64>()
            / data.n_subjects() as f64;
        assert!((v.estimate - direct).abs() < 1e-12);
    }

    #[test]
    fn single_period_rule_matches_enumeration() {
        // K = 1: treat iff τ_1 γ_01(h, 1) > 0
        let e = entry("regime").unwrap();
        let mut dgp = e.dgp.clone();
        dgp.horizon = 1;
        dgp.trend.drift.truncate(1);
        dgp.treatment.intercept.truncate(2);
        dgp.utility = Some(vec![0.0, 1.0]);
        let data = simulate_panel(&dgp, 200, 3).unwrap();
        let basis = TermsBasis::resolve(
            &[BlipTerm::Intercept, BlipTerm::Covariate { name: "l".into(), lag: 0 }],
            0,
            &data,
        )
        .unwrap();
        let model = BlipModel::linear(Flavor::Regime, Arc::new(basis))
            .with_regime(RegimeSpec::binary(vec![0.0, 1.0]).unwrap());
        let psi = [-0.3, 0.8];
        for i in 0..data.n_subjects() {
            let h = data.history(i, 0).lbar();
            let l = data.covariates(i, 0)[0];
            let expected = if psi[0] + psi[1] * l > 0.0 { 1.0 } else { 0.0 };
            assert_eq!(optimal_action(&model, &psi, &h, 0).unwrap(), vec![expected]);
        }
    }

    #[test]
    fn synthetic_history_matches_observed_history() {
        let (data, model, _) = regime_data(30);
        let psi = vec![-1.6, 1.0, 1.2];
        for i in 0..data.n_subjects() {
            let m = 1;
            let cov: Vec<Vec<f64>> = (0..=m).map(|t| data.covariates(i, t).to_vec()).collect();
            let tr: Vec<Vec<f64>> = (0..m).map(|t| data.treatment(i, t).to_vec()).collect();
            let y: Vec<f64> = (0..m).map(|t| data.outcome(i, t)).collect();
            let a = optimal_action_for_history(&model, &psi, &data, m, &cov, &tr, &y).unwrap();
            assert_eq!(a, optimal_action(&model, &psi, &data.history(i, m).lbar(), m).unwrap());
        }
    }

    #[test]
    fn decision_table_round_trips_and_covers_subjects() {
        let (data, model, spec) = regime_data(500);
        let fit = fit_optimal_regime(&data, &model, &spec, &FitOptions::default()).unwrap();
        assert!(fit.assumptions.contains("parallel trends"));
        let rule = RegimeRule::from_fit(&model, &fit.estimate.psi_hat, &data).unwrap();
        let total: usize = rule.rows.iter().map(|r| r.count).sum();
        assert_eq!(total, data.n_subjects() * data.horizon());
        for r in &rule.rows {
            assert!(rule.actions.contains(&r.action));
        }
        let back: RegimeRule = serde_json::from_str(&rule.to_json().unwrap()).unwrap();
        assert_eq!(back, rule);
    }

    #[test]
    fn rejects_non_regime_models() {
        let e = entry("homogeneous").unwrap();
        let data = simulate_panel(&e.dgp, 100, 1).unwrap();
        let model = e.model.build(&data, None).unwrap();
        assert!(fit_optimal_regime(&data, &model, &e.nuisance, &FitOptions::default()).is_err());
    }
}
