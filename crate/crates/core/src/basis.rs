//! Feature maps over the adjustment history `L̄_m`, shared by nuisance
//! models and blip bases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{LBar, PanelDataset};

fn one() -> usize {
    1
}

fn one_i() -> i32 {
    1
}

/// One named term of a history basis. References to times before 0 give 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HistoryTerm {
    Intercept,
    /// `Z_{m-lag}[name]^power`.
    Covariate {
        name: String,
        #[serde(default)]
        lag: usize,
        #[serde(default = "one_i")]
        power: i32,
    },
    /// `Y_{m-lag}`, `lag >= 1`.
    Outcome {
        #[serde(default = "one")]
        lag: usize,
    },
    /// `A_{m-lag}[component]`, `lag >= 1`.
    Treatment {
        component: String,
        #[serde(default = "one")]
        lag: usize,
    },
    /// `A_0[c], .., A_{m-1}[c]`; length varies with `m`.
    PastTreatments { component: String },
    /// `Z_0[name], .., Z_m[name]`; length varies with `m`.
    CovariateHistory { name: String },
    /// `1{A_j[c] != 0 for some j < m}`.
    EverTreated { component: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Resolved {
    Intercept,
    Covariate { j: usize, lag: usize, power: i32 },
    Outcome { lag: usize },
    Treatment { c: usize, lag: usize },
    PastTreatments { c: usize },
    CovariateHistory { j: usize },
    EverTreated { c: usize },
}

/// A history basis resolved against a dataset's column names.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBasis {
    terms: Vec<Resolved>,
    labels: Vec<HistoryTerm>,
}

pub(crate) fn covariate_index(data: &PanelDataset, name: &str) -> Result<usize> {
    let bare = name.strip_prefix("z_").unwrap_or(name);
    data.covariate_index(bare)
        .ok_or_else(|| Error::Config(format!("unknown covariate `{name}`")))
}

pub(crate) fn treatment_index(data: &PanelDataset, name: &str) -> Result<usize> {
    let bare = name.strip_prefix("a_").unwrap_or(name);
    data.treatment_index(bare)
        .ok_or_else(|| Error::Config(format!("unknown treatment component `{name}`")))
}

impl HistoryBasis {
    pub fn resolve(terms: &[HistoryTerm], data: &PanelDataset) -> Result<Self> {
        let mut out = Vec::with_capacity(terms.len());
        for t in terms {
            out.push(match t {
                HistoryTerm::Intercept => Resolved::Intercept,
                HistoryTerm::Covariate { name, lag, power } => Resolved::Covariate {
                    j: covariate_index(data, name)?,
                    lag: *lag,
                    power: *power,
                },
                HistoryTerm::Outcome { lag } => {
                    if *lag == 0 {
                        return Err(Error::Config(
                            "outcome terms need lag >= 1: the current outcome is not part of the history".into(),
                        ));
                    }
                    Resolved::Outcome { lag: *lag }
                }
                HistoryTerm::Treatment { component, lag } => {
                    if *lag == 0 {
                        return Err(Error::Config(
                            "treatment terms need lag >= 1: the current treatment is not part of the history".into(),
                        ));
                    }
                    Resolved::Treatment {
                        c: treatment_index(data, component)?,
                        lag: *lag,
                    }
                }
                HistoryTerm::PastTreatments { component } => Resolved::PastTreatments {
                    c: treatment_index(data, component)?,
                },
                HistoryTerm::CovariateHistory { name } => Resolved::CovariateHistory {
                    j: covariate_index(data, name)?,
                },
                HistoryTerm::EverTreated { component } => Resolved::EverTreated {
                    c: treatment_index(data, component)?,
                },
            });
        }
        Ok(HistoryBasis {
            terms: out,
            labels: terms.to_vec(),
        })
    }

    pub fn terms(&self) -> &[HistoryTerm] {
        &self.labels
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Number of features produced at time `m`.
    pub fn dim(&self, m: usize) -> usize {
        self.terms
            .iter()
            .map(|t| match t {
                Resolved::PastTreatments { .. } => m,
                Resolved::CovariateHistory { .. } => m + 1,
                _ => 1,
            })
            .sum()
    }

    /// Human-readable column names at time `m`.
    pub fn column_names(&self, m: usize) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.labels {
            match t {
                HistoryTerm::Intercept => out.push("intercept".into()),
                HistoryTerm::Covariate { name, lag, power } => {
                    let mut s = format!("{name}[m-{lag}]");
                    if *power != 1 {
                        s.push_str(&format!("^{power}"));
                    }
                    out.push(s)
                }
                HistoryTerm::Outcome { lag } => out.push(format!("y[m-{lag}]")),
                HistoryTerm::Treatment { component, lag } => out.push(format!("{component}[m-{lag}]")),
                HistoryTerm::PastTreatments { component } => {
                    out.extend((0..m).map(|j| format!("{component}[{j}]")))
                }
                HistoryTerm::CovariateHistory { name } => out.extend((0..=m).map(|j| format!("{name}[{j}]"))),
                HistoryTerm::EverTreated { component } => out.push(format!("ever_{component}")),
            }
        }
        out
    }

    /// Appends the features of `h` to `out`.
    pub fn eval_into(&self, h: &LBar<'_>, out: &mut Vec<f64>) {
        let m = h.time() as i64;
        for t in &self.terms {
            match *t {
                Resolved::Intercept => out.push(1.0),
                Resolved::Covariate { j, lag, power } => {
                    let v = h.covariate(m - lag as i64, j).unwrap_or(0.0);
                    out.push(if power == 1 { v } else { v.powi(power) });
                }
                Resolved::Outcome { lag } => out.push(h.outcome(m - lag as i64).unwrap_or(0.0)),
                Resolved::Treatment { c, lag } => {
                    out.push(h.treatment(m - lag as i64).map(|a| a[c]).unwrap_or(0.0))
                }
                Resolved::PastTreatments { c } => {
                    for t in 0..m {
                        out.push(h.treatment(t).map(|a| a[c]).unwrap_or(0.0));
                    }
                }
                Resolved::CovariateHistory { j } => {
                    for t in 0..=m {
                        out.push(h.covariate(t, j).unwrap_or(0.0));
                    }
                }
                Resolved::EverTreated { c } => {
                    let ever = (0..m).any(|t| h.treatment(t).is_some_and(|a| a[c] != 0.0));
                    out.push(if ever { 1.0 } else { 0.0 });
                }
            }
        }
    }

    pub fn eval(&self, h: &LBar<'_>) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim(h.time()));
        self.eval_into(h, &mut v);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> PanelDataset {
        PanelDataset::new(
            vec!["s".into()],
            vec![0, 1, 2],
            "y",
            vec!["d".into()],
            vec!["x".into()],
            vec![1.0, 2.0, 3.0],
            vec![0.0, 1.0, 1.0],
            vec![0.5, 0.6, 0.7],
        )
        .unwrap()
    }

    #[test]
    fn quadratic_covariate_basis() {
        let d = data();
        let terms: Vec<HistoryTerm> = serde_json::from_str(
            r#"[{"type":"intercept"},{"type":"covariate","name":"x"},{"type":"covariate","name":"x","power":2}]"#,
        )
        .unwrap();
        let b = HistoryBasis::resolve(&terms, &d).unwrap();
        let v = b.eval(&d.history(0, 1).lbar());
        assert_eq!(v.len(), 3);
        assert!((v[0] - 1.0).abs() < 1e-15 && (v[1] - 0.6).abs() < 1e-15 && (v[2] - 0.36).abs() < 1e-12);
    }

    #[test]
    fn variable_length_terms_and_null_history() {
        let d = data();
        let terms = vec![
            HistoryTerm::PastTreatments { component: "d".into() },
            HistoryTerm::Outcome { lag: 1 },
            HistoryTerm::CovariateHistory { name: "x".into() },
        ];
        let b = HistoryBasis::resolve(&terms, &d).unwrap();
        assert_eq!(b.eval(&d.history(0, 0).lbar()), vec![0.0, 0.5]);
        assert_eq!(b.eval(&d.history(0, 2).lbar()), vec![0.0, 1.0, 2.0, 0.5, 0.6, 0.7]);
        assert_eq!(b.dim(2), 6);
        assert_eq!(b.column_names(2).len(), 6);
    }

    #[test]
    fn current_outcome_is_refused() {
        assert!(HistoryBasis::resolve(&[HistoryTerm::Outcome { lag: 0 }], &data()).is_err());
    }
}
