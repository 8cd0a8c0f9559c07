//! Counterfactual-arm oracles computed by Monte Carlo over shared draws.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{DgpConfig, Latent, Path};
use crate::error::{Error, Result};

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl MeanSe {
    pub fn from_values(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return MeanSe {
                mean: f64::NAN,
                se: f64::NAN,
                count: 0,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        MeanSe {
            mean,
            se: (var / n as f64).sqrt(),
            count: n,
        }
    }
}

/// `E[f]` over `mc` simulated subjects, skipping subjects where `f` is `None`.
pub fn expectation<F>(cfg: &DgpConfig, mc: usize, seed: u64, f: F) -> MeanSe
where
    F: Fn(&Latent, &Path) -> Option<f64> + Sync,
{
    let v: Vec<Option<f64>> = (0..mc)
        .into_par_iter()
        .map(|i| {
            let lat = cfg.latent(seed, i);
            let nat = cfg.natural(&lat);
            f(&lat, &nat)
        })
        .collect();
    let v: Vec<f64> = v.into_iter().flatten().collect();
    MeanSe::from_values(&v)
}

/// Oracle targets shared by every DGP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTruth {
    pub name: String,
    pub mc_size: usize,
    pub seed: u64,
    /// `E[Y_k(0)]`, `k = 0..K`.
    pub never_treated: Vec<MeanSe>,
    /// `E[Y_k]`.
    pub observed: Vec<MeanSe>,
    /// `E[Y_k - Y_k(0)]`.
    pub observed_vs_never: Vec<MeanSe>,
    /// `E[Y_k(0) | T = m]` keyed by `"m,k"`.
    pub cohort_never: BTreeMap<String, MeanSe>,
}

/// Simulates counterfactual arms for the standard targets.
pub fn oracle_truth(cfg: &DgpConfig, mc: usize, seed: u64) -> Result<OracleTruth> {
    cfg.validate()?;
    let kk = cfg.horizon;
    let rows: Vec<(Vec<f64>, Vec<f64>, Option<usize>)> = (0..mc)
        .into_par_iter()
        .map(|i| {
            let lat = cfg.latent(seed, i);
            let nat = cfg.natural(&lat);
            let never = cfg.never(&lat, &nat);
            let t = nat.a.iter().position(|v| v.iter().any(|x| *x != 0.0));
            (nat.y, never, t)
        })
        .collect();
    let col = |f: &dyn Fn(&(Vec<f64>, Vec<f64>, Option<usize>)) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        MeanSe::from_values(&v)
    };
    let mut cohort_never = BTreeMap::new();
    for m in 0..=kk {
        for k in 0..=kk {
            let ms = col(&|r| (r.2 == Some(m)).then(|| r.1[k]));
            if ms.count > 0 {
                cohort_never.insert(format!("{m},{k}"), ms);
            }
        }
    }
    Ok(OracleTruth {
        name: cfg.name.clone(),
        mc_size: mc,
        seed,
        never_treated: (0..=kk).map(|k| col(&|r| Some(r.1[k]))).collect(),
        observed: (0..=kk).map(|k| col(&|r| Some(r.0[k]))).collect(),
        observed_vs_never: (0..=kk).map(|k| col(&|r| Some(r.0[k] - r.1[k]))).collect(),
        cohort_never,
    })
}

/// `E[Y_k(T_A = m, T_R = ∞) - Y_k(T_A = T_R = ∞) | T_A = m, T_R > m]`.
pub fn cde_oracle(cfg: &DgpConfig, mc: usize, seed: u64, m: usize, k: usize) -> Result<MeanSe> {
    cfg.validate()?;
    if cfg.second_treatment.is_none() {
        return Err(Error::Config("controlled direct effects need a second treatment".into()));
    }
    if k > cfg.horizon || m >= k {
        return Err(Error::Config(format!("invalid pair (m={m}, k={k})")));
    }
    let policy = move |t: usize, _: &[f64], _: &[Vec<f64>], _: &[f64]| vec![f64::from(u8::from(t >= m)), 0.0];
    Ok(expectation(cfg, mc, seed, |lat, nat| {
        let in_cohort = nat.start(0) == Some(m) && nat.start(1).is_none_or(|r| r > m);
        in_cohort.then(|| cfg.under(lat, nat, &policy).y[k] - cfg.never(lat, nat)[k])
    }))
}

/// One decision cell `(L̄_m, Ā_{m-1})` of a binary problem with binary covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeCell {
    pub time: usize,
    pub l: Vec<u8>,
    pub a: Vec<u8>,
    pub best_action: u8,
    /// Utility gain of the best action over the other, under the best continuation.
    pub margin: f64,
}

/// Brute-force optimal regime for a binary treatment with a binary covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeOracle {
    pub cells: Vec<RegimeCell>,
    /// `E[Σ τ_k Y_k(g_opt)]`.
    pub optimal_value: MeanSe,
    /// `E[Σ τ_k Y_k]` under the natural course.
    pub observed_value: MeanSe,
}

impl RegimeOracle {
    pub fn action(&self, time: usize, l: &[u8], a: &[u8]) -> Option<u8> {
        self.cells
            .iter()
            .find(|c| c.time == time && c.l == l && c.a == a)
            .map(|c| c.best_action)
    }
}

fn bits(v: usize, len: usize) -> Vec<u8> {
    (0..len).map(|b| ((v >> b) & 1) as u8).collect()
}

/// Enumerates, for every decision cell, all assignments of the current and
/// later cells' actions with actions before the cell held fixed, and keeps the
/// assignment with the highest mean utility over subjects sharing the cell's
/// covariate history (common random numbers across assignments).
pub fn regime_oracle(cfg: &DgpConfig, mc: usize, seed: u64) -> Result<RegimeOracle> {
    cfg.validate()?;
    let tau = cfg
        .utility
        .clone()
        .ok_or_else(|| Error::Config("regime oracle needs utility weights".into()))?;
    let kk = cfg.horizon;
    if kk > 3 || cfg.second_treatment.is_some() {
        return Err(Error::Unsupported("regime oracle supports a single treatment and horizon <= 3".into()));
    }
    let nd = kk; // decisions at 0..K-1
    let nseq = 1usize << nd;
    let nl = 1usize << nd;
    // util_sum[lpath][seq], count[lpath]
    let per_subject: Vec<(usize, Vec<f64>, f64)> = (0..mc)
        .into_par_iter()
        .map(|i| {
            let lat = cfg.latent(seed, i);
            let nat = cfg.natural(&lat);
            let lp = (0..nd).fold(0usize, |acc, t| acc | ((lat.l[t] as usize) << t));
            let utils = (0..nseq)
                .map(|s| {
                    let pol = move |t: usize, _: &[f64], _: &[Vec<f64>], _: &[f64]| {
                        vec![if t < nd { ((s >> t) & 1) as f64 } else { 0.0 }]
                    };
                    let y = cfg.under(&lat, &nat, &pol).y;
                    tau.iter().zip(&y).map(|(w, v)| w * v).sum()
                })
                .collect();
            let obs = tau.iter().zip(&nat.y).map(|(w, v)| w * v).sum();
            (lp, utils, obs)
        })
        .collect();
    let mut sums = vec![vec![0.0; nseq]; nl];
    let mut counts = vec![0usize; nl];
    for (lp, u, _) in &per_subject {
        counts[*lp] += 1;
        for s in 0..nseq {
            sums[*lp][s] += u[s];
        }
    }

    // cells at time m: l bits 0..=m, a bits 0..m-1
    let cells_at = |m: usize| -> Vec<(Vec<u8>, Vec<u8>)> {
        let mut v = Vec::new();
        for lb in 0..(1usize << (m + 1)) {
            for ab in 0..(1usize << m) {
                v.push((bits(lb, m + 1), bits(ab, m)));
            }
        }
        v
    };
    let mut cells = Vec::new();
    for m in 0..nd {
        for (l, a) in cells_at(m) {
            // later cells consistent with this prefix
            let later: Vec<(usize, Vec<u8>, Vec<u8>)> = (m + 1..nd)
                .flat_map(|t| {
                    cells_at(t)
                        .into_iter()
                        .filter(|(lt, at)| lt[..=m] == l[..] && at[..m] == a[..])
                        .map(move |(lt, at)| (t, lt, at))
                })
                .collect();
            let matching: Vec<usize> = (0..nl)
                .filter(|lp| (0..=m).all(|t| ((lp >> t) & 1) as u8 == l[t]) && counts[*lp] > 0)
                .collect();
            let total: usize = matching.iter().map(|lp| counts[*lp]).sum();
            if total == 0 {
                continue;
            }
            let mut best = [f64::NEG_INFINITY; 2];
            for am in 0..2u8 {
                for assign in 0..(1usize << later.len()) {
                    let mut value = 0.0;
                    for &lp in &matching {
                        let mut seq = 0usize;
                        for (t, &at) in a.iter().enumerate() {
                            seq |= (at as usize) << t;
                        }
                        seq |= (am as usize) << m;
                        for t in m + 1..nd {
                            let lt: Vec<u8> = (0..=t).map(|s| ((lp >> s) & 1) as u8).collect();
                            let at: Vec<u8> = (0..t).map(|s| ((seq >> s) & 1) as u8).collect();
                            let idx = later
                                .iter()
                                .position(|(tt, ll, aa)| *tt == t && *ll == lt && *aa == at)
                                .expect("cell enumerated");
                            seq |= ((assign >> idx) & 1) << t;
                        }
                        value += sums[lp][seq];
                    }
                    best[am as usize] = best[am as usize].max(value / total as f64);
                }
            }
            let best_action = u8::from(best[1] > best[0]);
            cells.push(RegimeCell {
                time: m,
                l,
                a,
                best_action,
                margin: (best[1] - best[0]).abs(),
            });
        }
    }
    let oracle = RegimeOracle {
        cells,
        optimal_value: MeanSe::from_values(&[]),
        observed_value: MeanSe::from_values(&per_subject.iter().map(|r| r.2).collect::<Vec<_>>()),
    };
    let opt: Vec<f64> = per_subject
        .iter()
        .map(|(lp, u, _)| {
            let mut seq = 0usize;
            for t in 0..nd {
                let l: Vec<u8> = (0..=t).map(|s| ((lp >> s) & 1) as u8).collect();
                let a: Vec<u8> = (0..t).map(|s| ((seq >> s) & 1) as u8).collect();
                seq |= (oracle.action(t, &l, &a).unwrap_or(0) as usize) << t;
            }
            u[seq]
        })
        .collect();
    Ok(RegimeOracle {
        optimal_value: MeanSe::from_values(&opt),
        ..oracle
    })
}

/// `E[Σ τ_k Y_k(g)]` for a deterministic rule `g(t, L̄_t, Ā_{t-1})`.
pub fn regime_value<G>(cfg: &DgpConfig, mc: usize, seed: u64, rule: G) -> Result<MeanSe>
where
    G: Fn(usize, &[f64], &[Vec<f64>]) -> Vec<f64> + Sync,
{
    cfg.validate()?;
    let tau = cfg
        .utility
        .clone()
        .ok_or_else(|| Error::Config("regime values need utility weights".into()))?;
    let pol = |t: usize, l: &[f64], past: &[Vec<f64>], _: &[f64]| rule(t, l, past);
    Ok(expectation(cfg, mc, seed, |lat, nat| {
        let y = cfg.under(lat, nat, &pol).y;
        Some(tau.iter().zip(&y).map(|(w, v)| w * v).sum())
    }))
}
