//! Nonparametric subject-level bootstrap.
//!
//! Replicate `b` draws `n` subjects with replacement from a ChaCha8 stream
//! seeded by `(seed, b)`, so results do not depend on thread scheduling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Design, Method};
use crate::error::{Error, Result};

/// Smallest number of replicates accepted.
pub const MIN_REPLICATES: usize = 100;
/// Largest tolerated fraction of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Summary of a bootstrap run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub estimate: Vec<f64>,
    /// Successful replicate estimates, in replicate order.
    pub replicates: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub percentile_ci: Vec<[f64; 2]>,
    pub normal_ci: Vec<[f64; 2]>,
    pub seed: u64,
    pub requested: usize,
    pub failures: usize,
    /// Failure counts by error kind.
    pub taxonomy: BTreeMap<String, usize>,
}

/// Subject indices for replicate `b`.
pub fn bootstrap_indices(n: usize, b: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Resampling multiplicities for replicate `b`.
pub fn bootstrap_weights(n: usize, b: usize, seed: u64) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for i in bootstrap_indices(n, b, seed) {
        w[i] += 1.0;
    }
    w
}

/// Runs `replicates` bootstrap fits. `fit` receives the resampled subject
/// indices and the replicate number and returns the statistic.
pub fn bootstrap<F>(n: usize, estimate: &[f64], replicates: usize, seed: u64, fit: F) -> Result<BootstrapResult>
where
    F: Fn(&[usize], usize) -> Result<Vec<f64>> + Sync,
{
    if replicates < MIN_REPLICATES {
        return Err(Error::Config(format!(
            "bootstrap needs at least {MIN_REPLICATES} replicates, got {replicates}"
        )));
    }
    let outcomes: Vec<Result<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|b| fit(&bootstrap_indices(n, b, seed), b))
        .collect();
    summarize(estimate, outcomes, seed)
}

/// Bootstrap of a prebuilt design by reweighting subjects, avoiding a
/// rebuild per replicate.
pub fn bootstrap_design(
    design: &Design<'_>,
    estimate: &[f64],
    method: Method,
    fold_seed: u64,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if replicates < MIN_REPLICATES {
        return Err(Error::Config(format!(
            "bootstrap needs at least {MIN_REPLICATES} replicates, got {replicates}"
        )));
    }
    let n = design.n_subjects();
    let outcomes: Vec<Result<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let w = bootstrap_weights(n, b, seed);
            design.fit_weighted(&w, method, fold_seed).map(|g| g.psi_hat)
        })
        .collect();
    summarize(estimate, outcomes, seed)
}

/// Percentile and normal intervals from replicate outcomes, enforcing the
/// failure budget.
pub fn summarize(estimate: &[f64], outcomes: Vec<Result<Vec<f64>>>, seed: u64) -> Result<BootstrapResult> {
    let requested = outcomes.len();
    let mut taxonomy = BTreeMap::new();
    let mut reps = Vec::with_capacity(requested);
    for o in outcomes {
        match o {
            Ok(v) if v.len() == estimate.len() && v.iter().all(|x| x.is_finite()) => reps.push(v),
            Ok(_) => *taxonomy.entry("non-finite".to_string()).or_insert(0) += 1,
            Err(e) => *taxonomy.entry(e.kind().to_string()).or_insert(0) += 1,
        }
    }
    let failures = requested - reps.len();
    if failures as f64 > MAX_FAILURE_RATE * requested as f64 || reps.len() < 2 {
        let taxonomy = taxonomy
            .iter()
            .map(|(k, v)| format!("{k}: {v}"))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::Bootstrap {
            failed: failures,
            total: requested,
            taxonomy,
        });
    }
    let d = estimate.len();
    let b = reps.len();
    let lo_idx = ((0.025 * b as f64).floor() as usize).max(1) - 1;
    let hi_idx = ((0.975 * b as f64).ceil() as usize).clamp(1, b) - 1;
    let mut se = Vec::with_capacity(d);
    let mut pci = Vec::with_capacity(d);
    let mut nci = Vec::with_capacity(d);
    for t in 0..d {
        let mut col: Vec<f64> = reps.iter().map(|r| r[t]).collect();
        let mean = col.iter().sum::<f64>() / b as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
        let s = var.sqrt();
        col.sort_by(|a, b| a.total_cmp(b));
        pci.push([col[lo_idx], col[hi_idx]]);
        nci.push([estimate[t] - 1.959_963_984_540_054 * s, estimate[t] + 1.959_963_984_540_054 * s]);
        se.push(s);
    }
    Ok(BootstrapResult {
        estimate: estimate.to_vec(),
        replicates: reps,
        se,
        percentile_ci: pci,
        normal_ci: nci,
        seed,
        requested,
        failures,
        taxonomy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_are_reproducible_and_in_range() {
        let a = bootstrap_indices(50, 3, 9);
        assert_eq!(a, bootstrap_indices(50, 3, 9));
        assert_ne!(a, bootstrap_indices(50, 4, 9));
        assert!(a.iter().all(|i| *i < 50));
        assert_eq!(bootstrap_weights(50, 3, 9).iter().sum::<f64>(), 50.0);
    }

    #[test]
    fn percentile_order_statistics() {
        let outcomes: Vec<Result<Vec<f64>>> = (1..=200).map(|v| Ok(vec![v as f64])).collect();
        let r = summarize(&[100.0], outcomes, 0).unwrap();
        // floor(0.025*200) = 5th and ceil(0.975*200) = 195th order statistics
        assert_eq!(r.percentile_ci[0], [5.0, 195.0]);
    }

    #[test]
    fn failure_budget_enforced() {
        let mut outcomes: Vec<Result<Vec<f64>>> = (0..100).map(|v| Ok(vec![v as f64])).collect();
        for o in outcomes.iter_mut().take(6) {
            *o = Err(Error::Rank("x".into()));
        }
        match summarize(&[0.0], outcomes, 0) {
            Err(Error::Bootstrap { failed, taxonomy, .. }) => {
                assert_eq!(failed, 6);
                assert!(taxonomy.contains("rank: 6"));
            }
            other => panic!("{other:?}"),
        }
        let mut ok: Vec<Result<Vec<f64>>> = (0..100).map(|v| Ok(vec![v as f64])).collect();
        ok[0] = Err(Error::Rank("x".into()));
        assert_eq!(summarize(&[0.0], ok, 0).unwrap().failures, 1);
    }

    #[test]
    fn too_few_replicates_rejected() {
        assert!(matches!(bootstrap(10, &[0.0], 50, 0, |_, _| Ok(vec![0.0])), Err(Error::Config(_))));
    }
}
