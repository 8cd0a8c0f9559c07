//! Damped Newton root finding with a finite-difference Jacobian and a
//! seeded multi-start fallback.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, solve_square};

/// Solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Convergence when `‖P_n U‖∞ <= tol (1 + ‖Y‖∞)`.
    pub tol: f64,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Backtracking factor.
    pub damping: f64,
    /// Starting points tried in total; more than one turns on the root
    /// uniqueness check.
    pub starts: usize,
    /// Extra random starts used only when the first start fails.
    pub fallback_starts: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 100,
            tol: 1e-8,
            fd_step: 1e-6,
            damping: 0.5,
            starts: 1,
            fallback_starts: 4,
            seed: 0,
        }
    }
}

/// Outcome of a root search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Root {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// `‖F‖∞` after each iteration.
    pub trace: Vec<f64>,
}

/// Central-difference Jacobian of `f` at `x`.
pub fn fd_jacobian<F>(f: &F, x: &[f64], rel_step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let d = x.len();
    let mut jac = DMatrix::zeros(0, 0);
    let mut xp = x.to_vec();
    for j in 0..d {
        let h = rel_step * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        if j == 0 {
            jac = DMatrix::zeros(fp.len(), d);
        }
        for r in 0..fp.len() {
            jac[(r, j)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Damped Newton from `x0` for a square system.
pub fn newton<F>(f: &F, x0: &[f64], cfg: &SolverConfig, tol: f64) -> Result<Root>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = x0.to_vec();
    let mut fx = f(&x)?;
    let mut norm = max_abs(&fx);
    let mut trace = vec![norm];
    let mut it = 0;
    let mut polish = 0;
    let names: Vec<String> = (0..x.len()).map(|j| format!("psi[{j}]")).collect();
    while it < cfg.max_iter {
        if norm <= tol {
            // a few extra full steps tighten the root well below tolerance
            if polish >= 3 {
                break;
            }
            polish += 1;
        }
        let jac = fd_jacobian(f, &x, cfg.fd_step)?;
        let step = match solve_square(&jac, &-DVector::from_vec(fx.clone()), 0.0, &names) {
            Ok(s) => s,
            Err(e) if norm <= tol => {
                let _ = e;
                break;
            }
            Err(e) => return Err(e),
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            if let Ok(fc) = f(&cand) {
                let nc = max_abs(&fc);
                if nc.is_finite() && (nc < norm || (norm <= tol && nc <= norm)) {
                    x = cand;
                    fx = fc;
                    norm = nc;
                    accepted = true;
                    break;
                }
            }
            t *= cfg.damping;
        }
        it += 1;
        trace.push(norm);
        if !accepted {
            break;
        }
    }
    if norm <= tol {
        Ok(Root {
            x,
            iterations: it,
            residual: norm,
            trace,
        })
    } else {
        Err(Error::NonConvergence {
            iterations: it,
            residual: norm,
        })
    }
}

pub(crate) fn distinct(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-6 * (1.0 + x.abs().max(y.abs())))
}

/// Newton from `x0`, falling back to seeded random restarts; with
/// `cfg.starts > 1` all starts are run and distinct roots are an error.
pub fn solve_multistart<F>(f: &F, x0: &[f64], cfg: &SolverConfig, tol: f64) -> Result<Root>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 + max_abs(x0);
    let normal = Normal::new(0.0, scale).expect("positive scale");
    let mut random_start = || -> Vec<f64> { x0.iter().map(|v| v + normal.sample(&mut rng)).collect() };
    if cfg.starts > 1 {
        let mut roots: Vec<Root> = Vec::new();
        let mut last_err = None;
        for s in 0..cfg.starts {
            let start = if s == 0 { x0.to_vec() } else { random_start() };
            match newton(f, &start, cfg, tol) {
                Ok(r) => roots.push(r),
                Err(e) => last_err = Some(e),
            }
        }
        let Some(first) = roots.first().cloned() else {
            return Err(last_err.unwrap_or(Error::NonConvergence {
                iterations: 0,
                residual: f64::NAN,
            }));
        };
        if let Some(other) = roots.iter().find(|r| distinct(&r.x, &first.x)) {
            return Err(Error::MultipleRoots(format!("{:?} and {:?}", first.x, other.x)));
        }
        return Ok(first);
    }
    let mut err = match newton(f, x0, cfg, tol) {
        Ok(r) => return Ok(r),
        Err(e) => e,
    };
    for _ in 0..cfg.fallback_starts {
        match newton(f, &random_start(), cfg, tol) {
            Ok(r) => return Ok(r),
            Err(e) => err = e,
        }
    }
    Err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_system_one_step() {
        let f = |x: &[f64]| Ok(vec![2.0 * x[0] + x[1] - 3.0, x[0] - x[1]]);
        let r = newton(&f, &[0.0, 0.0], &SolverConfig::default(), 1e-12).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-12 && (r.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonlinear_root_and_multiple_roots() {
        let f = |x: &[f64]| Ok(vec![x[0].exp() - 2.0]);
        let r = newton(&f, &[0.0], &SolverConfig::default(), 1e-12).unwrap();
        assert!((r.x[0] - 2f64.ln()).abs() < 1e-10);
        let g = |x: &[f64]| Ok(vec![x[0] * x[0] - 1.0]);
        let cfg = SolverConfig {
            starts: 8,
            seed: 3,
            ..Default::default()
        };
        assert!(matches!(solve_multistart(&g, &[0.5], &cfg, 1e-10), Err(Error::MultipleRoots(_))));
    }

    #[test]
    fn nonconvergence_reported() {
        let f = |x: &[f64]| Ok(vec![x[0] * x[0] + 1.0]);
        let cfg = SolverConfig {
            fallback_starts: 0,
            ..Default::default()
        };
        assert!(matches!(
            solve_multistart(&f, &[1.0], &cfg, 1e-10),
            Err(Error::NonConvergence { .. })
        ));
    }
}
