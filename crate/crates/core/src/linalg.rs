//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value threshold below which a system counts as singular.
pub const RANK_TOL: f64 = 1e-10;

/// Accumulates `X'WX` and `X'Wy` row by row.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub xtx: DMatrix<f64>,
    pub rows: usize,
}

impl NormalEquations {
    pub fn new(q: usize) -> Self {
        NormalEquations {
            xtx: DMatrix::zeros(q, q),
            rows: 0,
        }
    }

    pub fn add(&mut self, x: &[f64], w: f64) {
        let q = x.len();
        for a in 0..q {
            let xa = w * x[a];
            if xa == 0.0 {
                continue;
            }
            for b in 0..q {
                self.xtx[(a, b)] += xa * x[b];
            }
        }
        self.rows += 1;
    }
}

/// Factorization of a symmetric positive definite Gram matrix.
#[derive(Debug, Clone)]
pub struct GramSolver {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl GramSolver {
    /// Fails with `None` when the matrix is numerically rank deficient.
    pub fn new(xtx: &DMatrix<f64>) -> Option<Self> {
        let q = xtx.nrows();
        if q == 0 {
            return None;
        }
        let sv = xtx.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        if !(smax > 0.0) || smin <= RANK_TOL * smax {
            return None;
        }
        xtx.clone().cholesky().map(|chol| GramSolver { chol })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }
}

/// Weighted least squares; `x` is row-major with `q` columns.
pub fn weighted_ols(x: &[f64], q: usize, y: &[f64], w: &[f64]) -> Option<DVector<f64>> {
    let n = y.len();
    debug_assert_eq!(x.len(), n * q);
    let mut ne = NormalEquations::new(q);
    let mut xty = DVector::zeros(q);
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let row = &x[i * q..(i + 1) * q];
        ne.add(row, w[i]);
        for a in 0..q {
            xty[a] += w[i] * row[a] * y[i];
        }
    }
    GramSolver::new(&ne.xtx).map(|s| s.solve(&xty))
}

/// Names the parameters loading on the near-null directions of `m`.
pub fn null_directions(m: &DMatrix<f64>, names: &[String]) -> String {
    let svd = m.clone().svd(false, true);
    let smax = svd.singular_values.max();
    let vt = match svd.v_t {
        Some(v) => v,
        None => return "unknown".into(),
    };
    let mut out = Vec::new();
    for (r, s) in svd.singular_values.iter().enumerate() {
        if *s <= RANK_TOL * smax.max(f64::MIN_POSITIVE) {
            let row = vt.row(r);
            let mut involved: Vec<String> = row
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() > 1e-3)
                .map(|(j, _)| names.get(j).cloned().unwrap_or_else(|| format!("psi[{j}]")))
                .collect();
            if involved.is_empty() {
                involved.push("?".into());
            }
            out.push(format!("{{{}}}", involved.join(", ")));
        }
    }
    if out.is_empty() {
        "none".into()
    } else {
        out.join("; ")
    }
}

/// Solves the square system `(M + ridge I) x = b`, failing loudly when singular.
pub fn solve_square(m: &DMatrix<f64>, b: &DVector<f64>, ridge: f64, names: &[String]) -> Result<DVector<f64>> {
    let d = m.nrows();
    if m.ncols() != d || b.len() != d {
        return Err(Error::Dimension(format!(
            "system is {}x{} with right-hand side of length {}",
            m.nrows(),
            m.ncols(),
            b.len()
        )));
    }
    let mut a = m.clone();
    if ridge > 0.0 {
        for i in 0..d {
            a[(i, i)] += ridge;
        }
    }
    if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Rank("estimating equations contain non-finite entries".into()));
    }
    let sv = a.clone().singular_values();
    let smax = sv.max();
    if !(smax > 0.0) || sv.min() <= RANK_TOL * smax {
        return Err(Error::Rank(format!(
            "estimating-equation matrix is singular; unidentified directions: {}",
            null_directions(&a, names)
        )));
    }
    a.lu()
        .solve(b)
        .ok_or_else(|| Error::Rank("LU solve failed".into()))
}

/// Inverse of a square matrix, with a rank check.
pub fn invert(m: &DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    let id = DMatrix::identity(d, d);
    let mut out = DMatrix::zeros(d, d);
    for c in 0..d {
        let col = solve_square(m, &id.column(c).into_owned(), 0.0, names)?;
        out.set_column(c, &col);
    }
    Ok(out)
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_recovers_exact_line() {
        let x: Vec<f64> = (0..5).flat_map(|i| [1.0, i as f64]).collect();
        let y: Vec<f64> = (0..5).map(|i| 2.0 + 3.0 * i as f64).collect();
        let b = weighted_ols(&x, 2, &y, &[1.0; 5]).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12 && (b[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_design_is_rejected() {
        let x: Vec<f64> = (0..5).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        assert!(weighted_ols(&x, 2, &[1.0; 5], &[1.0; 5]).is_none());
    }

    #[test]
    fn singular_system_names_directions() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = solve_square(&m, &DVector::from_vec(vec![1.0, 1.0]), 0.0, &["a".into(), "b".into()]).unwrap_err();
        match err {
            Error::Rank(msg) => assert!(msg.contains('a') && msg.contains('b')),
            e => panic!("{e:?}"),
        }
        assert!(solve_square(&m, &DVector::from_vec(vec![1.0, 1.0]), 0.1, &[]).is_ok());
    }
}
