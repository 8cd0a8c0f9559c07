//! Precomputed estimating-equation design and the fold-level solvers.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::solve::{distinct, fd_jacobian, solve_multistart};
use super::{BasisS, Diagnostics, FitOptions, GEstimate, Method, SFunction};
use crate::basis::HistoryBasis;
use crate::blip::{binary_component, blip_down, BlipForm, BlipModel, Flavor, MAX_EXPONENT};
use crate::error::{Error, Result};
use crate::linalg::{invert, max_abs, solve_square, GramSolver};
use crate::nuisance::{
    eligibility, fit_trend_pair, split_folds, tag_fold, Conditioning, FoldAssignment, NuisanceSpec, TreatmentFit,
    TreatmentTable, TrendFamily,
};
use crate::panel::{InitiationTime, PanelDataset};

const Z95: f64 = 1.959_963_984_540_054;
/// Cap on policy-iteration sweeps before falling back to Newton.
const POLICY_ITERATIONS: usize = 50;
/// Policy-iteration starts used to check that the fixed point is unique.
const POLICY_STARTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Linear,
    Multiplicative,
    Regime,
    General,
}

#[derive(Debug, Clone)]
struct Pair {
    m: usize,
    k: usize,
    /// `s` at the observed treatment, `n × d`.
    s: Vec<f64>,
    /// `s` at the baseline treatment, `n × d`.
    s0: Vec<f64>,
    /// `s` at each unit treatment vector, `n × p × d`.
    su: Vec<f64>,
    /// `Y_k - Y_{k-1}`.
    base: Vec<f64>,
    /// `ΔH = base - w'ψ` for linear models (observed-action part for regimes).
    w: Vec<f64>,
    /// Multiplicative exponents `G_mk` and `G_{m,k-1}`.
    gk: Vec<f64>,
    gk1: Vec<f64>,
}

/// Features `B_jr(L̄_j, a)` for every grid action, for regime models.
#[derive(Debug, Clone)]
struct RegimeFeatures {
    na: usize,
    tau: Vec<f64>,
    f: Vec<f64>,
}

/// Bias-function values `c(L̄_j, k)` and treatment data for sensitivity fits.
#[derive(Debug, Clone)]
struct BiasData {
    comp: usize,
    c: Vec<f64>,
}

#[derive(Debug)]
struct Prepared {
    c: Vec<Vec<f64>>,
    base: Vec<Option<Vec<f64>>>,
    active: Vec<bool>,
    flags: Vec<String>,
}

#[derive(Debug)]
struct FoldResult {
    psi: Vec<f64>,
    u: Vec<f64>,
    jac: DMatrix<f64>,
    n_est: f64,
    iterations: usize,
    residual: f64,
    trace: Vec<f64>,
    flags: Vec<String>,
    exact_jacobian: bool,
}

/// Everything about a dataset/model/nuisance combination that does not
/// depend on fold assignment or subject weights.
#[derive(Debug)]
pub struct Design<'a> {
    data: &'a PanelDataset,
    model: &'a BlipModel,
    spec: NuisanceSpec,
    opts: FitOptions,
    n: usize,
    kk: usize,
    d: usize,
    p: usize,
    names: Vec<String>,
    kind: Kind,
    treat: TreatmentTable,
    trend_x: Vec<Vec<f64>>,
    trend_dim: Vec<usize>,
    risk: Vec<Vec<bool>>,
    init: Vec<InitiationTime>,
    pairs: Vec<Pair>,
    regime: Option<RegimeFeatures>,
    bias: Option<BiasData>,
    tol: f64,
}

impl<'a> Design<'a> {
    pub fn build(data: &'a PanelDataset, model: &'a BlipModel, spec: &NuisanceSpec, opts: &FitOptions) -> Result<Self> {
        let n = data.n_subjects();
        let kk = data.horizon();
        let d = model.dim();
        let p = data.n_treatments();
        if kk == 0 {
            return Err(Error::Data("estimation needs at least two time points".into()));
        }
        if d == 0 {
            return Err(Error::Config("blip model has no parameters".into()));
        }
        if model.initiation.iter().any(|&c| c >= p) {
            return Err(Error::Config("initiation component out of range".into()));
        }
        let kind = match (&model.form, model.flavor) {
            (BlipForm::General(_), _) => Kind::General,
            (_, Flavor::Multiplicative) => Kind::Multiplicative,
            (_, Flavor::Regime) if model.regime.is_some() => Kind::Regime,
            _ => Kind::Linear,
        };
        let sfun: Arc<dyn SFunction> = match (&opts.s, &model.form) {
            (Some(s), _) => s.clone(),
            (None, BlipForm::Linear(b)) => Arc::new(BasisS(b.clone())),
            (None, BlipForm::General(_)) => {
                return Err(Error::Config(
                    "nonlinear blip models need an explicit index function s".into(),
                ))
            }
        };
        if sfun.dim() != d {
            return Err(Error::Dimension(format!(
                "index function has dimension {} but the blip model has {d}",
                sfun.dim()
            )));
        }
        let cond = spec.conditioning_for(model.flavor);
        let tbasis = HistoryBasis::resolve(&spec.treatment_basis, data)?;
        let treat = TreatmentTable::build(data, &tbasis, eligibility(data, model, cond));
        let vbasis = HistoryBasis::resolve(&spec.trend_basis, data)?;
        let mut trend_x = Vec::with_capacity(kk + 1);
        let mut trend_dim = Vec::with_capacity(kk + 1);
        for m in 0..=kk {
            let q = vbasis.dim(m);
            let mut xm = Vec::with_capacity(n * q);
            for i in 0..n {
                vbasis.eval_into(&data.history(i, m).lbar(), &mut xm);
            }
            trend_x.push(xm);
            trend_dim.push(q);
        }
        let init: Vec<InitiationTime> = (0..n).map(|i| model.initiation_time(data, i)).collect();
        let coarse = model.flavor == Flavor::Coarse;
        let risk = eligibility(
            data,
            model,
            if coarse {
                Conditioning::AtRisk
            } else {
                Conditioning::FullHistory
            },
        );
        let y_scale = (0..n)
            .flat_map(|i| (0..=kk).map(move |t| (i, t)))
            .fold(0.0_f64, |a, (i, t)| a.max(data.outcome(i, t).abs()));

        let bias = match &opts.bias {
            Some(c) => {
                let comp = binary_component(model, data)?;
                let mut vals = vec![0.0; n * (kk + 1) * (kk + 1)];
                for i in 0..n {
                    for j in 0..=kk {
                        let l = data.history(i, j).lbar();
                        for k in j..=kk {
                            vals[(i * (kk + 1) + j) * (kk + 1) + k] = c.eval(&l, k);
                        }
                    }
                }
                Some(BiasData { comp, c: vals })
            }
            None => None,
        };

        let mut pairs = Vec::new();
        for m in opts.min_anchor..kk {
            for k in m + 1..=kk {
                pairs.push(Pair {
                    m,
                    k,
                    s: vec![0.0; n * d],
                    s0: vec![0.0; n * d],
                    su: vec![0.0; n * p * d],
                    base: vec![0.0; n],
                    w: if matches!(kind, Kind::Linear | Kind::Regime) { vec![0.0; n * d] } else { vec![] },
                    gk: if kind == Kind::Multiplicative { vec![0.0; n * d] } else { vec![] },
                    gk1: if kind == Kind::Multiplicative { vec![0.0; n * d] } else { vec![] },
                });
            }
        }
        if pairs.is_empty() {
            return Err(Error::Config("no anchor/horizon pairs to estimate from".into()));
        }

        let regime_spec = model.regime.clone();
        let na = regime_spec.as_ref().map_or(0, |r| r.actions.len());
        let mut regime_f = if kind == Kind::Regime {
            vec![0.0; n * (kk + 1) * (kk + 1) * na * d]
        } else {
            vec![]
        };

        let stride = (kk + 1) * d;
        let mut fobs = vec![0.0; (kk + 1) * stride];
        let mut buf = vec![0.0; d];
        let zero = vec![0.0; p];
        let mut unit = vec![0.0; p];
        for i in 0..n {
            if let BlipForm::Linear(b) = &model.form {
                fobs.fill(0.0);
                for j in 0..kk {
                    let h = data.history(i, j);
                    let l = h.lbar();
                    let a = h.current_treatment();
                    let needed = !coarse || init[i].is(j);
                    for r in j + 1..=kk {
                        if needed && a.iter().any(|v| *v != 0.0) {
                            b.features(&l, a, j, r, &mut fobs[j * stride + r * d..j * stride + (r + 1) * d]);
                        }
                        if let (Kind::Regime, Some(reg)) = (kind, &regime_spec) {
                            for (ai, act) in reg.actions.iter().enumerate() {
                                let off = ((((i * (kk + 1)) + j) * (kk + 1) + r) * na + ai) * d;
                                b.features(&l, act, j, r, &mut regime_f[off..off + d]);
                            }
                        }
                    }
                }
            }
            for pr in pairs.iter_mut() {
                let (m, k) = (pr.m, pr.k);
                let h = data.history(i, m);
                let l = h.lbar();
                sfun.eval(&l, h.current_treatment(), m, k, &mut pr.s[i * d..(i + 1) * d]);
                sfun.eval(&l, &zero, m, k, &mut pr.s0[i * d..(i + 1) * d]);
                for c in 0..p {
                    unit.fill(0.0);
                    unit[c] = 1.0;
                    let off = (i * p + c) * d;
                    sfun.eval(&l, &unit, m, k, &mut pr.su[off..off + d]);
                }
                pr.base[i] = data.outcome(i, k) - data.outcome(i, k - 1);
                if matches!(kind, Kind::Linear | Kind::Regime | Kind::Multiplicative) {
                    let g = |kend: usize, out: &mut [f64]| {
                        out.fill(0.0);
                        for j in m..kend {
                            if coarse && !init[i].is(j) {
                                continue;
                            }
                            let src = &fobs[j * stride + kend * d..j * stride + (kend + 1) * d];
                            for (o, v) in out.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    };
                    g(k, &mut buf);
                    if kind == Kind::Multiplicative {
                        pr.gk[i * d..(i + 1) * d].copy_from_slice(&buf);
                        g(k - 1, &mut pr.gk1[i * d..(i + 1) * d]);
                    } else {
                        let mut prev = vec![0.0; d];
                        g(k - 1, &mut prev);
                        for t in 0..d {
                            pr.w[i * d + t] = buf[t] - prev[t];
                        }
                    }
                }
            }
        }

        Ok(Design {
            data,
            model,
            spec: spec.clone(),
            opts: opts.clone(),
            n,
            kk,
            d,
            p,
            names: model.names(),
            kind,
            treat,
            trend_x,
            trend_dim,
            risk,
            init,
            pairs,
            regime: regime_spec.map(|r| RegimeFeatures {
                na,
                tau: r.tau,
                f: regime_f,
            }),
            bias,
            tol: opts.solver.tol * (1.0 + y_scale),
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.n
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// True when the moment system is linear in `ψ` given the regime policy.
    pub fn has_linear_path(&self) -> bool {
        matches!(self.kind, Kind::Linear | Kind::Regime) && self.spec.trend_family == TrendFamily::Linear
    }

    fn trend_row(&self, m: usize, i: usize) -> &[f64] {
        let q = self.trend_dim[m];
        &self.trend_x[m][i * q..(i + 1) * q]
    }

    // -----------------------------------------------------------------------
    // Nuisance-dependent pieces

    fn prepare(&self, train_w: &[f64], est_w: &[f64]) -> Result<Prepared> {
        let fit = self
            .treat
            .fit(&self.spec.treatment_family, train_w, &self.opts.registry)?;
        let mut flags = fit.flags.clone();
        let (n, d, p) = (self.n, self.d, self.p);
        let mut unseen = 0usize;
        let mut c_all = Vec::with_capacity(self.pairs.len());
        let mut base_all = Vec::with_capacity(self.pairs.len());
        let mut active = Vec::with_capacity(self.pairs.len());
        for pr in &self.pairs {
            let m = pr.m;
            let mut c = vec![0.0; n * d];
            if !fit.is_fitted(m) {
                flags.push(format!("pair (m={m}, k={}) excluded: treatment model unavailable", pr.k));
                c_all.push(c);
                base_all.push(None);
                active.push(false);
                continue;
            }
            for i in 0..n {
                if est_w[i] <= 0.0 || !self.risk[m][i] {
                    continue;
                }
                let (ahat, u) = fit.predict(m, self.treat.row(m, i)).expect("fitted time");
                unseen += usize::from(u);
                let ci = &mut c[i * d..(i + 1) * d];
                for t in 0..d {
                    let s0 = pr.s0[i * d + t];
                    let mut e = s0;
                    for (cc, ah) in ahat.iter().enumerate() {
                        e += ah * (pr.su[(i * p + cc) * d + t] - s0);
                    }
                    ci[t] = pr.s[i * d + t] - e;
                }
            }
            c_all.push(c);
            base_all.push(self.bias_adjusted_base(pr, &fit, train_w, est_w, &mut flags));
            active.push(true);
        }
        if unseen > 0 {
            flags.push(format!(
                "{unseen} estimation rows fell in treatment-model cells unseen in training; time means used"
            ));
        }
        Ok(Prepared {
            c: c_all,
            base: base_all,
            active,
            flags,
        })
    }

    fn bias_adjusted_base(
        &self,
        pr: &Pair,
        fit: &TreatmentFit,
        train_w: &[f64],
        est_w: &[f64],
        flags: &mut Vec<String>,
    ) -> Option<Vec<f64>> {
        let bias = self.bias.as_ref()?;
        let kk = self.kk;
        let mut base = pr.base.clone();
        let mut missing = false;
        for i in 0..self.n {
            if (train_w[i] <= 0.0 && est_w[i] <= 0.0) || !self.risk[pr.m][i] {
                continue;
            }
            let mut adj = 0.0;
            for j in pr.m..=pr.k {
                if !self.init[i].at_risk(j) {
                    break;
                }
                let a = self.data.treatment(i, j)[bias.comp];
                let p1 = match fit.predict(j, self.treat.row(j, i)) {
                    Some((v, _)) => v[bias.comp],
                    None => {
                        missing = true;
                        0.0
                    }
                };
                let p_other = if a != 0.0 { 1.0 - p1 } else { p1 };
                adj += p_other * (2.0 * a - 1.0) * bias.c[(i * (kk + 1) + j) * (kk + 1) + pr.k];
            }
            if adj != 0.0 {
                base[i] -= adj;
            }
        }
        if missing {
            flags.push(format!(
                "bias adjustment for (m={}, k={}) used probability 0 where no treatment model was fitted",
                pr.m, pr.k
            ));
        }
        Some(base)
    }

    fn base<'p>(&'p self, prep: &'p Prepared, pi: usize) -> &'p [f64] {
        prep.base[pi].as_deref().unwrap_or(&self.pairs[pi].base)
    }

    // -----------------------------------------------------------------------
    // Regime policy

    /// Argmax action index per `(subject, time)` at `ψ`.
    fn policy(&self, psi: &[f64]) -> Vec<usize> {
        let reg = self.regime.as_ref().expect("regime model");
        let (kk, d, na) = (self.kk, self.d, reg.na);
        let mut g = vec![0; self.n * (kk + 1)];
        for i in 0..self.n {
            for j in 0..kk {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for a in 0..na {
                    let mut v = 0.0;
                    for r in j + 1..=kk {
                        let t = reg.tau.get(r).copied().unwrap_or(0.0);
                        if t == 0.0 {
                            continue;
                        }
                        let off = ((((i * (kk + 1)) + j) * (kk + 1) + r) * na + a) * d;
                        v += t * reg.f[off..off + d].iter().zip(psi).map(|(x, p)| x * p).sum::<f64>();
                    }
                    if a == 0 || v > best_v + 1e-12 * (1.0 + best_v.abs()) {
                        best = a;
                        best_v = v;
                    }
                }
                g[i * (kk + 1) + j] = best;
            }
        }
        g
    }

    /// `W_mk(g)` for subject `i`: the linear ΔH coefficient under policy `g`.
    fn regime_w(&self, pi: usize, i: usize, g: &[usize], out: &mut [f64]) {
        let pr = &self.pairs[pi];
        let reg = self.regime.as_ref().expect("regime model");
        let (kk, d, na) = (self.kk, self.d, reg.na);
        out.copy_from_slice(&pr.w[i * d..(i + 1) * d]);
        let feat = |j: usize, r: usize| {
            let off = ((((i * (kk + 1)) + j) * (kk + 1) + r) * na + g[i * (kk + 1) + j]) * d;
            &reg.f[off..off + d]
        };
        for j in pr.m..pr.k {
            for (o, v) in out.iter_mut().zip(feat(j, pr.k)) {
                *o -= v;
            }
        }
        for j in pr.m..pr.k - 1 {
            for (o, v) in out.iter_mut().zip(feat(j, pr.k - 1)) {
                *o += v;
            }
        }
    }

    // -----------------------------------------------------------------------
    // Moments

    /// `ΔH` for one row at `ψ`.
    fn delta_h(&self, prep: &Prepared, pi: usize, i: usize, psi: &[f64], g: Option<&[usize]>) -> Result<f64> {
        let pr = &self.pairs[pi];
        let d = self.d;
        let base = self.base(prep, pi)[i];
        match self.kind {
            Kind::Linear => Ok(base - dot(&pr.w[i * d..(i + 1) * d], psi)),
            Kind::Regime => {
                let mut w = vec![0.0; d];
                self.regime_w(pi, i, g.expect("policy"), &mut w);
                Ok(base - dot(&w, psi))
            }
            Kind::Multiplicative => {
                let e1 = dot(&pr.gk[i * d..(i + 1) * d], psi);
                let e0 = dot(&pr.gk1[i * d..(i + 1) * d], psi);
                if !(e1.abs() <= MAX_EXPONENT && e0.abs() <= MAX_EXPONENT) {
                    return Err(Error::Overflow(format!(
                        "multiplicative exponent exceeds {MAX_EXPONENT} for subject {}",
                        self.data.subject_id(i)
                    )));
                }
                Ok(self.data.outcome(i, pr.k) * (-e1).exp() - self.data.outcome(i, pr.k - 1) * (-e0).exp())
            }
            Kind::General => {
                let raw = blip_down(self.model, psi, self.data, i, pr.m, pr.k)?.value
                    - blip_down(self.model, psi, self.data, i, pr.m, pr.k - 1)?.value;
                Ok(raw + base - pr.base[i])
            }
        }
    }

    /// Per-subject `U_i(ψ)` (`n × d`) with the trend refit at `ψ`.
    fn generic_moments(&self, prep: &Prepared, train_w: &[f64], est_w: &[f64], psi: &[f64]) -> Result<Vec<f64>> {
        let (n, d) = (self.n, self.d);
        let g = (self.kind == Kind::Regime).then(|| self.policy(psi));
        let mut u = vec![0.0; n * d];
        for (pi, pr) in self.pairs.iter().enumerate() {
            if !prep.active[pi] {
                continue;
            }
            let m = pr.m;
            let q = self.trend_dim[m];
            let mut ys = vec![0.0; n];
            let mut ws = vec![0.0; n];
            for i in 0..n {
                if !self.risk[m][i] || (train_w[i] <= 0.0 && est_w[i] <= 0.0) {
                    continue;
                }
                ys[i] = self.delta_h(prep, pi, i, psi, g.as_deref())?;
                if train_w[i] > 0.0 {
                    ws[i] = train_w[i];
                }
            }
            let pred = fit_trend_pair(
                &self.spec.trend_family,
                m,
                pr.k,
                &self.trend_x[m],
                q,
                &ys,
                &ws,
                &self.opts.registry,
            )?;
            for i in 0..n {
                if est_w[i] <= 0.0 || !self.risk[m][i] {
                    continue;
                }
                let Some(v) = pred.predict(self.trend_row(m, i)) else {
                    continue;
                };
                let r = ys[i] - v;
                let c = &prep.c[pi][i * d..(i + 1) * d];
                for t in 0..d {
                    u[i * d + t] += c[t] * r;
                }
            }
        }
        Ok(u)
    }

    fn mean_moment(u: &[f64], est_w: &[f64], d: usize, n_est: f64) -> Vec<f64> {
        let mut out = vec![0.0; d];
        for (i, w) in est_w.iter().enumerate() {
            if *w > 0.0 {
                for t in 0..d {
                    out[t] += w * u[i * d + t];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n_est);
        out
    }

    /// Per-subject affine moments `U_i(ψ) = b_i - M_i ψ` (policy fixed for regimes).
    fn linear_moments(
        &self,
        prep: &Prepared,
        train_w: &[f64],
        est_w: &[f64],
        g: Option<&[usize]>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, d) = (self.n, self.d);
        let mut bi = vec![0.0; n * d];
        let mut mi = vec![0.0; n * d * d];
        let mut solvers: Vec<Option<Option<GramSolver>>> = vec![None; self.kk + 1];
        let mut wrow = vec![0.0; d];
        for (pi, pr) in self.pairs.iter().enumerate() {
            if !prep.active[pi] {
                continue;
            }
            let m = pr.m;
            let q = self.trend_dim[m];
            if solvers[m].is_none() {
                let mut xtx = DMatrix::zeros(q, q);
                let mut rows = 0usize;
                for i in 0..n {
                    if train_w[i] > 0.0 && self.risk[m][i] {
                        let x = self.trend_row(m, i);
                        for a in 0..q {
                            for b in 0..q {
                                xtx[(a, b)] += train_w[i] * x[a] * x[b];
                            }
                        }
                        rows += 1;
                    }
                }
                if rows == 0 {
                    solvers[m] = Some(None);
                } else if rows < q {
                    return Err(Error::Rank(format!(
                        "trend model at (m={m}, k={}) has {rows} training rows for {q} basis columns",
                        pr.k
                    )));
                } else {
                    let s = GramSolver::new(&xtx)
                        .ok_or_else(|| Error::Rank(format!("trend design singular at (m={m}, k={})", pr.k)))?;
                    solvers[m] = Some(Some(s));
                }
            }
            let Some(Some(solver)) = &solvers[m] else {
                continue;
            };
            let base = self.base(prep, pi);
            let w_of = |i: usize, out: &mut [f64]| match g {
                Some(g) => self.regime_w(pi, i, g, out),
                None => out.copy_from_slice(&pr.w[i * d..(i + 1) * d]),
            };
            let mut xty = DVector::zeros(q);
            let mut xtw = DMatrix::zeros(q, d);
            for i in 0..n {
                if train_w[i] <= 0.0 || !self.risk[m][i] {
                    continue;
                }
                let x = self.trend_row(m, i);
                w_of(i, &mut wrow);
                for a in 0..q {
                    let xa = train_w[i] * x[a];
                    xty[a] += xa * base[i];
                    for t in 0..d {
                        xtw[(a, t)] += xa * wrow[t];
                    }
                }
            }
            let alpha = solver.solve(&xty);
            let gamma = solver.solve_mat(&xtw);
            for i in 0..n {
                if est_w[i] <= 0.0 || !self.risk[m][i] {
                    continue;
                }
                let x = self.trend_row(m, i);
                w_of(i, &mut wrow);
                let e = base[i] - (0..q).map(|a| x[a] * alpha[a]).sum::<f64>();
                for t in 0..d {
                    wrow[t] -= (0..q).map(|a| x[a] * gamma[(a, t)]).sum::<f64>();
                }
                let c = &prep.c[pi][i * d..(i + 1) * d];
                for r in 0..d {
                    if c[r] == 0.0 {
                        continue;
                    }
                    bi[i * d + r] += c[r] * e;
                    let row = &mut mi[(i * d + r) * d..(i * d + r + 1) * d];
                    for t in 0..d {
                        row[t] += c[r] * wrow[t];
                    }
                }
            }
        }
        Ok((bi, mi))
    }

    fn solve_linear(
        &self,
        bi: &[f64],
        mi: &[f64],
        est_w: &[f64],
        n_est: f64,
    ) -> Result<(Vec<f64>, DMatrix<f64>, Vec<f64>)> {
        let d = self.d;
        let mut b = DVector::zeros(d);
        let mut mm = DMatrix::zeros(d, d);
        for (i, w) in est_w.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            for r in 0..d {
                b[r] += w * bi[i * d + r];
                for t in 0..d {
                    mm[(r, t)] += w * mi[(i * d + r) * d + t];
                }
            }
        }
        b /= n_est;
        mm /= n_est;
        let psi = solve_square(&mm, &b, self.opts.ridge, &self.names)?;
        let mut u = vec![0.0; self.n * d];
        for (i, w) in est_w.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            for r in 0..d {
                let mut v = bi[i * d + r];
                for t in 0..d {
                    v -= mi[(i * d + r) * d + t] * psi[t];
                }
                u[i * d + r] = v;
            }
        }
        let mut jac = -mm;
        for t in 0..d {
            jac[(t, t)] -= self.opts.ridge;
        }
        Ok((psi.iter().copied().collect(), jac, u))
    }

    fn fit_fold(&self, train_w: &[f64], est_w: &[f64], linear: bool) -> Result<FoldResult> {
        let d = self.d;
        let prep = self.prepare(train_w, est_w)?;
        let n_est: f64 = est_w.iter().filter(|w| **w > 0.0).sum();
        if n_est <= 0.0 {
            return Err(Error::Empty("no estimation subjects".into()));
        }
        let mut flags = prep.flags.clone();
        if linear {
            let settle = |mut g: Option<Vec<usize>>| -> Result<Option<FoldResult>> {
                for it in 0..POLICY_ITERATIONS {
                    let (bi, mi) = self.linear_moments(&prep, train_w, est_w, g.as_deref())?;
                    let (psi, jac, u) = self.solve_linear(&bi, &mi, est_w, n_est)?;
                    let next = (self.kind == Kind::Regime).then(|| self.policy(&psi));
                    if next == g {
                        let residual = max_abs(&Self::mean_moment(&u, est_w, d, n_est));
                        return Ok(Some(FoldResult {
                            psi,
                            u,
                            jac,
                            n_est,
                            iterations: it + 1,
                            residual,
                            trace: vec![residual],
                            flags: vec![],
                            exact_jacobian: true,
                        }));
                    }
                    g = next;
                }
                Ok(None)
            };
            let baseline = (self.kind == Kind::Regime).then(|| self.policy(&vec![0.0; d]));
            if let Some(mut found) = settle(baseline)? {
                if self.kind == Kind::Regime {
                    // fixed points of the policy map are roots; look for others
                    let mut rng = ChaCha8Rng::seed_from_u64(self.opts.solver.seed);
                    let scale = 1.0 + max_abs(&found.psi);
                    for _ in 1..self.opts.solver.starts.max(POLICY_STARTS) {
                        let probe: Vec<f64> = (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
                        if let Some(other) = settle(Some(self.policy(&probe)))? {
                            if distinct(&other.psi, &found.psi) {
                                return Err(Error::MultipleRoots(format!(
                                    "regime policy iteration settled at {:?} and {:?}",
                                    found.psi, other.psi
                                )));
                            }
                        }
                    }
                }
                if self.opts.ridge > 0.0 {
                    flags.push(format!("ridge {} added to the moment system", self.opts.ridge));
                }
                found.flags = flags;
                return Ok(found);
            }
            flags.push("regime policy iteration did not settle; falling back to Newton".into());
        }
        let f = |psi: &[f64]| -> Result<Vec<f64>> {
            let u = self.generic_moments(&prep, train_w, est_w, psi)?;
            Ok(Self::mean_moment(&u, est_w, d, n_est))
        };
        let start = self.opts.start.clone().unwrap_or_else(|| vec![0.0; d]);
        if start.len() != d {
            return Err(Error::Dimension(format!("start has length {} for dimension {d}", start.len())));
        }
        let mut cfg = self.opts.solver.clone();
        if self.kind == Kind::Regime && cfg.starts < 2 {
            // piecewise-linear moments: always probe several starts
            cfg.starts = 5;
        }
        let root = solve_multistart(&f, &start, &cfg, self.tol)?;
        let u = self.generic_moments(&prep, train_w, est_w, &root.x)?;
        let jac = fd_jacobian(&f, &root.x, cfg.fd_step)?;
        Ok(FoldResult {
            psi: root.x,
            u,
            jac,
            n_est,
            iterations: root.iterations,
            residual: root.residual,
            trace: root.trace,
            flags,
            exact_jacobian: false,
        })
    }

    /// Fits with unit weights and the configured method and fold seed.
    pub fn fit(&self) -> Result<GEstimate> {
        self.fit_weighted(&vec![1.0; self.n], self.opts.method, self.spec.seed)
    }

    /// Fits with subject weights (bootstrap multiplicities).
    pub fn fit_weighted(&self, w: &[f64], method: Method, fold_seed: u64) -> Result<GEstimate> {
        let n = self.n;
        let d = self.d;
        if w.len() != n {
            return Err(Error::Dimension("weight vector length".into()));
        }
        let linear = match method {
            Method::ClosedForm => {
                if !self.has_linear_path() {
                    return Err(Error::Config(
                        "closed form needs a blip linear in psi and a least-squares trend model".into(),
                    ));
                }
                true
            }
            Method::Iterative => false,
            Method::Crossfit => self.has_linear_path() && !self.opts.iterative_folds,
        };
        let folds = match method {
            Method::Crossfit => split_folds(n, self.spec.folds, fold_seed)?,
            _ => FoldAssignment::single(n),
        };
        let nf = folds.n_folds;
        let mut results = Vec::with_capacity(nf);
        for f in 0..nf {
            let (train, est): (Vec<f64>, Vec<f64>) = if nf == 1 {
                (w.to_vec(), w.to_vec())
            } else {
                (0..n)
                    .map(|i| if folds.fold[i] == f { (0.0, w[i]) } else { (w[i], 0.0) })
                    .unzip()
            };
            let r = self.fit_fold(&train, &est, linear).map_err(|e| tag_fold(&folds, f, e))?;
            results.push((r, est));
        }

        let mut psi = vec![0.0; d];
        let mut cov = DMatrix::zeros(d, d);
        let mut jac_mean = DMatrix::zeros(d, d);
        let mut influence = vec![vec![0.0; d]; n];
        let mut diag = Diagnostics {
            tolerance: self.tol,
            ridge: self.opts.ridge,
            fold_seed: (nf > 1).then_some(fold_seed),
            jacobian: if results.iter().all(|(r, _)| r.exact_jacobian) {
                "exact".into()
            } else {
                "finite-difference".into()
            },
            ..Default::default()
        };
        for (f, (r, est)) in results.iter().enumerate() {
            for t in 0..d {
                psi[t] += r.psi[t] / nf as f64;
            }
            jac_mean += &r.jac / nf as f64;
            let jinv = invert(&r.jac, &self.names).map_err(|e| tag_fold(&folds, f, e))?;
            let mut cf = DMatrix::zeros(d, d);
            for i in 0..n {
                if est[i] <= 0.0 {
                    continue;
                }
                let ui = DVector::from_column_slice(&r.u[i * d..(i + 1) * d]);
                let inf = -(&jinv * ui);
                cf += est[i] * &inf * inf.transpose();
                influence[i] = inf.iter().copied().collect();
            }
            cov += cf / (r.n_est * r.n_est * (nf * nf) as f64);
            diag.residual_norm = diag.residual_norm.max(r.residual);
            diag.iterations = diag.iterations.max(r.iterations);
            diag.trace.extend_from_slice(&r.trace);
            for fl in &r.flags {
                let fl = if nf > 1 { format!("fold {f}: {fl}") } else { fl.clone() };
                if !diag.flags.contains(&fl) {
                    diag.flags.push(fl);
                }
            }
        }
        let se: Vec<f64> = (0..d).map(|t| cov[(t, t)].max(0.0).sqrt()).collect();
        let to_rows = |m: &DMatrix<f64>| (0..d).map(|r| m.row(r).iter().copied().collect()).collect();
        Ok(GEstimate {
            ci: psi.iter().zip(&se).map(|(p, s)| [p - Z95 * s, p + Z95 * s]).collect(),
            psi_hat: psi,
            names: self.names.clone(),
            method,
            jacobian: to_rows(&jac_mean),
            covariance: to_rows(&cov),
            se,
            fold_estimates: if nf > 1 {
                results.iter().map(|(r, _)| r.psi.clone()).collect()
            } else {
                vec![]
            },
            influence,
            n: w.iter().sum(),
            diagnostics: diag,
        })
    }

    /// Per-subject `U_i(ψ)` with full-sample nuisances.
    pub fn subject_moments(&self, psi: &[f64]) -> Result<Vec<Vec<f64>>> {
        if psi.len() != self.d {
            return Err(Error::Dimension(format!("psi has length {} for dimension {}", psi.len(), self.d)));
        }
        let w = vec![1.0; self.n];
        let prep = self.prepare(&w, &w)?;
        let u = self.generic_moments(&prep, &w, &w, psi)?;
        Ok(u.chunks(self.d).map(|c| c.to_vec()).collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
