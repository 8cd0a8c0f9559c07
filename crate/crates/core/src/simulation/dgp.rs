//! Data-generating processes with planted blips and exogenous covariates.
//!
//! Each subject draws a level confounder `U ~ N(0,1)`, a binary Markov
//! covariate path `L_t`, outcome shocks and treatment uniforms. Untreated
//! outcomes follow
//!
//! ```text
//! Y_0(0) = b + δU + ε_0,   Y_k(0) = Y_{k-1}(0) + μ_k + θ L_{k-1} + ε_k
//! ```
//!
//! so `U` confounds treatment and outcome levels but not trends given the
//! covariate history. An optional violation term `c₀ Σ_{j<k} D_j` in the
//! trend `Y_k(0) - Y_{k-1}(0)`, with `D_j = 1{T=j} - π_j 1{T>=j}`, makes
//! untreated trends at every horizon `k > m` differ between initiators at `m`
//! and non-initiators by exactly `c₀`.
//!
//! Counterfactual arms reuse the subject's draws (common random numbers).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::expit;
use crate::panel::PanelDataset;

/// `P(L_0 = 1) = initial`, `P(L_t = 1 | L_{t-1}) = expit(intercept + persistence L_{t-1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateLaw {
    pub initial: f64,
    pub intercept: f64,
    pub persistence: f64,
}

impl Default for CovariateLaw {
    fn default() -> Self {
        CovariateLaw {
            initial: 0.5,
            intercept: -0.5,
            persistence: 1.0,
        }
    }
}

/// Loadings of the unobserved confounder on outcome levels and treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConfounderLaw {
    pub level: f64,
    pub treatment: f64,
}

/// Untreated outcome law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrendLaw {
    pub baseline: f64,
    /// `μ_1..μ_K`.
    pub drift: Vec<f64>,
    /// `θ`, loading of `L_{k-1}` on the trend into `k`.
    pub covariate: f64,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Absorbing treatment: once started, always on.
    Staggered,
    /// Fresh draw every period.
    General,
}

/// `P(A_t = 1 | ·) = expit(α_t + β L_t + η A_{t-1} + λ U)`; for staggered
/// patterns this is the initiation hazard among the untreated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreatmentLaw {
    pub pattern: Pattern,
    /// `α_0..α_K`.
    pub intercept: Vec<f64>,
    pub covariate: f64,
    #[serde(default)]
    pub persistence: f64,
}

/// Planted treatment effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EffectLaw {
    None,
    /// Initiation at `T` shifts `Y_k`, `k > T`, by `τ_Tk + β L_T`.
    /// `tau` lists `τ_mk` over pairs `m < k` ordered by `m` then `k`.
    Coarse { tau: Vec<f64>, covariate: f64 },
    /// Additive `a_j (ψ0 + ψ1 (j - ref) + ψ2 (k-j) + ψ3 (k-j)^2 + ψ4 L_j)`.
    Flood { psi: Vec<f64>, reference: i64 },
    /// Additive `a_j (ψ0 + ψ1 L_j + ψ2 (k-j))`.
    Lagged { psi: Vec<f64> },
    /// Multiplicative `exp{a_j (ψ0 + ψ1 L_j)}`.
    Multiplicative { psi: Vec<f64> },
}

/// A second staggered treatment `R` that can only start after `A` is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecondTreatment {
    /// Start probability per period once `A_{t-1} = 1`.
    pub hazard: f64,
    /// `ρ_jk` over pairs `j < k`, ordered as for coarse effects.
    pub rho: Vec<f64>,
}

/// Full DGP description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub name: String,
    /// Last time index `K`.
    pub horizon: usize,
    #[serde(default)]
    pub covariate: CovariateLaw,
    #[serde(default)]
    pub confounder: ConfounderLaw,
    pub trend: TrendLaw,
    pub treatment: TreatmentLaw,
    pub effect: EffectLaw,
    /// Constant parallel-trends violation `c₀`.
    #[serde(default)]
    pub violation: Option<f64>,
    #[serde(default)]
    pub second_treatment: Option<SecondTreatment>,
    /// Adds `ν U` to every additive effect term; must be zero for regime oracles.
    #[serde(default)]
    pub effect_modification_by_u: f64,
    /// Utility weights `τ_0..τ_K` for regime targets.
    #[serde(default)]
    pub utility: Option<Vec<f64>>,
}

/// Index of pair `(m, k)`, `m < k <= horizon`, in row-major pair order.
pub fn pair_index(horizon: usize, m: usize, k: usize) -> usize {
    debug_assert!(m < k && k <= horizon);
    let before: usize = (0..m).map(|j| horizon - j).sum();
    before + (k - m - 1)
}

/// Number of pairs `m < k <= horizon`.
pub fn n_pairs(horizon: usize) -> usize {
    horizon * (horizon + 1) / 2
}

/// Per-subject random draws shared by all counterfactual arms.
#[derive(Debug, Clone)]
pub struct Latent {
    pub u: f64,
    pub l: Vec<f64>,
    pub eps: Vec<f64>,
    pub ua: Vec<f64>,
    pub ur: Vec<f64>,
}

/// One subject's treatment and outcome path.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// Treatment vectors per time (`[a]` or `[a, r]`).
    pub a: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Path {
    /// First time component `c` is nonzero.
    pub fn start(&self, c: usize) -> Option<usize> {
        self.a.iter().position(|v| v[c] != 0.0)
    }
}

/// Treatment assignment under an intervention: given time, covariate path,
/// the arm's past treatments and the natural-course draw, returns `A_t`.
pub type Policy<'a> = dyn Fn(usize, &[f64], &[Vec<f64>], &[f64]) -> Vec<f64> + Sync + 'a;

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.horizon;
        let bad = |m: String| Err(Error::Config(format!("dgp `{}`: {m}", self.name)));
        if k == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.trend.drift.len() != k {
            return bad(format!("trend.drift needs {k} entries"));
        }
        if self.treatment.intercept.len() != k + 1 {
            return bad(format!("treatment.intercept needs {} entries", k + 1));
        }
        if !(self.trend.noise_sd >= 0.0) || !(0.0..=1.0).contains(&self.covariate.initial) {
            return bad("invalid noise or covariate probability".into());
        }
        match &self.effect {
            EffectLaw::Coarse { tau, .. } => {
                if tau.len() != n_pairs(k) {
                    return bad(format!("coarse effect needs {} tau values", n_pairs(k)));
                }
                if self.treatment.pattern != Pattern::Staggered {
                    return bad("coarse effects need a staggered treatment pattern".into());
                }
            }
            EffectLaw::Flood { psi, .. } if psi.len() != 5 => return bad("flood effect needs 5 parameters".into()),
            EffectLaw::Lagged { psi } if psi.len() != 3 => return bad("lagged effect needs 3 parameters".into()),
            EffectLaw::Multiplicative { psi } if psi.len() != 2 => {
                return bad("multiplicative effect needs 2 parameters".into())
            }
            _ => {}
        }
        if self.violation.is_some()
            && (self.confounder.treatment != 0.0 || self.treatment.pattern != Pattern::Staggered)
        {
            return bad("violation mode needs a staggered pattern with no confounder in treatment".into());
        }
        if let Some(s) = &self.second_treatment {
            if s.rho.len() != n_pairs(k) || !(0.0..=1.0).contains(&s.hazard) {
                return bad("second treatment needs a hazard in [0,1] and one rho per pair".into());
            }
            if self.treatment.pattern != Pattern::Staggered {
                return bad("second treatment needs a staggered first treatment".into());
            }
        }
        if let Some(u) = &self.utility {
            if u.len() != k + 1 {
                return bad(format!("utility needs {} weights", k + 1));
            }
        }
        Ok(())
    }

    pub fn n_treatments(&self) -> usize {
        1 + usize::from(self.second_treatment.is_some())
    }

    pub fn treatment_names(&self) -> Vec<String> {
        let mut v = vec!["a".to_string()];
        if self.second_treatment.is_some() {
            v.push("r".into());
        }
        v
    }

    /// Draws subject `i`'s latent variables from stream `i` of `seed`.
    pub fn latent(&self, seed: u64, i: usize) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let kk = self.horizon;
        let u: f64 = rng.sample(StandardNormal);
        let mut l = Vec::with_capacity(kk + 1);
        let mut prev = 0.0;
        for t in 0..=kk {
            let p = if t == 0 {
                self.covariate.initial
            } else {
                expit(self.covariate.intercept + self.covariate.persistence * prev)
            };
            prev = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            l.push(prev);
        }
        let eps = (0..=kk)
            .map(|_| self.trend.noise_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let ua = (0..=kk).map(|_| rng.random::<f64>()).collect();
        let ur = (0..=kk).map(|_| rng.random::<f64>()).collect();
        Latent { u, l, eps, ua, ur }
    }

    /// Treatment probability at `t` given the arm's history.
    pub fn propensity(&self, t: usize, lat: &Latent, prev_a: f64) -> f64 {
        let tl = &self.treatment;
        expit(tl.intercept[t] + tl.covariate * lat.l[t] + tl.persistence * prev_a + self.confounder.treatment * lat.u)
    }

    fn natural_draw(&self, t: usize, lat: &Latent, past: &[Vec<f64>]) -> Vec<f64> {
        let prev = past.last();
        let prev_a = prev.map_or(0.0, |v| v[0]);
        let stays = self.treatment.pattern == Pattern::Staggered && prev_a != 0.0;
        let a = if stays || lat.ua[t] < self.propensity(t, lat, prev_a) {
            1.0
        } else {
            0.0
        };
        let mut v = vec![a];
        if let Some(s) = &self.second_treatment {
            let prev_r = prev.map_or(0.0, |v| v[1]);
            let r = if prev_r != 0.0 || (prev_a != 0.0 && lat.ur[t] < s.hazard) {
                1.0
            } else {
                0.0
            };
            v.push(r);
        }
        v
    }

    /// Untreated outcomes `Y_k(0)`; the violation term uses the natural-course
    /// initiation time `t_nat`.
    pub fn untreated(&self, lat: &Latent, t_nat: Option<usize>) -> Vec<f64> {
        let kk = self.horizon;
        let mut y = Vec::with_capacity(kk + 1);
        let mut cur = self.trend.baseline + self.confounder.level * lat.u + lat.eps[0];
        y.push(cur);
        let mut dsum = 0.0;
        for k in 1..=kk {
            if self.violation.is_some() {
                let j = k - 1;
                let at_risk = t_nat.is_none_or(|t| t >= j);
                if at_risk {
                    let pi = self.propensity(j, lat, 0.0);
                    dsum += f64::from(u8::from(t_nat == Some(j))) - pi;
                }
            }
            // the violation enters every trend step, not the level
            cur += self.trend.drift[k - 1]
                + self.trend.covariate * lat.l[k - 1]
                + self.violation.unwrap_or(0.0) * dsum
                + lat.eps[k];
            y.push(cur);
        }
        y
    }

    /// Outcomes given a treatment path.
    pub fn outcomes(&self, lat: &Latent, a: &[Vec<f64>], y0: &[f64]) -> Vec<f64> {
        let kk = self.horizon;
        let nu = self.effect_modification_by_u * lat.u;
        let mut y = y0.to_vec();
        let start = |c: usize| a.iter().position(|v| v[c] != 0.0);
        match &self.effect {
            EffectLaw::None => {}
            EffectLaw::Coarse { tau, covariate } => {
                if let Some(t) = start(0) {
                    for (k, yk) in y.iter_mut().enumerate().skip(t + 1) {
                        *yk += tau[pair_index(kk, t, k)] + covariate * lat.l[t] + nu;
                    }
                }
            }
            EffectLaw::Flood { psi, reference } => {
                for (k, yk) in y.iter_mut().enumerate() {
                    for j in 0..k {
                        let lag = (k - j) as f64;
                        let f = psi[0]
                            + psi[1] * (j as i64 - reference) as f64
                            + psi[2] * lag
                            + psi[3] * lag * lag
                            + psi[4] * lat.l[j];
                        *yk += a[j][0] * (f + nu);
                    }
                }
            }
            EffectLaw::Lagged { psi } => {
                for (k, yk) in y.iter_mut().enumerate() {
                    for j in 0..k {
                        let f = psi[0] + psi[1] * lat.l[j] + psi[2] * (k - j) as f64;
                        *yk += a[j][0] * (f + nu);
                    }
                }
            }
            EffectLaw::Multiplicative { psi } => {
                for (k, yk) in y.iter_mut().enumerate() {
                    let e: f64 = (0..k).map(|j| a[j][0] * (psi[0] + psi[1] * lat.l[j])).sum();
                    *yk *= e.exp();
                }
            }
        }
        if let Some(s) = &self.second_treatment {
            if let Some(t) = start(1) {
                for (k, yk) in y.iter_mut().enumerate().skip(t + 1) {
                    *yk += s.rho[pair_index(kk, t, k)];
                }
            }
        }
        y
    }

    /// Natural-course path.
    pub fn natural(&self, lat: &Latent) -> Path {
        let mut a: Vec<Vec<f64>> = Vec::with_capacity(self.horizon + 1);
        for t in 0..=self.horizon {
            let v = self.natural_draw(t, lat, &a);
            a.push(v);
        }
        let t_nat = a.iter().position(|v| v[0] != 0.0);
        let y0 = self.untreated(lat, t_nat);
        let y = self.outcomes(lat, &a, &y0);
        Path { a, y }
    }

    /// Path under an intervention; untreated outcomes keep the natural-course
    /// initiation time so `Y(0)` is the same in every arm.
    pub fn under(&self, lat: &Latent, natural: &Path, policy: &Policy<'_>) -> Path {
        let mut a: Vec<Vec<f64>> = Vec::with_capacity(self.horizon + 1);
        for t in 0..=self.horizon {
            let nat = self.natural_draw(t, lat, &a);
            let v = policy(t, &lat.l[..=t], &a, &nat);
            a.push(v);
        }
        let y0 = self.untreated(lat, natural.start(0));
        let y = self.outcomes(lat, &a, &y0);
        Path { a, y }
    }

    /// `Y(0)`: never treated with any component.
    pub fn never(&self, lat: &Latent, natural: &Path) -> Vec<f64> {
        self.untreated(lat, natural.start(0))
    }
}

/// Simulates `n` subjects; deterministic given `seed`.
pub fn simulate_panel(cfg: &DgpConfig, n: usize, seed: u64) -> Result<PanelDataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("simulation needs at least one subject".into()));
    }
    let kk = cfg.horizon;
    let p = cfg.n_treatments();
    let nt = kk + 1;
    let mut y = Vec::with_capacity(n * nt);
    let mut a = Vec::with_capacity(n * nt * p);
    let mut z = Vec::with_capacity(n * nt);
    for i in 0..n {
        let lat = cfg.latent(seed, i);
        let path = cfg.natural(&lat);
        y.extend_from_slice(&path.y);
        for v in &path.a {
            a.extend_from_slice(v);
        }
        z.extend_from_slice(&lat.l);
    }
    PanelDataset::new(
        (0..n).map(|i| i.to_string()).collect(),
        (0..=kk as i64).collect(),
        "y",
        cfg.treatment_names(),
        vec!["l".into()],
        y,
        a,
        z,
    )
}
