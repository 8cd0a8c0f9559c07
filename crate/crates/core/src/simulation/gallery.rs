//! Shipped DGPs with matching model and nuisance specifications.

use serde::{Deserialize, Serialize};

use super::dgp::{
    n_pairs, pair_index, ConfounderLaw, CovariateLaw, DgpConfig, EffectLaw, Pattern, SecondTreatment, TreatmentLaw,
    TrendLaw,
};
use crate::basis::HistoryTerm;
use crate::blip::{BasisSpec, BlipTerm, Flavor, ModelSpec, RegimeSpec};
use crate::nuisance::{NuisanceSpec, TreatmentFamily};

/// A DGP with the correctly specified model and nuisances and the planted `ψ*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub dgp: DgpConfig,
    pub model: ModelSpec,
    pub nuisance: NuisanceSpec,
    pub psi: Vec<f64>,
}

/// Which nuisance component to misspecify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Misspecification {
    TreatmentWrong,
    TrendWrong,
    BothWrong,
}

impl std::str::FromStr for Misspecification {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "treatment-wrong" => Ok(Self::TreatmentWrong),
            "trend-wrong" => Ok(Self::TrendWrong),
            "both-wrong" => Ok(Self::BothWrong),
            _ => Err(crate::Error::Config(format!("unknown misspecification `{s}`"))),
        }
    }
}

/// Replaces the named nuisance bases with intercept-only ones.
pub fn misspecify(spec: &NuisanceSpec, mode: Misspecification) -> NuisanceSpec {
    let mut s = spec.clone();
    if matches!(mode, Misspecification::TreatmentWrong | Misspecification::BothWrong) {
        s.treatment_family = TreatmentFamily::Saturated;
        s.treatment_basis = vec![HistoryTerm::Intercept];
    }
    if matches!(mode, Misspecification::TrendWrong | Misspecification::BothWrong) {
        s.trend_basis = vec![HistoryTerm::Intercept];
    }
    s
}

fn lcov(lag: usize) -> HistoryTerm {
    HistoryTerm::Covariate {
        name: "l".into(),
        lag,
        power: 1,
    }
}

fn lhist() -> HistoryTerm {
    HistoryTerm::CovariateHistory { name: "l".into() }
}

fn past_a() -> HistoryTerm {
    HistoryTerm::PastTreatments { component: "a".into() }
}

fn per_pair_model(covariates: bool) -> ModelSpec {
    ModelSpec {
        flavor: Flavor::Coarse,
        basis: BasisSpec::PerPair {
            covariates: if covariates { vec!["l".into()] } else { vec![] },
            component: Some("a".into()),
            min_anchor: 0,
        },
        initiation: vec![],
        regime: None,
        d: None,
    }
}

fn coarse_nuisance(full_history_trend: bool) -> NuisanceSpec {
    NuisanceSpec::new(
        TreatmentFamily::Saturated,
        vec![lhist()],
        if full_history_trend {
            vec![HistoryTerm::Intercept, lhist()]
        } else {
            vec![HistoryTerm::Intercept, lcov(0)]
        },
    )
}

fn general_nuisance() -> NuisanceSpec {
    NuisanceSpec::new(
        TreatmentFamily::Saturated,
        vec![lhist(), past_a()],
        vec![HistoryTerm::Intercept, lcov(0), past_a()],
    )
}

fn trend(k: usize, baseline: f64) -> TrendLaw {
    let drift = [0.3, 0.5, 0.2, 0.4];
    TrendLaw {
        baseline,
        drift: drift[..k].to_vec(),
        covariate: 1.0,
        noise_sd: 1.0,
    }
}

/// Staggered adoption, `K = 3`, effects `τ_mk + β L_m`.
pub fn coarse_staggered() -> GalleryEntry {
    let tau = vec![0.5, 0.8, 1.0, 0.4, 0.7, 0.6];
    let beta = 0.5;
    GalleryEntry {
        dgp: DgpConfig {
            name: "coarse-staggered".into(),
            horizon: 3,
            covariate: CovariateLaw::default(),
            confounder: ConfounderLaw {
                level: 1.0,
                treatment: 0.5,
            },
            trend: trend(3, 2.0),
            treatment: TreatmentLaw {
                pattern: Pattern::Staggered,
                intercept: vec![-1.5, -1.5, -1.2, -1.0],
                covariate: 1.5,
                persistence: 0.0,
            },
            effect: EffectLaw::Coarse {
                tau: tau.clone(),
                covariate: beta,
            },
            violation: None,
            second_treatment: None,
            effect_modification_by_u: 0.0,
            utility: None,
        },
        model: per_pair_model(true),
        nuisance: coarse_nuisance(false),
        psi: tau.into_iter().chain([beta]).collect(),
    }
}

/// As [`coarse_staggered`] with every effect zero.
pub fn null() -> GalleryEntry {
    let mut e = coarse_staggered();
    e.dgp.name = "null".into();
    e.dgp.effect = EffectLaw::Coarse {
        tau: vec![0.0; n_pairs(3)],
        covariate: 0.0,
    };
    e.psi = vec![0.0; e.psi.len()];
    e
}

/// Staggered adoption, `K = 2`, one common effect `ψ` for every pair.
pub fn homogeneous() -> GalleryEntry {
    let psi = 0.7;
    GalleryEntry {
        dgp: DgpConfig {
            name: "homogeneous".into(),
            horizon: 2,
            covariate: CovariateLaw::default(),
            confounder: ConfounderLaw {
                level: 1.0,
                treatment: 0.5,
            },
            trend: trend(2, 2.0),
            treatment: TreatmentLaw {
                pattern: Pattern::Staggered,
                intercept: vec![-1.2, -1.0, -1.0],
                covariate: 1.5,
                persistence: 0.0,
            },
            effect: EffectLaw::Coarse {
                tau: vec![psi; n_pairs(2)],
                covariate: 0.0,
            },
            violation: None,
            second_treatment: None,
            effect_modification_by_u: 0.0,
            utility: None,
        },
        model: ModelSpec {
            flavor: Flavor::Coarse,
            basis: BasisSpec::Terms {
                terms: vec![BlipTerm::Intercept],
                component: Some("a".into()),
            },
            initiation: vec![],
            regime: None,
            d: Some(1),
        },
        nuisance: coarse_nuisance(false),
        psi: vec![psi],
    }
}

/// General treatment pattern, `K = 3`, event-time blip
/// `a (ψ0 + ψ1 m + ψ2 (k-m) + ψ3 (k-m)^2 + ψ4 L_m)`.
pub fn standard_general() -> GalleryEntry {
    let psi = vec![0.5, 0.1, 0.3, -0.05, 0.4];
    GalleryEntry {
        dgp: DgpConfig {
            name: "standard-general".into(),
            horizon: 3,
            covariate: CovariateLaw::default(),
            confounder: ConfounderLaw {
                level: 1.0,
                treatment: 0.5,
            },
            trend: trend(3, 2.0),
            treatment: TreatmentLaw {
                pattern: Pattern::General,
                intercept: vec![-0.8, -0.8, -0.8, -0.8],
                covariate: 1.0,
                persistence: 0.8,
            },
            effect: EffectLaw::Flood {
                psi: psi.clone(),
                reference: 0,
            },
            violation: None,
            second_treatment: None,
            effect_modification_by_u: 0.0,
            utility: None,
        },
        model: ModelSpec {
            flavor: Flavor::Standard,
            basis: BasisSpec::Flood {
                reference_time: 0,
                covariate: Some("l".into()),
                covariate_lag: 0,
                component: Some("a".into()),
            },
            initiation: vec![],
            regime: None,
            d: Some(5),
        },
        nuisance: general_nuisance(),
        psi,
    }
}

/// General pattern, `K = 2`, multiplicative blip `exp{a (ψ0 + ψ1 L_m)}`.
pub fn multiplicative() -> GalleryEntry {
    let psi = vec![0.3, -0.2];
    GalleryEntry {
        dgp: DgpConfig {
            name: "multiplicative".into(),
            horizon: 2,
            covariate: CovariateLaw::default(),
            confounder: ConfounderLaw {
                level: 1.0,
                treatment: 0.5,
            },
            trend: trend(2, 5.0),
            treatment: TreatmentLaw {
                pattern: Pattern::General,
                intercept: vec![-0.8, -0.8, -0.8],
                covariate: 1.0,
                persistence: 0.8,
            },
            effect: EffectLaw::Multiplicative { psi: psi.clone() },
            violation: None,
            second_treatment: None,
            effect_modification_by_u: 0.0,
            utility: None,
        },
        model: ModelSpec {
            flavor: Flavor::Multiplicative,
            basis: BasisSpec::Terms {
                terms: vec![
                    BlipTerm::Intercept,
                    BlipTerm::Covariate {
                        name: "l".into(),
                        lag: 0,
                    },
                ],
                component: Some("a".into()),
            },
            initiation: vec![],
            regime: None,
            d: Some(2),
        },
        nuisance: general_nuisance(),
        psi,
    }
}

/// Staggered adoption, `K = 3`, untreated trends of initiators exceed those of
/// non-initiators by a constant `c₀`.
pub fn violation() -> GalleryEntry {
    let mut e = coarse_staggered();
    e.dgp.name = "violation".into();
    e.dgp.confounder.treatment = 0.0;
    e.dgp.violation = Some(0.6);
    e.nuisance = coarse_nuisance(true);
    e
}

/// General pattern, `K = 2`, blip `a (ψ0 + ψ1 L_m + ψ2 (k-m))` with utility
/// `Y_1 + Y_2`; effects are not modified by the unobserved confounder.
pub fn regime() -> GalleryEntry {
    let psi = vec![-1.6, 1.0, 1.2];
    let tau = vec![0.0, 1.0, 1.0];
    GalleryEntry {
        dgp: DgpConfig {
            name: "regime".into(),
            horizon: 2,
            covariate: CovariateLaw::default(),
            confounder: ConfounderLaw {
                level: 1.0,
                treatment: 0.5,
            },
            trend: trend(2, 2.0),
            treatment: TreatmentLaw {
                pattern: Pattern::General,
                intercept: vec![-0.3, -0.3, -0.3],
                covariate: 0.8,
                persistence: 0.5,
            },
            effect: EffectLaw::Lagged { psi: psi.clone() },
            violation: None,
            second_treatment: None,
            effect_modification_by_u: 0.0,
            utility: Some(tau.clone()),
        },
        model: ModelSpec {
            flavor: Flavor::Regime,
            basis: BasisSpec::Terms {
                terms: vec![
                    BlipTerm::Intercept,
                    BlipTerm::Covariate {
                        name: "l".into(),
                        lag: 0,
                    },
                    BlipTerm::Lag { power: 1 },
                ],
                component: Some("a".into()),
            },
            initiation: vec![],
            regime: Some(RegimeSpec {
                tau,
                actions: vec![vec![0.0], vec![1.0]],
            }),
            d: Some(3),
        },
        nuisance: general_nuisance(),
        psi,
    }
}

/// Two staggered treatments, `K = 2`: `R` can start only after `A` is on.
/// The model is the joint coarse model, whose blip for starting `A` at `m`
/// averages over later `R` starts: `τ_mk + Σ_j P(T_R = j | T_A = m) ρ_jk`.
pub fn cde() -> GalleryEntry {
    let kk = 2;
    let tau = vec![0.5, 0.8, 0.6];
    let beta = 0.3;
    let hazard = 0.4;
    let rho = vec![0.0, 0.0, 1.0];
    let mut joint = tau.clone();
    // (0,2): R may start at 1 after A starts at 0
    joint[pair_index(kk, 0, 2)] += hazard * rho[pair_index(kk, 1, 2)];
    GalleryEntry {
        dgp: DgpConfig {
            name: "cde".into(),
            horizon: kk,
            covariate: CovariateLaw::default(),
            confounder: ConfounderLaw {
                level: 1.0,
                treatment: 0.5,
            },
            trend: trend(kk, 2.0),
            treatment: TreatmentLaw {
                pattern: Pattern::Staggered,
                intercept: vec![-0.8, -1.0, -1.0],
                covariate: 1.5,
                persistence: 0.0,
            },
            effect: EffectLaw::Coarse { tau, covariate: beta },
            violation: None,
            second_treatment: Some(SecondTreatment { hazard, rho }),
            effect_modification_by_u: 0.0,
            utility: None,
        },
        model: ModelSpec {
            flavor: Flavor::Coarse,
            basis: BasisSpec::PerPair {
                covariates: vec!["l".into()],
                component: Some("a".into()),
                min_anchor: 0,
            },
            initiation: vec!["a".into(), "r".into()],
            regime: None,
            d: None,
        },
        nuisance: coarse_nuisance(false),
        psi: joint.into_iter().chain([beta]).collect(),
    }
}

/// Every shipped DGP.
pub fn gallery() -> Vec<GalleryEntry> {
    vec![
        coarse_staggered(),
        null(),
        homogeneous(),
        standard_general(),
        multiplicative(),
        violation(),
        regime(),
        cde(),
    ]
}

/// Looks a DGP up by name.
pub fn entry(name: &str) -> Option<GalleryEntry> {
    gallery().into_iter().find(|e| e.dgp.name == name)
}
