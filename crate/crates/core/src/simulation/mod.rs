//! Synthetic panels with known ground truth and Monte Carlo oracles.

pub mod dgp;
pub mod gallery;
pub mod oracle;

pub use dgp::{simulate_panel, DgpConfig, EffectLaw, Latent, Path, Pattern};
pub use gallery::{entry, gallery, misspecify, GalleryEntry, Misspecification};
pub use oracle::{cde_oracle, expectation, oracle_truth, regime_oracle, regime_value, MeanSe, OracleTruth, RegimeOracle};
