//! Run configuration: what a subcommand needs to execute, echoed verbatim in
//! every run manifest so the run can be repeated with `--config`.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use snmm::blip::ModelSpec;
use snmm::derived::Query;
use snmm::gestimation::Method;
use snmm::nuisance::NuisanceSpec;
use snmm::panel::Schema;
use snmm::sensitivity::BiasFamily;
use snmm::simulation::DgpConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subcommand {
    Simulate,
    Fit,
    Derive,
    Sensitivity,
    Optimal,
    Verify,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Fit => "fit",
            Subcommand::Derive => "derive",
            Subcommand::Sensitivity => "sensitivity",
            Subcommand::Optimal => "optimal",
            Subcommand::Verify => "verify",
        }
    }
}

/// Where simulated data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DgpSource {
    /// A named entry of the shipped gallery.
    Gallery { name: String },
    /// A user-supplied generating process.
    Custom { config: Box<DgpConfig> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub dgp: DgpSource,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    pub family: BiasFamily,
    pub grid: Vec<f64>,
    /// Derived quantities tracked along the grid.
    #[serde(default)]
    pub targets: Vec<Query>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub quick: bool,
    /// Criteria to run; all when empty.
    #[serde(default)]
    pub criteria: Vec<usize>,
}

/// Fully resolved configuration of one run. Model and nuisance specs are
/// stored inline so a manifest does not depend on the files it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub subcommand: Subcommand,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<Schema>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub nuisance: Option<NuisanceSpec>,
    #[serde(default = "default_method")]
    pub method: Method,
    /// Bootstrap replicates; 0 uses influence-function intervals.
    #[serde(default)]
    pub bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ridge: f64,
    pub out: PathBuf,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub queries: Vec<Query>,
    #[serde(default)]
    pub sensitivity: Option<SensitivityConfig>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
}

fn default_method() -> Method {
    Method::ClosedForm
}

impl RunConfig {
    pub fn new(subcommand: Subcommand, out: PathBuf) -> Self {
        RunConfig {
            subcommand,
            data: None,
            schema: None,
            model: None,
            nuisance: None,
            method: Method::ClosedForm,
            bootstrap: 0,
            seed: 0,
            ridge: 0.0,
            out,
            simulate: None,
            queries: Vec::new(),
            sensitivity: None,
            verify: None,
        }
    }

    /// Checks that the fields the subcommand needs are present and sane.
    pub fn validate(&self) -> Result<(), CliError> {
        let need = |present: bool, pointer: &str| {
            if present {
                Ok(())
            } else {
                Err(CliError::config_at(
                    pointer,
                    format!("required by `{}`", self.subcommand.name()),
                ))
            }
        };
        if self.bootstrap != 0 && self.bootstrap < snmm::gestimation::bootstrap::MIN_REPLICATES {
            return Err(CliError::config_at(
                "/bootstrap",
                format!(
                    "use 0 or at least {} replicates",
                    snmm::gestimation::bootstrap::MIN_REPLICATES
                ),
            ));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(CliError::config_at("/ridge", "must be a finite non-negative number"));
        }
        match self.subcommand {
            Subcommand::Simulate => {
                need(self.simulate.is_some(), "/simulate")?;
                if self.simulate.as_ref().is_some_and(|s| s.n == 0) {
                    return Err(CliError::config_at("/simulate/n", "must be positive"));
                }
            }
            Subcommand::Fit | Subcommand::Derive | Subcommand::Optimal | Subcommand::Sensitivity => {
                need(self.data.is_some(), "/data")?;
                need(self.model.is_some(), "/model")?;
                if self.subcommand == Subcommand::Derive {
                    need(!self.queries.is_empty(), "/queries")?;
                }
                if self.subcommand == Subcommand::Sensitivity {
                    need(self.sensitivity.is_some(), "/sensitivity")?;
                    if self.sensitivity.as_ref().is_some_and(|s| s.grid.is_empty()) {
                        return Err(CliError::config_at("/sensitivity/grid", "must not be empty"));
                    }
                }
            }
            Subcommand::Verify => need(self.verify.is_some(), "/verify")?,
        }
        Ok(())
    }
}

/// Converts a deserialization path into a JSON pointer.
fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut s = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => s.push_str(&format!("/{index}")),
            Segment::Map { key } => s.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => s.push_str(&format!("/{variant}")),
            Segment::Unknown => s.push_str("/?"),
        }
    }
    s
}

/// Parses JSON text into `T`, reporting failures with a JSON pointer
/// relative to `base`. Inside internally tagged enums the pointer names the
/// enum value itself.
pub fn parse_json<T: DeserializeOwned>(text: &str, base: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = format!("{base}{}", pointer(e.path()));
        CliError::config_at(if at.is_empty() { "/" } else { &at }, e.inner().to_string())
    })
}

/// Reads and parses a JSON file that fills the field at `base`.
pub fn read_json<T: DeserializeOwned>(path: &Path, base: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config_at(base, format!("cannot read {}: {e}", path.display())))?;
    parse_json(&text, base)
}

/// Loads the `config` object of a run manifest, or a bare run configuration.
pub fn load_manifest(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    match value.get("config") {
        Some(c) => parse_json(&c.to_string(), "/config"),
        None => parse_json(&text, ""),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_carry_json_pointers() {
        let text = r#"{"flavor": "coarse", "basis": {"type": "per_pair"}, "d": "two"}"#;
        let err = parse_json::<ModelSpec>(text, "/model").unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("at /model/d:"), "{}", err.message);
        let err = parse_json::<NuisanceSpec>(r#"{"trend_basis": [{"type": "intercept"}, 3]}"#, "/nuisance").unwrap_err();
        assert!(err.message.contains("at /nuisance/trend_basis/1:"), "{}", err.message);
        // Tagged enums are parsed from a buffer, so the pointer stops at the enum.
        let text = r#"{"flavor": "coarse", "basis": {"type": "terms", "terms": [{"type": "bogus"}]}}"#;
        let err = parse_json::<ModelSpec>(text, "/model").unwrap_err();
        assert!(err.message.contains("at /model/basis:"), "{}", err.message);
    }

    #[test]
    fn manifest_config_round_trips() {
        let mut cfg = RunConfig::new(Subcommand::Verify, "out".into());
        cfg.verify = Some(VerifyConfig {
            quick: true,
            criteria: vec![4],
        });
        let text = serde_json::to_string(&serde_json::json!({ "config": cfg })).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        std::fs::write(&p, text).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), cfg);
    }

    #[test]
    fn validation_names_missing_fields() {
        let cfg = RunConfig::new(Subcommand::Fit, "out".into());
        let err = cfg.validate().unwrap_err();
        assert!(err.message.contains("/data"), "{}", err.message);
        let mut cfg = RunConfig::new(Subcommand::Verify, "out".into());
        cfg.verify = Some(VerifyConfig {
            quick: true,
            criteria: vec![],
        });
        cfg.bootstrap = 10;
        assert!(cfg.validate().unwrap_err().message.contains("/bootstrap"));
    }
}
