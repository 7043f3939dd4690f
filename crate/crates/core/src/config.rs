//! Run configuration: one TOML file with sections for the prior, the
//! trainer, the data generator, evaluation inputs, and the comparison
//! harness. Unknown keys are rejected; missing keys take the documented
//! defaults; the format version is checked on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::RcgParams;
use crate::synth::SynthSpec;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    pub prior: PriorConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub eval: EvalConfig,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            prior: PriorConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            eval: EvalConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

/// Prior parameters for the validation commands. Raw parameter arrays
/// default to the centered unit-step initialization when omitted.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub sigma_rule: f64,
    pub mu1: Option<Vec<f64>>,
    pub delta_raw: Option<Vec<Vec<f64>>>,
    pub sigma_raw: Option<Vec<Vec<f64>>>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            k: 5,
            d: 4,
            sigma_rule: 3.0,
            mu1: None,
            delta_raw: None,
            sigma_raw: None,
        }
    }
}

impl PriorConfig {
    pub fn build(&self) -> Result<RcgParams> {
        let defaults = RcgParams::default_init(self.k, self.d, self.sigma_rule);
        let mu1 = self
            .mu1
            .clone()
            .unwrap_or_else(|| defaults.mu1_all().to_vec());
        let delta_raw = self
            .delta_raw
            .clone()
            .unwrap_or_else(|| defaults.delta_raw().to_vec());
        let sigma_raw = self
            .sigma_raw
            .clone()
            .unwrap_or_else(|| defaults.sigma_raw().to_vec());
        RcgParams::new(self.k, self.d, self.sigma_rule, mu1, delta_raw, sigma_raw)
    }

    pub fn from_params(params: &RcgParams) -> Self {
        Self {
            k: params.classes(),
            d: params.dims(),
            sigma_rule: params.sigma_rule(),
            mu1: Some(params.mu1_all().to_vec()),
            delta_raw: Some(params.delta_raw().to_vec()),
            sigma_raw: Some(params.sigma_raw().to_vec()),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Checkpoint path read by the `eval` subcommand.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub n_seeds: usize,
    /// Arm preset names; see `synth::ArmSpec::preset`.
    pub arms: Vec<String>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            n_seeds: 5,
            arms: vec![
                "source_only".into(),
                "iid_gaussian".into(),
                "rcg_3sigma".into(),
                "rcg_2sigma".into(),
            ],
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        if cfg.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported format_version {} (this build reads {FORMAT_VERSION})",
                cfg.format_version
            )));
        }
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }
}
