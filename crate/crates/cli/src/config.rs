//! Run configuration: one TOML document, one optional table per command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kws_adapt::adaptation::{AdapterSpec, AuditEntry};
use kws_adapt::data::ToyConfig;
use kws_adapt::encoder::{EncoderConfig, LafInit};
use kws_adapt::frontend::FrontendConfig;
use kws_adapt::params::LayerGroupId;
use kws_adapt::train::{MethodKind, PretrainConfig, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every random draw of a run derives from this value.
    pub seed: u64,
    pub data: Option<DataConfig>,
    pub pretrain: Option<PretrainConfig>,
    pub adapt: Option<AdaptConfig>,
    pub eval: Option<EvalConfig>,
    pub audit: Option<AuditConfig>,
    pub plot_laf: Option<PlotLafConfig>,
    pub ablate: Option<AblateConfig>,
}

/// Exactly one source: a Speech-Commands folder, a saved dataset directory
/// or a synthetic toy corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub toy: Option<ToyConfig>,
    pub frontend: FrontendConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Pretrained acoustic + text checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub keyword: Option<String>,
    pub shots: usize,
    pub sampling_id: u64,
    /// A named method; overrides `spec` when present.
    pub method: Option<String>,
    pub spec: AdapterSpec,
    pub train: TrainConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            keyword: None,
            shots: 5,
            sampling_id: 0,
            method: None,
            spec: AdapterSpec::ta_adapter(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Adapted checkpoints written by `adapt`.
    pub checkpoints: Vec<PathBuf>,
    pub expand_test_set: bool,
    pub eval_chunk: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub encoder: EncoderConfig,
    /// Selectors to audit; the standard table when absent.
    pub entries: Option<Vec<AuditEntry>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotLafConfig {
    /// Adapted checkpoints; each contributes its own keyword.
    pub checkpoints: Vec<PathBuf>,
    /// Alternatively a pretrained checkpoint with fresh activation sites,
    /// evaluated for each of `keywords`.
    pub pretrained: Option<PathBuf>,
    pub keywords: Vec<String>,
    pub laf_init: LafInit,
    pub groups: Vec<LayerGroupId>,
    pub grid_points: usize,
}

impl Default for PlotLafConfig {
    fn default() -> Self {
        Self {
            checkpoints: Vec::new(),
            pretrained: None,
            keywords: Vec::new(),
            laf_init: LafInit::Uniform,
            groups: vec![LayerGroupId::G4, LayerGroupId::G5],
            grid_points: 121,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub checkpoint: Option<PathBuf>,
    pub methods: Vec<String>,
    /// Target keywords; the dataset's unseen keywords when empty.
    pub keywords: Vec<String>,
    pub shots: Vec<usize>,
    pub samplings: u64,
    pub train: TrainConfig,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            methods: MethodKind::ALL.iter().map(|m| m.name().to_string()).collect(),
            keywords: Vec::new(),
            shots: vec![5, 15],
            samplings: 5,
            train: TrainConfig::default(),
        }
    }
}

/// Flag overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub shots: Option<usize>,
    pub keyword: Option<String>,
    pub method: Option<String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.shots.is_some() || o.keyword.is_some() || o.method.is_some() {
            let a = self.adapt.get_or_insert_with(Default::default);
            if let Some(s) = o.shots {
                a.shots = s;
            }
            if let Some(k) = &o.keyword {
                a.keyword = Some(k.clone());
            }
            if let Some(m) = &o.method {
                a.method = Some(m.clone());
            }
        }
    }

    pub fn section<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
        value.as_ref().ok_or_else(|| CliError::Config(format!("missing [{key}] table")))
    }
}

pub fn required<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
    value.as_ref().ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
}
