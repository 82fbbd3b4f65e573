//! Declarative experiment configuration: a TOML file plus `--set path=value`
//! overrides (flags win over the file).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, AdaptMode, TrainConfig};
use crate::alignstat::{AlignmentVariant, Metric, Space};
use crate::data::{ShiftSpec, SplitRule};
use crate::error::{Error, Result};
use crate::netcore::ParamSelector;

pub const OUTPUT_DIR_ENV: &str = "SSA_TTA_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Fully declarative synthetic shift pair.
    Synthetic {
        spec: ShiftSpec,
        n_source: usize,
        n_target: usize,
        seed: u64,
    },
    /// Shorthand: isotropic standard-normal source, target mean moved by
    /// `delta`.
    MeanShift {
        dim: usize,
        delta: Vec<f64>,
        function: crate::data::GroundTruth,
        noise_std: f64,
        n_source: usize,
        n_target: usize,
        seed: u64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        split: SplitRule,
        #[serde(default = "default_true")]
        standardize: bool,
    },
}

fn default_true() -> bool {
    true
}

fn default_hidden() -> Vec<usize> {
    vec![100; 5]
}

fn default_activation() -> String {
    "relu".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: default_hidden(),
            activation: default_activation(),
            init_seed: 0,
        }
    }
}

/// Defaults applied to every adaptation method unless overridden per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptDefaults {
    /// None means min(100, subspace rank) at run time.
    pub k: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mode: AdaptMode,
    pub param_selector: ParamSelector,
    pub update_running_stats: bool,
}

impl Default for AdaptDefaults {
    fn default() -> Self {
        AdaptDefaults {
            k: None,
            lr: 1e-3,
            batch_size: 64,
            epochs: 1,
            mode: AdaptMode::Offline,
            param_selector: ParamSelector::NormAffineOnly,
            update_running_stats: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Source,
    Ssa,
    BnAdapt,
    Prototype,
    Oracle,
    Naive,
    NaiveTopVariance,
    #[serde(rename = "ssa_2wd")]
    Ssa2wd,
    SsaL1,
}

impl MethodName {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodName::Source => "source",
            MethodName::Ssa => "ssa",
            MethodName::BnAdapt => "bn_adapt",
            MethodName::Prototype => "prototype",
            MethodName::Oracle => "oracle",
            MethodName::Naive => "naive",
            MethodName::NaiveTopVariance => "naive_top_variance",
            MethodName::Ssa2wd => "ssa_2wd",
            MethodName::SsaL1 => "ssa_l1",
        }
    }

    /// Alignment variant for gradient-based methods; None for the others.
    pub fn variant(&self) -> Option<AlignmentVariant> {
        let ssa = AlignmentVariant::ssa();
        match self {
            MethodName::Ssa => Some(ssa),
            MethodName::Ssa2wd => Some(AlignmentVariant { metric: Metric::Wasserstein2, ..ssa }),
            MethodName::SsaL1 => Some(AlignmentVariant { metric: Metric::L1, ..ssa }),
            MethodName::Naive => Some(AlignmentVariant {
                space: Space::FullSpace,
                weighted: false,
                ..ssa
            }),
            MethodName::NaiveTopVariance => {
                Some(AlignmentVariant { space: Space::NaiveTopVariance, ..ssa })
            }
            _ => None,
        }
    }
}

/// One requested method with optional per-method overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: MethodName,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub mode: Option<AdaptMode>,
    /// Dimension weighting on/off (ablation); defaults to the method's own.
    #[serde(default)]
    pub weighted: Option<bool>,
}

impl MethodSpec {
    pub fn of(name: MethodName) -> Self {
        MethodSpec {
            name,
            k: None,
            lr: None,
            batch_size: None,
            epochs: None,
            mode: None,
            weighted: None,
        }
    }

    /// Resolves this method against the defaults into a concrete AdaptConfig.
    /// `k_cap` is the stored subspace size (= numeric rank cap).
    pub fn resolve(&self, defaults: &AdaptDefaults, k_cap: usize, seed: u64) -> Result<AdaptConfig> {
        let mut variant = self.name.variant().unwrap_or_else(AlignmentVariant::ssa);
        if let Some(w) = self.weighted {
            variant.weighted = w;
        }
        let k = self
            .k
            .or(defaults.k)
            .unwrap_or_else(|| k_cap.min(100))
            .min(k_cap);
        if k == 0 {
            return Err(Error::Config("resolved K = 0".into()));
        }
        Ok(AdaptConfig {
            k,
            variant,
            lr: self.lr.unwrap_or(defaults.lr),
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            epochs: self.epochs.unwrap_or(defaults.epochs),
            mode: self.mode.unwrap_or(defaults.mode),
            param_selector: defaults.param_selector,
            seed,
            update_running_stats: defaults.update_running_stats,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub adapt: AdaptDefaults,
    pub methods: Vec<MethodSpec>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("methods list is empty".into()));
        }
        if self.model.hidden.is_empty() {
            return Err(Error::Config("model.hidden must list at least one width".into()));
        }
        if self.model.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("model.hidden widths must be positive".into()));
        }
        if self.model.activation != "relu" {
            return Err(Error::Config(format!(
                "unsupported activation '{}'; only 'relu' is implemented",
                self.model.activation
            )));
        }
        if self.train.batch_size < 2 || self.adapt.batch_size < 2 {
            return Err(Error::Config("batch sizes must be >= 2".into()));
        }
        for m in &self.methods {
            if m.batch_size.is_some_and(|b| b < 2) {
                return Err(Error::Config(format!(
                    "method {}: batch_size must be >= 2",
                    m.name.as_str()
                )));
            }
            if m.k == Some(0) {
                return Err(Error::Config(format!("method {}: K must be >= 1", m.name.as_str())));
            }
        }
        match &self.dataset {
            DatasetConfig::Csv { path, .. } => {
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "dataset file not found: {}",
                        path.display()
                    )));
                }
            }
            DatasetConfig::Synthetic { spec, n_source, n_target, .. } => {
                if spec.dim == 0 || *n_source < 2 || *n_target < 2 {
                    return Err(Error::Config("synthetic dataset too small".into()));
                }
            }
            DatasetConfig::MeanShift { dim, delta, n_source, n_target, .. } => {
                if *dim == 0 || *n_source < 2 || *n_target < 2 {
                    return Err(Error::Config("synthetic dataset too small".into()));
                }
                if delta.len() != *dim {
                    return Err(Error::Config(format!(
                        "delta has {} entries for dim {dim}",
                        delta.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Effective output directory: the env override wins over the file.
    pub fn effective_output_dir(&self) -> PathBuf {
        match std::env::var(OUTPUT_DIR_ENV) {
            Ok(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    /// Canonical serialization used for the config fingerprint in records.
    pub fn canonical_json(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Loads a TOML config and applies dotted-path overrides (`a.b.c=value`);
/// later overrides win. Array elements are addressed by index
/// (`methods.1.k=32`).
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: toml::Value = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let cfg: ExperimentConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_scalar(raw: &str) -> toml::Value {
    // reuse the TOML grammar for the right-hand side; fall back to a string
    toml::from_str::<toml::Value>(&format!("v = {raw}"))
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("--set expects path=value, got '{spec}'")))?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Usage(format!("bad override path '{path}'")));
    }
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if let Ok(idx) = seg.parse::<usize>() {
            let arr = cur
                .as_array_mut()
                .ok_or_else(|| Error::Usage(format!("'{}' is not an array", segments[..i].join("."))))?;
            if idx >= arr.len() {
                return Err(Error::Usage(format!("index {idx} out of bounds in '{path}'")));
            }
            if last {
                arr[idx] = parse_scalar(raw.trim());
                return Ok(());
            }
            cur = &mut arr[idx];
        } else {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| Error::Usage(format!("'{}' is not a table", segments[..i].join("."))))?;
            if last {
                table.insert(seg.to_string(), parse_scalar(raw.trim()));
                return Ok(());
            }
            cur = table
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
    }
    unreachable!("loop always returns on the last segment")
}
