//! Experiment configuration: one TOML document with defaults for every key,
//! strict schema checking and dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SplitFractions;
use crate::features::FeatureKind;
use crate::graphs::SpatialParams;
use crate::model_p::{PDims, Wiring};
use crate::model_u::UDims;
use crate::train::{FinetuneConfig, StageConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Bundle directory.
    pub bundle: Option<PathBuf>,
    /// Split file written by `make-splits`; derived from the fields below when unset.
    pub splits: Option<PathBuf>,
    pub split_seed: u64,
    pub fractions: SplitFractions,
    /// Size of the sparse measurement subset.
    pub measurements: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { bundle: None, splits: None, split_seed: 7, fractions: SplitFractions::default(), measurements: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub kind: FeatureKind,
    pub m: usize,
    /// Subject characteristic carried by the clue vectors.
    pub clue_feature: FeatureKind,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { kind: FeatureKind::Ild, m: 5, clue_feature: FeatureKind::Ild }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPConfig {
    pub wiring: Option<Wiring>,
    /// Widths; derived from the bundle's `K` when unset.
    pub dims: Option<PDims>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelUConfig {
    pub dims: Option<UDims>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    /// Pre-trained HRTF-P checkpoint; trained from scratch when unset.
    pub p: Option<PathBuf>,
    /// Pre-trained HRTF-U checkpoint; trained from scratch when unset.
    pub u: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// LSD threshold for the exceedance column.
    pub zeta: f64,
    /// Worker threads for per-subject evaluation and fine-tuning.
    pub jobs: usize,
    pub data: DataConfig,
    pub retrieval: RetrievalConfig,
    pub graph: SpatialParams,
    pub model_p: ModelPConfig,
    pub model_u: ModelUConfig,
    pub train_p: StageConfig,
    pub train_u: StageConfig,
    pub finetune: FinetuneConfig,
    pub checkpoints: CheckpointConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            zeta: 6.0,
            jobs: 1,
            data: DataConfig::default(),
            retrieval: RetrievalConfig::default(),
            graph: SpatialParams::default(),
            model_p: ModelPConfig::default(),
            model_u: ModelUConfig::default(),
            train_p: StageConfig::personalization(),
            train_u: StageConfig::upsampling(),
            finetune: FinetuneConfig::default(),
            checkpoints: CheckpointConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, then applies `key=value` overrides. Override values
    /// are read as TOML scalars or arrays, falling back to plain strings.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut doc = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut doc, user);
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => {
                fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?
            }
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.zeta >= 0.0) {
            return bad(format!("zeta = {}", self.zeta));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.data.measurements == 0 {
            return bad("data.measurements must be at least 1".into());
        }
        if self.retrieval.m == 0 {
            return bad("retrieval.m must be at least 1".into());
        }
        if self.retrieval.clue_feature == FeatureKind::Lsd {
            return bad("retrieval.clue_feature must be ild or itd".into());
        }
        self.graph.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(d) = &self.model_p.dims {
            d.validate().map_err(ConfigError::Invalid)?;
        }
        if let Some(d) = &self.model_u.dims {
            d.validate().map_err(ConfigError::Invalid)?;
        }
        for (name, s) in [("train_p", &self.train_p), ("train_u", &self.train_u), ("finetune", &self.finetune.stage)] {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return bad(format!("{name}.lr = {}", s.lr));
            }
        }
        if self.finetune.measured_weight.is_some_and(|w| !(w >= 0.0 && w.is_finite())) {
            return bad("finetune.measured_weight must be a nonnegative number".into());
        }
        let f = &self.data.fractions;
        if [f.train, f.validation, f.test].iter().any(|v| !(*v >= 0.0))
            || (f.train + f.validation + f.test - 1.0).abs() > 1e-9
        {
            return bad("data.fractions must be nonnegative and sum to 1".into());
        }
        Ok(())
    }

    pub fn wiring(&self) -> Wiring {
        self.model_p.wiring.unwrap_or(Wiring::Full)
    }

    pub fn p_dims(&self, k: usize) -> PDims {
        self.model_p.dims.clone().unwrap_or_else(|| PDims::for_k(k))
    }

    pub fn u_dims(&self, k: usize) -> UDims {
        self.model_u.dims.clone().unwrap_or_else(|| UDims::for_k(k))
    }
}

/// Recursively overlays `top` onto `base`. Tables merge, except tagged
/// variants (tables with a `kind` key), which replace like any other value.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if !t.contains_key("kind") => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("nonempty key");
    let mut table = doc;
    for p in path {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::Override(format!("{spec}: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("single key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("", &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = ExperimentConfig::from_toml(
            "seed = 3\n[retrieval]\nm = 2\n",
            &["retrieval.m=10".into(), "retrieval.kind=lsd".into(), "train_p.epochs=4".into()],
        )
        .unwrap();
        assert_eq!((c.seed, c.retrieval.m, c.retrieval.kind, c.train_p.epochs), (3, 10, FeatureKind::Lsd, 4));
        assert_eq!(c.train_p.lr, StageConfig::personalization().lr);
        let c =
            ExperimentConfig::from_toml("[train_u.schedule]\nkind = \"exponential_decay\"\nrate = 0.5\n", &[]).unwrap();
        assert_eq!(c.train_u.schedule, crate::autodiff::schedule::ScheduleKind::ExponentialDecay { rate: 0.5 });
        assert!(ExperimentConfig::from_toml("sed = 1", &[]).is_err());
        assert!(ExperimentConfig::from_toml("", &["graph.a=0".into()]).is_err());
        assert!(ExperimentConfig::from_toml("", &["nonsense".into()]).is_err());
    }
}
