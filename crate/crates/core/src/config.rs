//! Declarative experiment configuration.
//!
//! TOML with unknown keys rejected. Scalar fields can be overridden from the
//! environment as `SEQFAIR_<SECTION>__<FIELD>` (e.g. `SEQFAIR_TRAIN__SEED=4`)
//! or `SEQFAIR_<FIELD>` for top-level keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, Split};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::groups::{AnnotateOptions, Axis, QuantileSplit, Scheme, SplitMode, SplitName};
use crate::model::ModelConfig;
use crate::objectives::{ObjectiveConfig, ObjectiveKind, StreamingRule};
use crate::synth::SynthConfig;
use crate::train::{RunConfig, SweepGrid, SweepParam, TrainConfig};

pub const ENV_PREFIX: &str = "SEQFAIR_";

fn default_core_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Raw log; relative paths resolve against the config file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Generate the log instead of reading one (written in `ml1m` format).
    #[serde(default)]
    pub synthetic: Option<SynthConfig>,
    #[serde(default = "default_core_k")]
    pub core_k: usize,
}

fn default_split() -> SplitName {
    SplitName::Balanced
}
fn default_popular_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupsSection {
    pub scheme: Scheme,
    #[serde(default = "default_split")]
    pub split_pop: SplitName,
    #[serde(default = "default_split")]
    pub split_seq: SplitName,
    #[serde(default)]
    pub mode: SplitMode,
    #[serde(default = "default_popular_fraction")]
    pub popular_fraction: f64,
}

impl Default for GroupsSection {
    fn default() -> Self {
        GroupsSection {
            scheme: Scheme::Pop,
            split_pop: default_split(),
            split_seq: default_split(),
            mode: SplitMode::default(),
            popular_fraction: default_popular_fraction(),
        }
    }
}

impl GroupsSection {
    pub fn annotate_options(&self) -> AnnotateOptions {
        AnnotateOptions {
            scheme: self.scheme,
            split_pop: QuantileSplit::named(self.split_pop),
            split_seq: QuantileSplit::named(self.split_seq),
            mode: self.mode,
            popular_fraction: self.popular_fraction,
        }
    }
}

fn d256() -> usize {
    256
}
fn one() -> usize {
    1
}
fn three() -> usize {
    3
}
fn default_dropout() -> f64 {
    0.2
}
fn default_max_len() -> usize {
    200
}

/// Architecture; the catalogue size comes from the prepared dataset and the
/// seed from `[train]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d256")]
    pub embed_dim: usize,
    #[serde(default = "d256")]
    pub ff_dim: usize,
    #[serde(default = "three")]
    pub num_blocks: usize,
    #[serde(default = "one")]
    pub num_heads: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl ModelSection {
    pub fn model_config(&self, catalogue_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            ff_dim: self.ff_dim,
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            dropout: self.dropout,
            max_len: self.max_len,
            catalogue_size,
            seed,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Tune alpha (CVaR) and eta (GDRO/SDRO) on validation NDCG.
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub alpha_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub eta_grid: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub jobs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { enabled: true, alpha_grid: None, eta_grid: None, jobs: 1 }
    }
}

impl SweepSection {
    /// Grid for `kind`, or `None` when it is not tuned.
    pub fn grid_for(&self, kind: ObjectiveKind, tune: Option<bool>) -> Option<SweepGrid> {
        if !tune.unwrap_or(self.enabled) {
            return None;
        }
        let mut grid = SweepGrid::default_for(kind)?;
        let custom = match grid.param {
            SweepParam::Alpha => &self.alpha_grid,
            SweepParam::Eta => &self.eta_grid,
        };
        if let Some(values) = custom {
            grid.values = values.clone();
        }
        Some(grid)
    }
}

fn default_baseline() -> String {
    "ERM".into()
}
fn default_k() -> usize {
    20
}
fn default_eval_split() -> Split {
    Split::Test
}
fn default_eval_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_eval_split")]
    pub split: Split,
    #[serde(default = "default_baseline")]
    pub baseline: String,
    #[serde(default)]
    pub exclude_seen: bool,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: default_k(),
            split: default_eval_split(),
            baseline: default_baseline(),
            exclude_seen: false,
            batch_size: default_eval_batch(),
        }
    }
}

impl EvalSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions { k: self.k, split: self.split, exclude_seen: self.exclude_seen, batch_size: self.batch_size }
    }
}

fn alpha_default() -> f64 {
    1.0
}
fn eta_default() -> f64 {
    0.01
}
fn beta_default() -> f64 {
    0.1
}

/// One `[[objective]]` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: ObjectiveKind,
    #[serde(default = "alpha_default")]
    pub alpha: f64,
    #[serde(default = "eta_default")]
    pub eta: f64,
    #[serde(default = "beta_default")]
    pub beta: f64,
    #[serde(default)]
    pub group_axis: Option<Axis>,
    #[serde(default)]
    pub streaming: StreamingRule,
    /// Overrides `[sweep].enabled` for this method.
    #[serde(default)]
    pub tune: Option<bool>,
}

impl MethodSpec {
    pub fn new(kind: ObjectiveKind, group_axis: Option<Axis>) -> Self {
        MethodSpec {
            kind,
            alpha: alpha_default(),
            eta: eta_default(),
            beta: beta_default(),
            group_axis,
            streaming: StreamingRule::default(),
            tune: None,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            kind: self.kind,
            alpha: self.alpha,
            eta: self.eta,
            beta: self.beta,
            group_axis: self.group_axis,
            streaming: self.streaming,
        }
    }

    pub fn name(&self) -> String {
        self.objective().method_name()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub groups: GroupsSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default, rename = "objective")]
    pub objectives: Vec<MethodSpec>,
    /// Output root; relative paths resolve against the config file, which
    /// also hosts the default `out/`.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::env::vars())
    }

    pub fn from_toml_with_env(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        apply_env_overrides(&mut value, env)?;
        let cfg: ExperimentConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, applies environment overrides and resolves relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.dataset.path.as_mut() {
            fix(p);
        }
        match self.out.as_mut() {
            Some(p) => fix(p),
            None => self.out = Some(base.join("out")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(_), Some(_)) => return Err(Error::Config("dataset: give either `path` or `synthetic`, not both".into())),
            (None, None) => return Err(Error::Config("dataset: `path` or `synthetic` is required".into())),
            (None, Some(s)) => {
                if self.dataset.kind != DatasetKind::Ml1m {
                    return Err(Error::Config("synthetic datasets are written in the ml1m format".into()));
                }
                s.validate()?;
            }
            _ => {}
        }
        if self.dataset.core_k == 0 {
            return Err(Error::Config("core_k must be >= 1".into()));
        }
        self.train.validate()?;
        self.model.model_config(1, self.train.seed).validate()?;
        if self.sweep.jobs == 0 {
            return Err(Error::Config("sweep.jobs must be >= 1".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.objectives {
            m.objective().validate()?;
            if m.kind.needs_groups() && self.groups.scheme == Scheme::Intersect && m.group_axis.is_none() {
                return Err(Error::Config(format!("{} under intersecting groups needs `group_axis`", m.kind.name())));
            }
            if let Some(axis) = m.group_axis {
                if !self.groups.scheme.axes().contains(&axis) {
                    return Err(Error::Config(format!("{} uses axis `{}` absent from the group scheme", m.kind.name(), axis.name())));
                }
            }
            if !names.insert(m.name()) {
                return Err(Error::Config(format!("method `{}` listed twice", m.name())));
            }
        }
        Ok(())
    }

    pub fn run_config(&self, method: &MethodSpec, catalogue_size: usize) -> RunConfig {
        let mut objective = method.objective();
        if objective.kind.needs_groups() && objective.group_axis.is_none() {
            objective.group_axis = self.groups.scheme.axes().first().copied();
        }
        RunConfig {
            model: self.model.model_config(catalogue_size, self.train.seed),
            objective,
            train: self.train.clone(),
        }
    }

    pub fn out_root(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn apply_env_overrides(table: &mut toml::Table, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) || path.len() > 3 {
            return Err(Error::Config(format!("malformed override `{key}`")));
        }
        let (field, sections) = path.split_last().unwrap();
        let mut cur = &mut *table;
        for s in sections {
            cur = cur
                .entry(s.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{s}` is not a section")))?;
        }
        let value = match cur.get(field) {
            Some(toml::Value::String(_)) => toml::Value::String(raw),
            Some(toml::Value::Table(_)) | Some(toml::Value::Array(_)) => {
                return Err(Error::Config(format!("override `{key}` targets a non-scalar field")));
            }
            _ => parse_scalar(&raw),
        };
        cur.insert(field.clone(), value);
    }
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .filter(|v| !matches!(v, toml::Value::Table(_) | toml::Value::Array(_)))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
[dataset]
kind = "ml1m"
path = "ratings.dat"

[groups]
scheme = "intersect"
split_seq = "1080"

[model]
embed_dim = 16
ff_dim = 16
num_blocks = 1
max_len = 20

[train]
batch_size = 32
epochs = 3
seed = 1

[[objective]]
kind = "ERM"

[[objective]]
kind = "GDRO"
group_axis = "seq"
"#;

    fn no_env() -> Vec<(String, String)> {
        vec![]
    }

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_with_env(BASIC, no_env()).unwrap();
        assert_eq!(cfg.dataset.core_k, 5);
        assert_eq!(cfg.groups.split_pop, SplitName::Balanced);
        assert_eq!(cfg.groups.split_seq, SplitName::Imbalanced);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.batches_per_epoch, 128);
        assert_eq!(cfg.eval.k, 20);
        assert_eq!(cfg.objectives[1].name(), "GDRO_seq");
        assert!(cfg.sweep.grid_for(ObjectiveKind::Gdro, None).is_some());
        assert!(cfg.sweep.grid_for(ObjectiveKind::Erm, None).is_none());
    }

    #[test]
    fn rejects_unknown_keys() {
        let bad = BASIC.replace("seed = 1", "seed = 1\nsede = 2");
        assert!(matches!(ExperimentConfig::from_toml_with_env(&bad, no_env()), Err(Error::Config(_))));
    }

    #[test]
    fn dro_under_intersecting_groups_needs_axis() {
        let bad = BASIC.replace("group_axis = \"seq\"\n", "");
        assert!(ExperimentConfig::from_toml_with_env(&bad, no_env()).is_err());
    }

    #[test]
    fn env_overrides() {
        let env = vec![
            ("SEQFAIR_TRAIN__SEED".to_string(), "9".to_string()),
            ("SEQFAIR_GROUPS__SPLIT_POP".to_string(), "2060".to_string()),
            ("SEQFAIR_EVAL__K".to_string(), "10".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let cfg = ExperimentConfig::from_toml_with_env(BASIC, env).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.groups.split_pop, SplitName::SemiBalanced);
        assert_eq!(cfg.eval.k, 10);
        let bad = vec![("SEQFAIR_TRAIN__EPOCHS".to_string(), "many".to_string())];
        assert!(ExperimentConfig::from_toml_with_env(BASIC, bad).is_err());
    }
}
