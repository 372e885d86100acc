//! Experiment configuration: layered YAML files merged into one immutable
//! [`ExperimentConfig`].
//!
//! Load order is built-in defaults, then an optional defaults file, then the
//! user file, then `key=value` leaf overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};

use crate::error::{Error, Result};

/// Built-in defaults. Every top-level key a config may use appears here.
pub const DEFAULT_CONFIG_YAML: &str = r#"
dataset_names: [synthetic]
semantic_setting: traditional
init_cls_num: 0
inc_cls_num: 2
task_num: 5
scenario: task_agnostic
online: false
epochs: 1
batch_size: 10
method: finetune
method_params: {}
buffer:
  strategy: null
  capacity: null
  budget_bytes: null
optimizer:
  name: sgd
  learning_rate: 0.1
  decay_schedule: constant
backbone:
  arch: mlp2
  hidden: [100, 100]
  feature_dim: 64
seed: 0
output_dir: runs/default
data_root: null
synthetic:
  num_classes: 10
  input_shape: [64]
  train_per_class: 100
  test_per_class: 50
  latent_dim: 16
  class_sep: 3.0
  noise: 1.0
  data_seed: 0
"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticSetting {
    Traditional,
    CrossDomain,
    CategoryRandomized,
}

/// Whether the task identity is available at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    TaskAware,
    TaskAgnostic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferStrategy {
    Reservoir,
    BalancedRandom,
    Herding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferConfig {
    /// `None` lets the method pick its conventional strategy.
    pub strategy: Option<BufferStrategy>,
    pub capacity: Option<usize>,
    pub budget_bytes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecaySchedule {
    Constant,
    /// Multiply the learning rate by `gamma` every `every` optimizer steps.
    Step { every: usize, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: OptimizerKind,
    pub learning_rate: f64,
    pub decay_schedule: DecaySchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp2,
    Smallconv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub arch: Arch,
    /// Hidden widths for `mlp2`; the second is the feature dimension.
    pub hidden: Vec<usize>,
    /// Output width of the `smallconv` linear neck.
    pub feature_dim: usize,
}

/// Parameters of the built-in Gaussian-cluster dataset generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    /// `[dim]` for flat vectors or `[channels, height, width]` for images.
    pub input_shape: Vec<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub latent_dim: usize,
    pub class_sep: f64,
    pub noise: f64,
    pub data_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset_names: Vec<String>,
    pub semantic_setting: SemanticSetting,
    pub init_cls_num: usize,
    pub inc_cls_num: usize,
    pub task_num: usize,
    pub scenario: Scenario,
    pub online: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub method: String,
    pub method_params: BTreeMap<String, Value>,
    pub buffer: BufferConfig,
    pub optimizer: OptimizerConfig,
    pub backbone: BackboneConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data_root: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        from_tree(&default_tree()).expect("built-in defaults are valid")
    }
}

impl ExperimentConfig {
    /// Total number of classes the partition asks for.
    pub fn requested_classes(&self) -> usize {
        if self.init_cls_num == 0 {
            self.inc_cls_num * self.task_num
        } else {
            self.init_cls_num + self.inc_cls_num * self.task_num.saturating_sub(1)
        }
    }

    /// Number of classes in task `t`.
    pub fn classes_in_task(&self, t: usize) -> usize {
        if t == 0 && self.init_cls_num > 0 {
            self.init_cls_num
        } else {
            self.inc_cls_num
        }
    }

    pub fn param_f64(&self, key: &str, default: f64) -> f64 {
        self.method_params
            .get(key)
            .and_then(Value::as_f64)
            .unwrap_or(default)
    }

    pub fn param_usize(&self, key: &str, default: usize) -> usize {
        self.method_params
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .unwrap_or(default)
    }

    pub fn param_str<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.method_params
            .get(key)
            .and_then(Value::as_str)
            .unwrap_or(default)
    }

    pub fn to_tree(&self) -> Value {
        serde_yaml::to_value(self).expect("config serializes")
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    /// Checks single-field domain bounds. Cross-field and catalog checks live
    /// in [`validate_config`].
    fn check_bounds(&self) -> Result<()> {
        let positive = [
            ("inc_cls_num", self.inc_cls_num),
            ("task_num", self.task_num),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::schema(key, "must be a positive integer"));
            }
        }
        if self.dataset_names.is_empty() {
            return Err(Error::schema("dataset_names", "at least one dataset is required"));
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return Err(Error::schema("optimizer.learning_rate", "must be positive and finite"));
        }
        if let DecaySchedule::Step { every, gamma } = self.optimizer.decay_schedule {
            if every == 0 || !(gamma > 0.0) {
                return Err(Error::schema(
                    "optimizer.decay_schedule",
                    "step schedule needs every > 0 and gamma > 0",
                ));
            }
        }
        if self.buffer.capacity.is_some() && self.buffer.budget_bytes.is_some() {
            return Err(Error::schema(
                "buffer",
                "give either capacity or budget_bytes, not both",
            ));
        }
        match self.backbone.arch {
            Arch::Mlp2 if self.backbone.hidden.len() != 2 || self.backbone.hidden.contains(&0) => {
                return Err(Error::schema("backbone.hidden", "mlp2 needs two positive widths"));
            }
            Arch::Smallconv if self.backbone.feature_dim == 0 => {
                return Err(Error::schema("backbone.feature_dim", "must be positive"));
            }
            _ => {}
        }
        let syn = &self.synthetic;
        if syn.num_classes == 0 || syn.train_per_class == 0 || syn.test_per_class == 0 {
            return Err(Error::schema(
                "synthetic",
                "num_classes, train_per_class and test_per_class must be positive",
            ));
        }
        if !(syn.input_shape.len() == 1 || syn.input_shape.len() == 3)
            || syn.input_shape.contains(&0)
        {
            return Err(Error::schema(
                "synthetic.input_shape",
                "expected [dim] or [channels, height, width] with positive entries",
            ));
        }
        Ok(())
    }
}

/// Parses Table-style task settings such as `b50-10-6`
/// (base classes, classes per increment, number of tasks).
pub fn parse_task_setting(s: &str) -> Result<(usize, usize, usize)> {
    let bad = || Error::InvalidArgument(format!("task setting `{s}` is not of the form bX-Y-Z"));
    let rest = s.strip_prefix('b').ok_or_else(bad)?;
    let parts: Vec<usize> = rest
        .split('-')
        .map(|p| p.parse::<usize>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [init, inc, tasks] => Ok((*init, *inc, *tasks)),
        _ => Err(bad()),
    }
}

pub fn default_tree() -> Value {
    serde_yaml::from_str(DEFAULT_CONFIG_YAML).expect("built-in defaults parse")
}

fn read_tree(path: &Path) -> Result<Value> {
    if !path.exists() {
        return Err(Error::ConfigMissing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let tree: Value = serde_yaml::from_str(&text).map_err(|e| Error::ConfigParse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    match tree {
        Value::Mapping(_) => Ok(tree),
        Value::Null => Ok(Value::Mapping(Mapping::new())),
        _ => Err(Error::ConfigParse {
            path: path.display().to_string(),
            message: "top level must be a key/value mapping".into(),
        }),
    }
}

fn join_path(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn key_str(k: &Value) -> String {
    match k {
        Value::String(s) => s.clone(),
        other => serde_yaml::to_string(other)
            .unwrap_or_default()
            .trim()
            .to_string(),
    }
}

/// Deep merge of two key/value trees. The override wins at leaves, lists are
/// replaced wholesale, and a mapping meeting a non-mapping is a conflict.
pub fn merge_configs(base: &Value, over: &Value) -> Result<Value> {
    merge_at(base, over, "")
}

fn merge_at(base: &Value, over: &Value, path: &str) -> Result<Value> {
    match (base, over) {
        (Value::Mapping(b), Value::Mapping(o)) => {
            let mut out = b.clone();
            for (k, ov) in o {
                let child = join_path(path, &key_str(k));
                let merged = match b.get(k) {
                    Some(bv) => merge_at(bv, ov, &child)?,
                    None => ov.clone(),
                };
                out.insert(k.clone(), merged);
            }
            Ok(Value::Mapping(out))
        }
        (Value::Mapping(_), other) | (other, Value::Mapping(_)) if !other.is_null() => {
            Err(Error::MergeConflict {
                key: if path.is_empty() { "<root>".into() } else { path.to_string() },
                message: "cannot merge a mapping with a non-mapping value".into(),
            })
        }
        (_, o) => Ok(o.clone()),
    }
}

/// Applies a `dotted.key=value` override; the value is parsed as a YAML scalar
/// or flow collection.
pub fn apply_set(tree: &Value, assignment: &str) -> Result<Value> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("--set expects key=value, got `{assignment}`")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::InvalidArgument("--set with empty key".into()));
    }
    let value: Value = serde_yaml::from_str(raw).map_err(|e| Error::ConfigParse {
        path: format!("--set {key}"),
        message: e.to_string(),
    })?;
    let mut patch = value;
    for part in key.rsplit('.') {
        let mut m = Mapping::new();
        m.insert(Value::String(part.to_string()), patch);
        patch = Value::Mapping(m);
    }
    merge_configs(tree, &patch)
}

/// Converts a merged tree into a descriptor, reporting schema errors with the
/// offending key path.
pub fn from_tree(tree: &Value) -> Result<ExperimentConfig> {
    let known: Vec<Value> = match default_tree() {
        Value::Mapping(m) => m.keys().cloned().collect(),
        _ => unreachable!(),
    };
    if let Value::Mapping(m) = tree {
        for k in m.keys() {
            if !known.contains(k) {
                return Err(Error::schema(key_str(k), "unknown top-level key"));
            }
        }
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(tree.clone()).map_err(|e| {
        let key = e.path().to_string();
        Error::schema(if key == "." { "<root>".into() } else { key }, e.inner().to_string())
    })?;
    cfg.check_bounds()?;
    Ok(cfg)
}

/// Loads a user config file on top of the built-in defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    load_layered(None, path, &[])
}

/// Full two-layer load: built-in defaults, optional defaults file, user file,
/// then `key=value` overrides in order.
pub fn load_layered(
    defaults_file: Option<&Path>,
    user_file: &Path,
    sets: &[String],
) -> Result<ExperimentConfig> {
    let mut tree = default_tree();
    if let Some(d) = defaults_file {
        tree = merge_configs(&tree, &read_tree(d)?)?;
    }
    tree = merge_configs(&tree, &read_tree(user_file)?)?;
    for s in sets {
        tree = apply_set(&tree, s)?;
    }
    from_tree(&tree)
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    fs::write(path, cfg.to_yaml()).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Class counts available per dataset name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CatalogSummary {
    pub classes: BTreeMap<String, usize>,
}

impl CatalogSummary {
    pub fn single(name: &str, classes: usize) -> Self {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), classes);
        Self { classes: m }
    }

    fn count(&self, name: &str) -> Result<usize> {
        self.classes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Dataset(format!("dataset `{name}` missing from catalog")))
    }
}

/// Checks the cross-field invariants and the class partition against the
/// available catalog. Returns the config unchanged on success.
pub fn validate_config(cfg: ExperimentConfig, catalog: &CatalogSummary) -> Result<ExperimentConfig> {
    cfg.check_bounds()?;
    if cfg.online && cfg.epochs != 1 {
        return Err(Error::schema("epochs", "online runs are single-pass; epochs must be 1"));
    }
    let requested = cfg.requested_classes();
    match cfg.semantic_setting {
        SemanticSetting::Traditional => {
            if cfg.dataset_names.len() != 1 {
                return Err(Error::Composition(
                    "traditional setting partitions a single dataset".into(),
                ));
            }
            let available = catalog.count(&cfg.dataset_names[0])?;
            if requested > available {
                return Err(Error::PartitionOverflow { requested, available });
            }
        }
        SemanticSetting::CrossDomain => {
            for name in &cfg.dataset_names {
                catalog.count(name)?;
            }
            if cfg.task_num != cfg.dataset_names.len() {
                return Err(Error::schema(
                    "task_num",
                    format!(
                        "cross-domain runs have one task per dataset ({} datasets)",
                        cfg.dataset_names.len()
                    ),
                ));
            }
        }
        SemanticSetting::CategoryRandomized => {
            let mut available = 0;
            for name in &cfg.dataset_names {
                available += catalog.count(name)?;
            }
            if requested > available {
                return Err(Error::PartitionOverflow { requested, available });
            }
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn yaml(s: &str) -> Value {
        serde_yaml::from_str(s).unwrap()
    }

    #[test]
    fn leaf_and_deep_merge() {
        let m = merge_configs(&yaml("{lr: 0.1}"), &yaml("{lr: 0.3}")).unwrap();
        assert_eq!(m, yaml("{lr: 0.3}"));
        let m = merge_configs(
            &yaml("{opt: {name: sgd, lr: 0.1}}"),
            &yaml("{opt: {lr: 0.05}}"),
        )
        .unwrap();
        assert_eq!(m, yaml("{opt: {name: sgd, lr: 0.05}}"));
    }

    #[test]
    fn merge_type_conflict_names_key() {
        let err = merge_configs(&yaml("{opt: {name: sgd}}"), &yaml("{opt: 3}")).unwrap_err();
        match err {
            Error::MergeConflict { key, .. } => assert_eq!(key, "opt"),
            e => panic!("unexpected {e}"),
        }
        let err = merge_configs(&yaml("{a: {b: {c: 1}}}"), &yaml("{a: {b: [1]}}")).unwrap_err();
        assert!(matches!(err, Error::MergeConflict { key, .. } if key == "a.b"));
    }

    #[test]
    fn lists_replace_wholesale() {
        let m = merge_configs(&yaml("{d: [a, b, c]}"), &yaml("{d: [x]}")).unwrap();
        assert_eq!(m, yaml("{d: [x]}"));
    }

    #[test]
    fn set_override() {
        let t = apply_set(&default_tree(), "optimizer.learning_rate=0.3").unwrap();
        let cfg = from_tree(&t).unwrap();
        assert_eq!(cfg.optimizer.learning_rate, 0.3);
        assert_eq!(cfg.optimizer.name, OptimizerKind::Sgd);
        assert!(apply_set(&t, "novalue").is_err());
    }

    #[test]
    fn defaults_are_documented_values() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.optimizer.name, OptimizerKind::Sgd);
        assert_eq!(cfg.optimizer.learning_rate, 0.1);
        assert_eq!(cfg.optimizer.decay_schedule, DecaySchedule::Constant);
    }

    #[test]
    fn unknown_key_and_wrong_type() {
        let mut t = default_tree();
        t = merge_configs(&t, &yaml("{bogus: 1}")).unwrap();
        assert!(matches!(from_tree(&t), Err(Error::Schema { key, .. }) if key == "bogus"));
        let t = merge_configs(&default_tree(), &yaml("{optimizer: {learning_rate: fast}}")).unwrap();
        assert!(
            matches!(from_tree(&t), Err(Error::Schema { key, .. }) if key == "optimizer.learning_rate")
        );
    }

    #[test]
    fn task_setting_grammar() {
        assert_eq!(parse_task_setting("b0-10-10").unwrap(), (0, 10, 10));
        assert_eq!(parse_task_setting("b50-10-6").unwrap(), (50, 10, 6));
        assert!(parse_task_setting("50-10-6").is_err());
        assert!(parse_task_setting("b1-2").is_err());
    }

    fn with_split(init: usize, inc: usize, tasks: usize) -> ExperimentConfig {
        ExperimentConfig {
            init_cls_num: init,
            inc_cls_num: inc,
            task_num: tasks,
            dataset_names: vec!["cifar100".into()],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn partition_validation() {
        let cat = CatalogSummary::single("cifar100", 100);
        assert!(validate_config(with_split(0, 10, 10), &cat).is_ok());
        assert!(validate_config(with_split(50, 10, 6), &cat).is_ok());
        assert!(matches!(
            validate_config(with_split(0, 10, 11), &cat),
            Err(Error::PartitionOverflow { requested: 110, available: 100 })
        ));
    }

    #[test]
    fn online_requires_single_epoch() {
        let cat = CatalogSummary::single("cifar100", 100);
        let mut cfg = with_split(0, 10, 10);
        cfg.online = true;
        cfg.epochs = 3;
        assert!(matches!(validate_config(cfg, &cat), Err(Error::Schema { key, .. }) if key == "epochs"));
    }
}
