//! Experiment configuration: one TOML document per experiment, optional `[[grid]]` override
//! blocks expanding it into several runs.

use std::path::{Path, PathBuf};

use reprobe::continual::{BlockwiseSpec, EvalConfig, Method, MethodConfig, RunConfig, RunMode};
use reprobe::data::{AugmentationSpec, DatasetKind, DatasetSpec};
use reprobe::diff::OptimizerKind;
use reprobe::models::{Family, ModelSpec};
use reprobe::probe::ProbeSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable naming the root that relative output directories resolve against.
pub const OUTPUT_ENV: &str = "REPROBE_OUT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("config schema: {0}")]
    Schema(String),
    #[error("config field `{field}`: {msg}")]
    Invalid { field: String, msg: String },
}

fn bad(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        msg: msg.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSourceKind {
    GaussianClusters,
    ConcentricSpirals,
    GridImages,
    Csv,
}

/// Synthetic fields default to the SynthSplit-10 benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_kind")]
    pub kind: DatasetSourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_side: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_separation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_kind() -> DatasetSourceKind {
    DatasetSourceKind::GaussianClusters
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            path: None,
            n_classes: None,
            samples_per_class: None,
            input_dim: None,
            image_side: None,
            class_separation: None,
            noise_sigma: None,
            seed: None,
        }
    }
}

impl DatasetConfig {
    /// Generator spec for synthetic kinds; `None` for CSV input.
    pub fn synthetic(&self) -> Option<DatasetSpec> {
        let kind = match self.kind {
            DatasetSourceKind::GaussianClusters => DatasetKind::GaussianClusters,
            DatasetSourceKind::ConcentricSpirals => DatasetKind::ConcentricSpirals,
            DatasetSourceKind::GridImages => DatasetKind::GridImages,
            DatasetSourceKind::Csv => return None,
        };
        let base = DatasetSpec::synth_split_10(0);
        Some(DatasetSpec {
            kind,
            n_classes: self.n_classes.unwrap_or(base.n_classes),
            samples_per_class: self.samples_per_class.unwrap_or(base.samples_per_class),
            input_dim: self.input_dim.unwrap_or(base.input_dim),
            image_side: self.image_side.unwrap_or(base.image_side),
            class_separation: self.class_separation.unwrap_or(base.class_separation),
            noise_sigma: self.noise_sigma.unwrap_or(base.noise_sigma),
            seed: self.seed.unwrap_or(base.seed),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub n_tasks: usize,
    /// Defaults to `n_classes / n_tasks`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes_per_task: Option<usize>,
    #[serde(default)]
    pub order_seed: u64,
    /// Class-balanced iid subsets sharing one head instead of class-disjoint tasks.
    #[serde(default)]
    pub iid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_family")]
    pub family: Family,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub representation_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_dim: Option<usize>,
}

fn default_family() -> Family {
    Family::Mlp
}
fn default_depth() -> usize {
    2
}
fn default_width() -> usize {
    32
}

impl ModelConfig {
    pub fn spec(&self, input_shape: &[usize]) -> Result<ModelSpec, ConfigError> {
        let mut spec = match self.family {
            Family::Mlp => {
                if input_shape.len() != 1 {
                    return Err(bad("model.family", "mlp needs vector inputs"));
                }
                ModelSpec::mlp(input_shape[0], self.depth, self.width)
            }
            Family::Smallconv => {
                let s: [usize; 3] = input_shape
                    .try_into()
                    .map_err(|_| bad("model.family", "smallconv needs image inputs"))?;
                ModelSpec::smallconv(s, self.depth, self.width)
            }
        };
        if let Some(r) = self.representation_dim {
            spec.representation_dim = r;
        }
        if let Some(p) = self.projection_dim {
            spec = spec.with_projection(p);
        }
        spec.validate().map_err(|e| bad("model", e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// SGD lr 0.05 / momentum 0.9 offline; lr 0.01 without momentum online.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
}

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    32
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Offline,
            epochs: default_epochs(),
            batch_size: default_batch(),
            optimizer: None,
        }
    }
}

impl TrainingConfig {
    pub fn optimizer(&self) -> OptimizerKind {
        self.optimizer.unwrap_or(match self.mode {
            RunMode::Offline => OptimizerKind::sgd(0.05, 0.9),
            RunMode::Online => OptimizerKind::sgd(0.01, 0.0),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub cka: bool,
    #[serde(default)]
    pub all_lp: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nme_m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blockwise: Option<BlockwiseSpec>,
    /// Transform used when `probe.augment` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_augment: Option<AugmentationSpec>,
}

/// One fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    pub method: Method,
    #[serde(default)]
    pub training: TrainingConfig,
    /// View transform for contrastive training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentationSpec>,
    #[serde(default)]
    pub probe: ProbeSpec,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    /// Also write one snapshot file per checkpoint.
    #[serde(default)]
    pub save_snapshots: bool,
}

fn default_model() -> ModelConfig {
    ModelConfig {
        family: default_family(),
        depth: default_depth(),
        width: default_width(),
        representation_dim: None,
        projection_dim: None,
    }
}

impl ExperimentConfig {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    /// sha256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn method_config(&self) -> MethodConfig {
        MethodConfig {
            method: self.method,
            optimizer: self.training.optimizer(),
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            augment: self.augment,
        }
    }

    pub fn run_config(&self, input_shape: &[usize]) -> Result<RunConfig, ConfigError> {
        Ok(RunConfig {
            seed: self.seed,
            model: self.model.spec(input_shape)?,
            method: self.method_config(),
            mode: self.training.mode,
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            probe: self.probe,
            probe_augment: self.analysis.probe_augment,
            nme_m: self.analysis.nme_m,
            cka: self.analysis.cka,
            blockwise: self.analysis.blockwise.clone(),
            all_lp: self.analysis.all_lp,
        }
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.split.n_tasks == 0 {
            return Err(bad("split.n_tasks", "must be ≥ 1"));
        }
        match (&self.dataset.kind, &self.dataset.path) {
            (DatasetSourceKind::Csv, None) => return Err(bad("dataset.path", "required for kind = \"csv\"")),
            (DatasetSourceKind::Csv, Some(_)) => {}
            (_, Some(_)) => return Err(bad("dataset.path", "only valid for kind = \"csv\"")),
            (_, None) => {
                let spec = self.dataset.synthetic().expect("synthetic kind");
                spec.validate().map_err(|e| bad("dataset", e.to_string()))?;
                if !self.split.iid {
                    let cpt = self.split.classes_per_task.unwrap_or(spec.n_classes / self.split.n_tasks);
                    if cpt == 0 || cpt * self.split.n_tasks != spec.n_classes {
                        return Err(bad(
                            "split",
                            format!("{} tasks × {cpt} classes does not cover {} classes", self.split.n_tasks, spec.n_classes),
                        ));
                    }
                }
            }
        }
        if self.model.depth == 0 || self.model.width == 0 {
            return Err(bad("model", "depth and width must be ≥ 1"));
        }
        self.method.validate().map_err(|e| bad("method", e.to_string()))?;
        let t = &self.training;
        if t.epochs == 0 {
            return Err(bad("training.epochs", "must be ≥ 1"));
        }
        if t.batch_size == 0 {
            return Err(bad("training.batch_size", "must be ≥ 1"));
        }
        let opt = self.training.optimizer();
        opt.validate().map_err(|e| bad("training.optimizer", e.to_string()))?;
        t.mode.optimizer(opt).map_err(|e| bad("training.optimizer", e.to_string()))?;
        if let Some(a) = &self.augment {
            a.validate().map_err(|e| bad("augment", e.to_string()))?;
        }
        self.probe.validate().map_err(|e| bad("probe", e.to_string()))?;
        if self.analysis.nme_m == Some(0) {
            return Err(bad("analysis.nme_m", "must be ≥ 1"));
        }
        if let Some(b) = &self.analysis.blockwise {
            if b.task >= self.split.n_tasks {
                return Err(bad("analysis.blockwise.task", "beyond the last task"));
            }
            if b.taps.is_empty() {
                return Err(bad("analysis.blockwise.taps", "empty"));
            }
        }
        Ok(())
    }

    /// Output directory: `output_dir` (default `runs/<label>`) under `root` when relative.
    pub fn output_path(&self, root: &Path) -> PathBuf {
        let dir = self
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(self.label()));
        if dir.is_absolute() {
            dir
        } else {
            root.join(dir)
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn resolve(value: toml::Value) -> Result<ExperimentConfig, ConfigError> {
    let cfg = ExperimentConfig::deserialize(value).map_err(|e| ConfigError::Schema(e.message().trim().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a config document into one experiment per grid block (or just the base).
/// A grid block without `name` or `output_dir` gets `<base label>-<index>`.
pub fn parse(text: &str) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let mut doc: toml::Value = text
        .parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| ConfigError::Syntax(e.message().to_string()))?;
    let grid = match doc.as_table_mut().and_then(|t| t.remove("grid")) {
        None => Vec::new(),
        Some(toml::Value::Array(blocks)) => blocks,
        Some(_) => return Err(bad("grid", "must be an array of tables ([[grid]])")),
    };
    if grid.is_empty() {
        return Ok(vec![resolve(doc)?]);
    }
    grid.into_iter()
        .enumerate()
        .map(|(i, block)| {
            if !block.is_table() {
                return Err(bad("grid", format!("entry {i} is not a table")));
            }
            let mut v = doc.clone();
            let named = block.get("name").is_some();
            let placed = block.get("output_dir").is_some();
            merge(&mut v, block);
            let mut cfg = resolve(v).map_err(|e| match e {
                ConfigError::Schema(m) => ConfigError::Schema(format!("grid entry {i}: {m}")),
                other => other,
            })?;
            if !named {
                cfg.name = Some(format!("{}-{i}", cfg.label()));
            }
            if !placed {
                cfg.output_dir = Some(match &cfg.output_dir {
                    Some(d) => d.join(cfg.label()),
                    None => PathBuf::from("runs").join(cfg.label()),
                });
            }
            Ok(cfg)
        })
        .collect()
}

pub fn load(path: &Path) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse(&text)
}
