//! Plain key=value run configuration.
//!
//! One `key=value` per line, `#` comments. Unknown keys are errors. The
//! resolved configuration (defaults filled in) dumps back to the same format
//! with sorted keys, so two runs can be diffed textually and a dump re-parses
//! to an identical configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{FeasibilityMode, SyntheticWorldConfig};
use crate::model::{cpm_kernel_len, ModelConfig};
use crate::params::OptimizerMode;
use crate::train::{StageConfig, StageId};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected key=value, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("duplicate configuration key `{0}`")]
    DuplicateKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {expect}")]
    BadValue {
        key: String,
        value: String,
        expect: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Progressive,
    Joint,
    JointUp,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Progressive => "progressive",
            RunMode::Joint => "joint",
            RunMode::JointUp => "joint_up",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    Full,
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSetting {
    Closed,
    Open,
}

impl EvalSetting {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSetting::Closed => "closed",
            EvalSetting::Open => "open",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSettings {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub optimizer: OptimizerMode,
}

impl Default for StageSettings {
    fn default() -> Self {
        StageSettings {
            lr: 1e-3,
            max_epochs: 200,
            batch_size: 128,
            patience: 10,
            optimizer: OptimizerMode::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: DataSource,
    pub synth: SyntheticWorldConfig,
    /// Embedding width; `None` means "use the dataset's feature dimension".
    pub model_d: Option<usize>,
    pub n_layers: usize,
    pub cpm_kernel_fraction: f64,
    /// Explicit kernel length; overrides the fraction when set.
    pub cpm_kernel_len: Option<usize>,
    pub alpha: f64,
    pub mode: RunMode,
    pub labels: LabelMode,
    pub keep_state: f64,
    pub keep_object: f64,
    pub stages: [StageSettings; 3],
    pub eval_setting: EvalSetting,
    pub n_biases: usize,
    pub seed_data: u64,
    pub seed_init: u64,
    pub seed_shuffle: u64,
    pub ablate_n_layers: Vec<usize>,
    pub ablate_cpm_fraction: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            source: DataSource::Synthetic,
            synth: SyntheticWorldConfig::default(),
            model_d: None,
            n_layers: 3,
            cpm_kernel_fraction: 0.5,
            cpm_kernel_len: None,
            alpha: 1.0,
            mode: RunMode::Progressive,
            labels: LabelMode::Full,
            keep_state: 0.5,
            keep_object: 0.5,
            stages: [
                StageSettings::default(),
                StageSettings::default(),
                StageSettings::default(),
            ],
            eval_setting: EvalSetting::Open,
            n_biases: 101,
            seed_data: 1,
            seed_init: 2,
            seed_shuffle: 3,
            ablate_n_layers: vec![2, 3, 4, 5],
            ablate_cpm_fraction: vec![0.05, 0.5, 1.0],
        }
    }
}

/// Parses "0.5", "1/2", or "1/20" style fractions.
fn parse_fraction(tok: &str) -> Option<f64> {
    if let Some((num, den)) = tok.split_once('/') {
        let n: f64 = num.trim().parse().ok()?;
        let d: f64 = den.trim().parse().ok()?;
        if d == 0.0 {
            return None;
        }
        Some(n / d)
    } else {
        tok.trim().parse().ok()
    }
}

impl RunConfig {
    pub fn parse_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => raw[..pos].trim(),
                None => raw.trim(),
            };
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: no + 1,
                text: line.to_string(),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if seen.insert(key.clone(), value).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
        }
        let mut cfg = RunConfig::default();
        for (key, value) in &seen {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |expect: &'static str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expect,
        };
        macro_rules! num {
            ($ty:ty, $expect:literal) => {
                value.parse::<$ty>().map_err(|_| bad($expect))?
            };
        }
        match key {
            "data.source" => {
                self.source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "file" => DataSource::File(PathBuf::new()),
                    _ => return Err(bad("synthetic|file")),
                }
            }
            "data.path" => {
                self.source = DataSource::File(PathBuf::from(value));
            }
            "synth.n_states" => self.synth.n_states = num!(usize, "positive integer"),
            "synth.n_objects" => self.synth.n_objects = num!(usize, "positive integer"),
            "synth.feature_dim" => self.synth.feature_dim = num!(usize, "positive integer"),
            "synth.density" => self.synth.feasibility_density = num!(f64, "fraction in (0,1]"),
            "synth.seen_fraction" => self.synth.seen_fraction = num!(f64, "fraction in [0,1]"),
            "synth.samples_per_pair" => {
                self.synth.samples_per_seen_pair = num!(usize, "positive integer")
            }
            "synth.noise_sigma" => self.synth.noise_sigma = num!(f64, "non-negative real"),
            "synth.state_signal" => self.synth.state_signal = num!(f64, "non-negative real"),
            "synth.feasibility" => {
                self.synth.feasibility = match value {
                    "random" => FeasibilityMode::Random,
                    "bijection" => FeasibilityMode::Bijection,
                    _ => return Err(bad("random|bijection")),
                }
            }
            "model.d" => {
                self.model_d = if value == "auto" {
                    None
                } else {
                    Some(num!(usize, "positive integer or auto"))
                }
            }
            "model.n_layers" => self.n_layers = num!(usize, "positive integer"),
            "model.cpm_kernel_fraction" => {
                self.cpm_kernel_fraction =
                    parse_fraction(value).ok_or_else(|| bad("fraction like 1/2 or 0.5"))?
            }
            "model.cpm_kernel_len" => {
                self.cpm_kernel_len = if value == "auto" {
                    None
                } else {
                    Some(num!(usize, "odd integer or auto"))
                }
            }
            "model.alpha" => self.alpha = num!(f64, "real in [0,1]"),
            "mode" => {
                self.mode = match value {
                    "progressive" => RunMode::Progressive,
                    "joint" => RunMode::Joint,
                    "joint_up" => RunMode::JointUp,
                    _ => return Err(bad("progressive|joint|joint_up")),
                }
            }
            "labels" => {
                self.labels = match value {
                    "full" => LabelMode::Full,
                    "partial" => LabelMode::Partial,
                    _ => return Err(bad("full|partial")),
                }
            }
            "partial.keep_state" => self.keep_state = num!(f64, "fraction in [0,1]"),
            "partial.keep_object" => self.keep_object = num!(f64, "fraction in [0,1]"),
            "eval.setting" => {
                self.eval_setting = match value {
                    "closed" => EvalSetting::Closed,
                    "open" => EvalSetting::Open,
                    _ => return Err(bad("closed|open")),
                }
            }
            "eval.n_biases" => self.n_biases = num!(usize, "integer >= 2"),
            "seed.data" => self.seed_data = num!(u64, "u64"),
            "seed.init" => self.seed_init = num!(u64, "u64"),
            "seed.shuffle" => self.seed_shuffle = num!(u64, "u64"),
            "ablate.n_layers" => {
                self.ablate_n_layers = value
                    .split(',')
                    .map(|t| t.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad("comma list of integers"))?
            }
            "ablate.cpm_fraction" => {
                self.ablate_cpm_fraction = value
                    .split(',')
                    .map(parse_fraction)
                    .collect::<Option<_>>()
                    .ok_or_else(|| bad("comma list of fractions"))?
            }
            _ if key.starts_with("stage") => {
                let (stage_key, field) = key
                    .split_once('.')
                    .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
                let idx = match stage_key {
                    "stage1" => 0,
                    "stage2" => 1,
                    "stage3" => 2,
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                };
                let stage = &mut self.stages[idx];
                match field {
                    "lr" => stage.lr = num!(f64, "positive real"),
                    "max_epochs" => stage.max_epochs = num!(usize, "non-negative integer"),
                    "batch_size" => stage.batch_size = num!(usize, "positive integer"),
                    "patience" => stage.patience = num!(usize, "positive integer"),
                    "optimizer" => {
                        stage.optimizer = match value {
                            "adam" => OptimizerMode::Adam,
                            "sgd" => OptimizerMode::Sgd,
                            _ => return Err(bad("adam|sgd")),
                        }
                    }
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if let DataSource::File(p) = &self.source {
            if p.as_os_str().is_empty() {
                return Err(ConfigError::Invalid(
                    "data.source=file requires data.path".into(),
                ));
            }
        }
        if self.n_biases < 2 {
            return Err(ConfigError::Invalid("eval.n_biases must be >= 2".into()));
        }
        if let Some(k) = self.cpm_kernel_len {
            if k % 2 == 0 || k == 0 {
                return Err(ConfigError::Invalid(format!(
                    "model.cpm_kernel_len must be odd, got {k}"
                )));
            }
        }
        Ok(())
    }

    /// Canonical dump: every key with its resolved value, sorted. Reparsing
    /// the dump yields an identical configuration.
    pub fn dump(&self) -> String {
        let mut kv: Vec<(String, String)> = Vec::new();
        let (source, path) = match &self.source {
            DataSource::Synthetic => ("synthetic".to_string(), None),
            DataSource::File(p) => ("file".to_string(), Some(p.display().to_string())),
        };
        kv.push(("data.source".into(), source));
        if let Some(p) = path {
            kv.push(("data.path".into(), p));
        }
        kv.push(("synth.n_states".into(), self.synth.n_states.to_string()));
        kv.push(("synth.n_objects".into(), self.synth.n_objects.to_string()));
        kv.push(("synth.feature_dim".into(), self.synth.feature_dim.to_string()));
        kv.push(("synth.density".into(), self.synth.feasibility_density.to_string()));
        kv.push(("synth.seen_fraction".into(), self.synth.seen_fraction.to_string()));
        kv.push((
            "synth.samples_per_pair".into(),
            self.synth.samples_per_seen_pair.to_string(),
        ));
        kv.push(("synth.noise_sigma".into(), self.synth.noise_sigma.to_string()));
        kv.push(("synth.state_signal".into(), self.synth.state_signal.to_string()));
        kv.push((
            "synth.feasibility".into(),
            match self.synth.feasibility {
                FeasibilityMode::Random => "random".into(),
                FeasibilityMode::Bijection => "bijection".into(),
            },
        ));
        kv.push((
            "model.d".into(),
            self.model_d.map_or("auto".into(), |d| d.to_string()),
        ));
        kv.push(("model.n_layers".into(), self.n_layers.to_string()));
        kv.push((
            "model.cpm_kernel_fraction".into(),
            self.cpm_kernel_fraction.to_string(),
        ));
        kv.push((
            "model.cpm_kernel_len".into(),
            self.cpm_kernel_len.map_or("auto".into(), |k| k.to_string()),
        ));
        kv.push(("model.alpha".into(), self.alpha.to_string()));
        kv.push(("mode".into(), self.mode.as_str().into()));
        kv.push((
            "labels".into(),
            match self.labels {
                LabelMode::Full => "full".into(),
                LabelMode::Partial => "partial".into(),
            },
        ));
        kv.push(("partial.keep_state".into(), self.keep_state.to_string()));
        kv.push(("partial.keep_object".into(), self.keep_object.to_string()));
        for (i, stage) in self.stages.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            kv.push((format!("{p}.lr"), stage.lr.to_string()));
            kv.push((format!("{p}.max_epochs"), stage.max_epochs.to_string()));
            kv.push((format!("{p}.batch_size"), stage.batch_size.to_string()));
            kv.push((format!("{p}.patience"), stage.patience.to_string()));
            kv.push((
                format!("{p}.optimizer"),
                match stage.optimizer {
                    OptimizerMode::Adam => "adam".into(),
                    OptimizerMode::Sgd => "sgd".into(),
                },
            ));
        }
        kv.push(("eval.setting".into(), self.eval_setting.as_str().into()));
        kv.push(("eval.n_biases".into(), self.n_biases.to_string()));
        kv.push(("seed.data".into(), self.seed_data.to_string()));
        kv.push(("seed.init".into(), self.seed_init.to_string()));
        kv.push(("seed.shuffle".into(), self.seed_shuffle.to_string()));
        kv.push((
            "ablate.n_layers".into(),
            self.ablate_n_layers
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        ));
        kv.push((
            "ablate.cpm_fraction".into(),
            self.ablate_cpm_fraction
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        ));
        kv.sort();
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn apply_seed_overrides(
        &mut self,
        data: Option<u64>,
        init: Option<u64>,
        shuffle: Option<u64>,
    ) {
        if let Some(s) = data {
            self.seed_data = s;
        }
        if let Some(s) = init {
            self.seed_init = s;
        }
        if let Some(s) = shuffle {
            self.seed_shuffle = s;
        }
    }

    /// World generator settings with the data seed applied.
    pub fn synth_config(&self) -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            seed: self.seed_data,
            ..self.synth.clone()
        }
    }

    /// Resolves the model configuration against a loaded dataset's geometry.
    pub fn model_config(
        &self,
        raw_dim: usize,
        n_states: usize,
        n_objects: usize,
    ) -> ModelConfig {
        let d = self.model_d.unwrap_or(raw_dim);
        let kernel = self
            .cpm_kernel_len
            .unwrap_or_else(|| cpm_kernel_len(d, self.cpm_kernel_fraction));
        ModelConfig {
            raw_dim,
            d,
            n_layers: self.n_layers,
            n_states,
            n_objects,
            cpm_kernel_len: kernel,
            alpha: self.alpha,
            backbone_trainable: self.mode == RunMode::JointUp,
        }
    }

    pub fn stage_configs(&self) -> [StageConfig; 3] {
        let mk = |i: usize, id: StageId| StageConfig {
            stage: id,
            lr: self.stages[i].lr,
            max_epochs: self.stages[i].max_epochs,
            batch_size: self.stages[i].batch_size,
            patience: self.stages[i].patience,
            optimizer: self.stages[i].optimizer,
        };
        [
            mk(0, StageId::One),
            mk(1, StageId::Two),
            mk(2, StageId::Three),
        ]
    }
}
