//! Run configuration: one TOML file per experiment.
//!
//! Unknown keys are rejected while parsing; semantic checks run afterwards and
//! point back at the offending line when the key can be found in the source.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bptt::{BackwardModel, BpttConfig};
use crate::dynamics::{DynamicsParams, InitDistribution};
use crate::env::{Env, EnvConfig, ModelMode, TaskMode};
use crate::observation::{CameraConfig, LayoutConfig};
use crate::policy::Architecture;
use crate::ppo::PpoConfig;
use crate::pretrain::PretrainConfig;
use crate::reward::RewardParams;

/// Environment variable naming the default root for run directories.
pub const OUTPUT_ROOT_VAR: &str = "DIFFQUAD_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainer {
    Bptt,
    Ppo,
}

impl fmt::Display for Trainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trainer::Bptt => "bptt",
            Trainer::Ppo => "ppo",
        })
    }
}

pub fn task_name(task: TaskMode) -> &'static str {
    match task {
        TaskMode::State => "state",
        TaskMode::Features => "features",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskMode,
    pub trainer: Trainer,
    /// Model stepping the environments forward.
    pub model: ModelMode,
    pub envs: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Hidden layer sizes; the task's standard sizes when absent.
    pub hidden: Option<Vec<usize>>,
    pub shard_size: usize,
    /// Checkpoint period in iterations, 0 for the final checkpoint only.
    pub checkpoint_every: usize,
    /// Run representation pretraining before training (feature task only).
    pub pretrain_first: bool,
    pub output_dir: Option<PathBuf>,
    pub blowup_threshold: f64,
    pub blowup_reward: f64,
    pub dynamics: DynamicsParams,
    pub init: InitDistribution,
    pub camera: CameraConfig,
    pub layout: LayoutConfig,
    pub reward: RewardParams,
    pub bptt: BpttConfig,
    pub ppo: PpoConfig,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        RunConfig {
            task: env.task,
            trainer: Trainer::Bptt,
            model: env.model,
            envs: 100,
            horizon: env.horizon,
            iterations: 1000,
            seed: 0,
            hidden: None,
            shard_size: 25,
            checkpoint_every: 100,
            pretrain_first: false,
            output_dir: None,
            blowup_threshold: env.blowup_threshold,
            blowup_reward: env.blowup_reward,
            dynamics: env.dynamics,
            init: env.init,
            camera: env.camera,
            layout: env.layout,
            reward: env.reward,
            bptt: BpttConfig::default(),
            ppo: PpoConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

/// Parse or validation failure, with the source line when known.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub source_name: String,
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.source_name)?;
        if let Some(l) = self.line {
            write!(f, ":{l}")?;
        }
        write!(f, ": ")?;
        if let Some(k) = &self.key {
            write!(f, "`{k}`: ")?;
        }
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    /// Parses and validates `text`; `source_name` labels error messages.
    pub fn from_toml_str(text: &str, source_name: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            ConfigError { source_name: source_name.into(), line, key: None, message: e.message().trim().to_string() }
        })?;
        cfg.validate().map_err(|(key, message)| ConfigError {
            source_name: source_name.into(),
            line: locate_key(text, &key),
            key: Some(key),
            message,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source_name: path.display().to_string(),
            line: None,
            key: None,
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Checks every field; the error names the offending key path.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |k: &str, m: String| Err((k.to_string(), m));
        if self.envs == 0 {
            return err("envs", "must be at least 1".into());
        }
        if self.horizon == 0 {
            return err("horizon", "must be at least 1".into());
        }
        if self.shard_size == 0 {
            return err("shard_size", "must be at least 1".into());
        }
        if let Some(h) = &self.hidden {
            if h.is_empty() || h.contains(&0) {
                return err("hidden", format!("layer sizes must be positive, got {h:?}"));
            }
        }
        if !(self.blowup_threshold > 0.0) {
            return err("blowup_threshold", "must be positive".into());
        }
        if !self.blowup_reward.is_finite() {
            return err("blowup_reward", "must be finite".into());
        }
        if self.pretrain_first && self.task != TaskMode::Features {
            return err("pretrain_first", "pretraining needs task = \"features\"".into());
        }
        if self.bptt.backward == BackwardModel::Full && self.model != ModelMode::Full && self.trainer == Trainer::Bptt {
            return err("bptt.backward", "full backward needs model = \"full\"".into());
        }
        if let Err(e) = self.dynamics.validate() {
            return err("dynamics", e.to_string());
        }
        if !(self.init.scale >= 0.0) {
            return err("init.scale", "must be non-negative".into());
        }
        if let Err(e) = self.reward.validate() {
            return err("reward", e.to_string());
        }
        if !(self.camera.pixel_noise >= 0.0) {
            return err("camera.pixel_noise", "must be non-negative".into());
        }
        if let Err(e) = self.bptt_config().validate() {
            return err("bptt", e.to_string());
        }
        if let Err(e) = self.ppo_config().validate() {
            return err("ppo", e.to_string());
        }
        if let Err(e) = self.pretrain_config().validate() {
            return err("pretrain", e.to_string());
        }
        if let Err(e) = Env::new(self.env_config()) {
            return err("camera", e.to_string());
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            task: self.task,
            model: self.model,
            horizon: self.horizon,
            dynamics: self.dynamics.clone(),
            init: self.init.clone(),
            camera: self.camera.clone(),
            layout: self.layout.clone(),
            reward: self.reward.clone(),
            blowup_threshold: self.blowup_threshold,
            blowup_reward: self.blowup_reward,
        }
    }

    pub fn architecture(&self) -> Architecture {
        let standard = match self.task {
            TaskMode::State => Architecture::state_policy(),
            TaskMode::Features => Architecture::feature_policy(),
        };
        match &self.hidden {
            Some(h) => Architecture::new(standard.input, h, standard.output),
            None => standard,
        }
    }

    pub fn bptt_config(&self) -> BpttConfig {
        BpttConfig { iterations: self.iterations, num_envs: self.envs, shard_size: self.shard_size, ..self.bptt.clone() }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig { iterations: self.iterations, num_envs: self.envs, shard_size: self.shard_size, ..self.ppo.clone() }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig { shard_size: self.shard_size, ..self.pretrain.clone() }
    }

    /// Fully resolved TOML, the form written into every run directory.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// `output_dir` if set, else a directory under the output root named
    /// after task, trainer and seed.
    pub fn resolve_output_dir(&self) -> PathBuf {
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        output_root().join(format!("{}-{}-s{}", task_name(self.task), self.trainer, self.seed))
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// `package-version+git-revision`, or `+unknown` outside a git checkout.
pub fn version_stamp() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), option_env!("DIFFQUAD_GIT_REV").unwrap_or("unknown"))
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line defining dotted key `path`, falling back to its nearest enclosing
/// table header. Handles `[table]` headers and `key = value` lines.
fn locate_key(text: &str, path: &str) -> Option<usize> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut table: Vec<String> = Vec::new();
    let mut best: Option<(usize, usize)> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.starts_with('[') {
            let name = line.trim_matches(|c| c == '[' || c == ']').trim();
            table = name.split('.').map(|s| s.trim().to_string()).collect();
            let depth = prefix_len(&table, &parts);
            if depth == table.len().min(parts.len()) && depth > best.map_or(0, |b| b.1) {
                best = Some((n + 1, depth));
            }
            continue;
        }
        let Some((key, _)) = line.split_once('=') else { continue };
        let mut full = table.clone();
        full.extend(key.trim().split('.').map(|s| s.trim().trim_matches('"').to_string()));
        let depth = prefix_len(&full, &parts);
        if depth == full.len().min(parts.len()) && depth > best.map_or(0, |b| b.1) {
            best = Some((n + 1, depth));
        }
    }
    best.map(|b| b.0)
}

fn prefix_len(a: &[String], b: &[&str]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == *y).count()
}
