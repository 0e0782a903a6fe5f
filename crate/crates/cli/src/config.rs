use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use cre_core::clloop::{LoopConfig, LrSchedule};
use cre_core::corpus::Caps;
use cre_core::modeling::BuiltinConfig;
use cre_core::prompting::PromptTemplateId;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Tacred,
    Fewrel,
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Builtin,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Every knob of an experiment. Serialized flat; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetFormat,
    pub input: Option<PathBuf>,
    pub relation_order: Option<PathBuf>,
    pub dataset_id: Option<String>,
    pub train_cap: usize,
    pub eval_cap: usize,
    pub epochs_new: usize,
    pub epochs_replay: usize,
    pub lr0: f64,
    pub lr_schedule: LrSchedule,
    pub plateau_factor: f64,
    pub plateau_tolerance: f64,
    pub lr_floor_ratio: f64,
    pub memory_size: usize,
    pub template: PromptTemplateId,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub kmeans_restarts: usize,
    pub backend: BackendKind,
    pub backend_command: Vec<String>,
    pub handshake_timeout_secs: u64,
    pub feature_dim: usize,
    pub hidden: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Worker threads for seeds and arms; 0 uses every core.
    pub workers: usize,
    pub checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let lc = LoopConfig::default();
        let bc = BuiltinConfig::default();
        ExperimentConfig {
            dataset: DatasetFormat::Normalized,
            input: None,
            relation_order: None,
            dataset_id: None,
            train_cap: Caps::TACRED.train,
            eval_cap: Caps::TACRED.eval,
            epochs_new: lc.epochs_new,
            epochs_replay: lc.epochs_replay,
            lr0: lc.lr0,
            lr_schedule: lc.lr_schedule,
            plateau_factor: lc.plateau_factor,
            plateau_tolerance: lc.plateau_tolerance,
            lr_floor_ratio: lc.lr_floor_ratio,
            memory_size: lc.memory_size,
            template: lc.template,
            batch_size: bc.batch_size,
            eval_batch: lc.eval_batch,
            kmeans_restarts: lc.kmeans_restarts,
            backend: BackendKind::Builtin,
            backend_command: Vec::new(),
            handshake_timeout_secs: 120,
            feature_dim: bc.feature_dim,
            hidden: bc.hidden,
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("runs"),
            workers: 0,
            checkpoints: false,
        }
    }
}

/// Keys that only decide where and how fast things run, not what is computed.
pub const EXECUTION_KEYS: [&str; 3] = ["output_dir", "workers", "checkpoints"];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // paths inside a config file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.input, &mut cfg.relation_order].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        if self.train_cap == 0 || self.eval_cap == 0 {
            bail!("train_cap and eval_cap must be positive");
        }
        if !self.feature_dim.is_power_of_two() {
            bail!("feature_dim must be a power of two, got {}", self.feature_dim);
        }
        if self.hidden == 0 {
            bail!("hidden must be positive");
        }
        if self.backend == BackendKind::External && self.backend_command.is_empty() {
            bail!("backend \"external\" needs backend_command");
        }
        self.loop_config(0).validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(())
    }

    pub fn caps(&self) -> Caps {
        Caps {
            train: self.train_cap,
            eval: self.eval_cap,
        }
    }

    pub fn loop_config(&self, seed: u64) -> LoopConfig {
        LoopConfig {
            epochs_new: self.epochs_new,
            epochs_replay: self.epochs_replay,
            lr0: self.lr0,
            lr_schedule: self.lr_schedule,
            plateau_factor: self.plateau_factor,
            plateau_tolerance: self.plateau_tolerance,
            lr_floor_ratio: self.lr_floor_ratio,
            memory_size: self.memory_size,
            template: self.template,
            seed,
            batch_size: self.batch_size,
            eval_batch: self.eval_batch,
            kmeans_restarts: self.kmeans_restarts,
        }
    }

    pub fn builtin_config(&self, seed: u64) -> BuiltinConfig {
        BuiltinConfig {
            feature_dim: self.feature_dim,
            hidden: self.hidden,
            batch_size: self.batch_size,
            seed,
        }
    }

    /// The configuration as echoed into reports.
    pub fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            for key in EXECUTION_KEYS {
                map.remove(key);
            }
        }
        v
    }

    pub fn dataset_id(&self) -> String {
        self.dataset_id.clone().unwrap_or_else(|| {
            self.input
                .as_deref()
                .and_then(Path::file_stem)
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "unnamed".into())
        })
    }
}

/// Keys whose echoed values differ between two configs, ignoring `ignore`.
pub fn differing_keys(a: &Value, b: &Value, ignore: &[&str]) -> Vec<String> {
    let empty = Map::new();
    let (a, b) = (a.as_object().unwrap_or(&empty), b.as_object().unwrap_or(&empty));
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| !ignore.contains(&k.as_str()) && a.get(*k) != b.get(*k))
        .cloned()
        .collect()
}

/// Command-line overrides, one per config key.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat JSON config file; flags override its keys.
    #[arg(long, env = "CRE_CONFIG", global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetFormat>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub relation_order: Option<PathBuf>,
    #[arg(long)]
    pub dataset_id: Option<String>,
    #[arg(long)]
    pub train_cap: Option<usize>,
    #[arg(long)]
    pub eval_cap: Option<usize>,
    #[arg(long)]
    pub epochs_new: Option<usize>,
    #[arg(long)]
    pub epochs_replay: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long, value_enum)]
    pub lr_schedule: Option<Schedule>,
    #[arg(long)]
    pub plateau_factor: Option<f64>,
    #[arg(long)]
    pub plateau_tolerance: Option<f64>,
    #[arg(long)]
    pub lr_floor_ratio: Option<f64>,
    #[arg(long)]
    pub memory_size: Option<usize>,
    #[arg(long)]
    pub template: Option<PromptTemplateId>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_batch: Option<usize>,
    #[arg(long)]
    pub kmeans_restarts: Option<usize>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// External backend argv, e.g. --backend-command python --backend-command serve.py
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    pub backend_command: Option<Vec<String>>,
    #[arg(long)]
    pub handshake_timeout_secs: Option<u64>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub checkpoints: Option<bool>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                })*
            };
        }
        set!(
            dataset,
            train_cap,
            eval_cap,
            epochs_new,
            epochs_replay,
            lr0,
            plateau_factor,
            plateau_tolerance,
            lr_floor_ratio,
            memory_size,
            template,
            batch_size,
            eval_batch,
            kmeans_restarts,
            backend,
            backend_command,
            handshake_timeout_secs,
            feature_dim,
            hidden,
            seeds,
            output_dir,
            workers,
            checkpoints
        );
        if let Some(p) = &self.input {
            cfg.input = Some(p.clone());
        }
        if let Some(p) = &self.relation_order {
            cfg.relation_order = Some(p.clone());
        }
        if let Some(id) = &self.dataset_id {
            cfg.dataset_id = Some(id.clone());
        }
        if let Some(s) = self.lr_schedule {
            cfg.lr_schedule = match s {
                Schedule::Cosine => LrSchedule::Cosine,
                Schedule::Constant => LrSchedule::Constant,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
