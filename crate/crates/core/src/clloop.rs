//! Task-incremental fine-tuning with memory replay.
//!
//! For each task `k` of a stream:
//!
//! 1. train `epochs_new` epochs on the task's training prompts, measuring the
//!    validation loss after each epoch and adjusting the learning rate;
//! 2. select `m` memory samples per relation of task `k` with K-means over the
//!    current model's embeddings;
//! 3. if the memory already holds samples from earlier tasks, fine-tune
//!    `epochs_replay` epochs on all of it;
//! 4. add the task-`k` selection to memory;
//! 5. evaluate on the test sets of tasks `1..=k` with the cumulative label set.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{RelationInstance, TaskSplit, TaskStream};
use crate::metrics::{self, PredictionRecord, RunMeta, RunReport, RunStatus};
use crate::modeling::{Backend, BackendError, EmbeddingVector};
use crate::prompting::{self, Prompt, PromptError, PromptTemplateId, TEMPLATE_VERSION};
use crate::replay::{self, KMeansParams, MemoryStore, ReplayError};
use crate::rng;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("task stream is empty")]
    EmptyStream,
    #[error("invalid loop configuration: {0}")]
    InvalidConfig(String),
    #[error("task {task}: {source}")]
    Prompt { task: usize, source: PromptError },
    #[error("checkpoint is for stage {stage}, but the stream has {tasks} tasks")]
    BadCheckpoint { stage: usize, tasks: usize },
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Epochs on each new task.
    pub epochs_new: usize,
    /// Epochs on the replay memory after each task.
    pub epochs_replay: usize,
    pub lr0: f64,
    pub lr_schedule: LrSchedule,
    pub plateau_factor: f64,
    pub plateau_tolerance: f64,
    /// The learning rate never drops below `lr0 * lr_floor_ratio`.
    pub lr_floor_ratio: f64,
    pub memory_size: usize,
    pub template: PromptTemplateId,
    pub seed: u64,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub kmeans_restarts: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            epochs_new: 5,
            epochs_replay: 5,
            lr0: 0.001,
            lr_schedule: LrSchedule::Cosine,
            plateau_factor: 0.5,
            plateau_tolerance: 1e-4,
            lr_floor_ratio: 0.01,
            memory_size: 10,
            template: PromptTemplateId::T1,
            seed: 0,
            batch_size: 8,
            eval_batch: 64,
            kmeans_restarts: 1,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        let bad = |msg: &str| Err(LoopError::InvalidConfig(msg.to_string()));
        if self.epochs_new == 0 {
            return bad("epochs_new must be >= 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.plateau_tolerance.is_nan() || self.plateau_tolerance < 0.0 {
            return bad("plateau_tolerance must be non-negative");
        }
        if !(self.lr_floor_ratio > 0.0 && self.lr_floor_ratio <= 1.0) {
            return bad("lr_floor_ratio must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.kmeans_restarts == 0 {
            return bad("kmeans_restarts must be >= 1");
        }
        Ok(())
    }
}

/// Scheduled learning rate for 1-based `epoch` out of `total`, before any
/// plateau reduction.
pub fn base_lr(config: &LoopConfig, epoch: usize, total: usize) -> f64 {
    match config.lr_schedule {
        LrSchedule::Constant => config.lr0,
        LrSchedule::Cosine if total <= 1 => config.lr0,
        LrSchedule::Cosine => {
            let progress = (epoch.saturating_sub(1)) as f64 / (total - 1) as f64;
            config.lr0 * (1.0 + (PI * progress.min(1.0)).cos()) / 2.0
        }
    }
}

/// Learning rate for epoch `epoch_index` given the validation losses seen so
/// far: the scheduled rate, multiplied by `plateau_factor` once for every
/// epoch whose loss failed to beat the best earlier loss by more than
/// `plateau_tolerance`, floored at `lr0 * lr_floor_ratio`.
pub fn adjust_lr(epoch_index: usize, valid_losses: &[f64], config: &LoopConfig) -> f64 {
    let mut best = f64::INFINITY;
    let mut plateaus = 0i32;
    for &loss in valid_losses {
        if loss < best - config.plateau_tolerance {
            best = loss;
        } else {
            plateaus += 1;
            best = best.min(loss);
        }
    }
    let lr = base_lr(config, epoch_index, config.epochs_new) * config.plateau_factor.powi(plateaus);
    lr.max(config.lr0 * config.lr_floor_ratio)
}

/// Everything recorded about one stage (one task of the stream).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub task_index: usize,
    pub relations: Vec<String>,
    /// A[k][1..=k].
    pub accuracies: Vec<f64>,
    pub train_losses: Vec<f64>,
    pub valid_losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub replay_losses: Vec<f64>,
    pub retries: usize,
    pub memory_before_replay: usize,
    pub memory_after_union: usize,
    pub memory_per_relation: BTreeMap<String, usize>,
    pub predictions: Vec<PredictionRecord>,
}

/// State needed to continue a run after stage `stage`. The backend session
/// must be restored separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: usize,
    pub seed: u64,
    pub memory: MemoryStore,
    pub stages: Vec<StageRecord>,
}

/// Progress notifications, mostly for logging and instrumentation.
pub enum LoopEvent<'a> {
    Epoch {
        task: usize,
        epoch: usize,
        lr: f64,
        train_loss: f64,
        valid_loss: f64,
    },
    /// Fired just before replay training on `memory`.
    Replay {
        task: usize,
        memory: &'a MemoryStore,
    },
    /// Fired just before the stage-`task` evaluation on these test sets.
    Evaluate {
        task: usize,
        tasks: Vec<usize>,
    },
    Stage(&'a StageRecord),
    /// Fired after every completed stage, with the backend in its post-stage state.
    Checkpoint(&'a Checkpoint, &'a dyn Backend),
}

pub type Observer<'a> = dyn FnMut(&LoopEvent<'_>) + 'a;

/// Extra knobs for [`run_continual_with`].
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Echoed into the report instead of the loop configuration.
    pub config_echo: Option<serde_json::Value>,
    pub resume: Option<Checkpoint>,
    pub observer: Option<&'a mut Observer<'a>>,
}

pub fn run_continual(
    stream: &TaskStream,
    backend: &mut dyn Backend,
    config: &LoopConfig,
) -> Result<RunReport, LoopError> {
    run_continual_with(stream, backend, config, RunOptions::default())
}

#[derive(Debug, Error)]
enum StepError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

pub fn run_continual_with(
    stream: &TaskStream,
    backend: &mut dyn Backend,
    config: &LoopConfig,
    options: RunOptions<'_>,
) -> Result<RunReport, LoopError> {
    config.validate()?;
    if stream.is_empty() {
        return Err(LoopError::EmptyStream);
    }
    let RunOptions {
        config_echo,
        resume,
        mut observer,
    } = options;
    let mut notify = |e: LoopEvent<'_>| {
        if let Some(obs) = observer.as_mut() {
            obs(&e);
        }
    };

    let meta = RunMeta {
        seed: config.seed,
        dataset_id: stream.dataset_id.clone(),
        backend_id: backend.backend_id().to_string(),
        embedding_source: backend.embedding_source().to_string(),
        template: config.template.to_string(),
        template_version: TEMPLATE_VERSION.to_string(),
        config: config_echo.unwrap_or_else(|| serde_json::to_value(config).expect("config serializes")),
    };

    let (mut memory, mut stages) = match resume {
        Some(cp) => {
            if cp.stage > stream.len() || cp.stages.len() != cp.stage {
                return Err(LoopError::BadCheckpoint {
                    stage: cp.stage,
                    tasks: stream.len(),
                });
            }
            (cp.memory, cp.stages)
        }
        None => (MemoryStore::new(config.memory_size), Vec::new()),
    };

    let mut status = RunStatus::Completed;
    for task in stream.tasks.iter().skip(stages.len()) {
        let k = task.task_index;
        match run_stage(stream, task, backend, config, memory.clone(), &mut notify) {
            Ok(StageOutcome::Done(record, next_memory)) => {
                memory = next_memory;
                notify(LoopEvent::Stage(&record));
                stages.push(record);
                let cp = Checkpoint {
                    stage: k,
                    seed: config.seed,
                    memory: memory.clone(),
                    stages: stages.clone(),
                };
                notify(LoopEvent::Checkpoint(&cp, &*backend));
            }
            Ok(StageOutcome::Invalid(source)) => return Err(LoopError::Prompt { task: k, source }),
            Err(err) => {
                status = RunStatus::Failed(format!("task {k}: {err}"));
                break;
            }
        }
    }

    Ok(metrics::build_report(meta, status, stream.len(), stages)?)
}

#[allow(clippy::large_enum_variant)]
enum StageOutcome {
    Done(StageRecord, MemoryStore),
    Invalid(PromptError),
}

fn render_all(
    instances: &[RelationInstance],
    candidates: &[String],
    template: PromptTemplateId,
    origin: usize,
) -> Result<Vec<Prompt>, PromptError> {
    instances
        .iter()
        .map(|i| prompting::render_prompt(i, candidates, template, origin))
        .collect()
}

/// One training epoch; a non-finite loss is retried once at a tenth of the rate.
fn train_epoch(
    backend: &mut dyn Backend,
    prompts: &[Prompt],
    lr: f64,
    retries: &mut usize,
) -> Result<f64, BackendError> {
    match backend.train(prompts, 1, lr) {
        Err(BackendError::NonFiniteLoss { .. }) => {
            *retries += 1;
            backend.train(prompts, 1, lr / 10.0)
        }
        other => other,
    }
}

fn run_stage(
    stream: &TaskStream,
    task: &TaskSplit,
    backend: &mut dyn Backend,
    config: &LoopConfig,
    memory: MemoryStore,
    notify: &mut dyn FnMut(LoopEvent<'_>),
) -> Result<StageOutcome, StepError> {
    let k = task.task_index;
    let template = config.template;
    let prompts = (|| {
        Ok::<_, PromptError>((
            render_all(&task.train, &task.relations, template, k)?,
            render_all(&task.valid, &task.relations, template, k)?,
        ))
    })();
    let (train, valid) = match prompts {
        Ok(p) => p,
        Err(e) => return Ok(StageOutcome::Invalid(e)),
    };

    let mut record = StageRecord {
        task_index: k,
        relations: task.relations.clone(),
        accuracies: Vec::new(),
        train_losses: Vec::new(),
        valid_losses: Vec::new(),
        lrs: Vec::new(),
        replay_losses: Vec::new(),
        retries: 0,
        memory_before_replay: memory.len(),
        memory_after_union: 0,
        memory_per_relation: BTreeMap::new(),
        predictions: Vec::new(),
    };

    // New-task training with validation-driven learning-rate adjustment.
    let mut lr = base_lr(config, 1, config.epochs_new);
    for epoch in 1..=config.epochs_new {
        let train_loss = train_epoch(backend, &train, lr, &mut record.retries)?;
        let valid_loss = if valid.is_empty() {
            train_loss
        } else {
            backend.eval_loss(&valid)?
        };
        record.lrs.push(lr);
        record.train_losses.push(train_loss);
        record.valid_losses.push(valid_loss);
        notify(LoopEvent::Epoch {
            task: k,
            epoch,
            lr,
            train_loss,
            valid_loss,
        });
        lr = adjust_lr(epoch + 1, &record.valid_losses, config);
    }

    // Memory selection with the just-trained model.
    let params = KMeansParams {
        restarts: config.kmeans_restarts,
        ..KMeansParams::default()
    };
    let mut selected = BTreeMap::new();
    for relation in &task.relations {
        let pool: Vec<RelationInstance> = task.train_for(relation).cloned().collect();
        let seed = rng::derive_seed(config.seed, &[k as u64, rng::fnv1a64(relation.as_bytes())]);
        let picked = replay::select_memory(&pool, config.memory_size, seed, &params, |instances| {
            let prompts = render_all(instances, &task.relations, template, k)
                .map_err(|e| BackendError::InvalidArgument(e.to_string()))?;
            embed_batched(backend, &prompts, config.eval_batch)
        })?;
        selected.insert(relation.clone(), picked);
    }

    // Replay on the memory accumulated before this task.
    if !memory.is_empty() && config.epochs_replay > 0 {
        notify(LoopEvent::Replay {
            task: k,
            memory: &memory,
        });
        let order = stream.labels_through(k - 1);
        let mut replay_prompts = Vec::with_capacity(memory.len());
        for entry in memory.ordered(&order) {
            let origin = &stream.tasks[entry.origin_task - 1];
            match prompting::render_prompt(&entry.instance, &origin.relations, template, entry.origin_task) {
                Ok(p) => replay_prompts.push(p),
                Err(e) => return Ok(StageOutcome::Invalid(e)),
            }
        }
        for epoch in 1..=config.epochs_replay {
            let lr = base_lr(config, epoch, config.epochs_replay).max(config.lr0 * config.lr_floor_ratio);
            record
                .replay_losses
                .push(train_epoch(backend, &replay_prompts, lr, &mut record.retries)?);
        }
    }

    let memory = replay::memory_union(memory, selected, k)?;
    record.memory_after_union = memory.len();
    record.memory_per_relation = memory.entries.iter().map(|(r, v)| (r.clone(), v.len())).collect();

    // Evaluation on every seen task with the cumulative label set.
    let seen = stream.labels_through(k);
    notify(LoopEvent::Evaluate {
        task: k,
        tasks: (1..=k).collect(),
    });
    for earlier in &stream.tasks[..k] {
        let test = match render_all(&earlier.test, &seen, template, earlier.task_index) {
            Ok(p) => p,
            Err(e) => return Ok(StageOutcome::Invalid(e)),
        };
        let outcomes = predict_batched(backend, &test, config.eval_batch)?;
        let correct = outcomes
            .iter()
            .zip(&test)
            .filter(|(o, p)| o.is_correct(&p.gold))
            .count();
        record.accuracies.push(if test.is_empty() {
            0.0
        } else {
            correct as f64 / test.len() as f64
        });
        record
            .predictions
            .extend(test.iter().zip(outcomes).map(|(p, outcome)| PredictionRecord {
                instance_id: p.instance.id.clone(),
                task: earlier.task_index,
                gold: p.gold.clone(),
                outcome,
            }));
    }

    Ok(StageOutcome::Done(record, memory))
}

fn embed_batched(
    backend: &mut dyn Backend,
    prompts: &[Prompt],
    batch: usize,
) -> Result<Vec<EmbeddingVector>, BackendError> {
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(batch) {
        let vectors = backend.embed(chunk)?;
        if vectors.len() != chunk.len() {
            return Err(BackendError::Protocol(format!(
                "embed returned {} vectors for {} prompts",
                vectors.len(),
                chunk.len()
            )));
        }
        out.extend(vectors);
    }
    Ok(out)
}

fn predict_batched(
    backend: &mut dyn Backend,
    prompts: &[Prompt],
    batch: usize,
) -> Result<Vec<prompting::PredictionOutcome>, BackendError> {
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(batch) {
        let outcomes = backend.predict(chunk)?;
        if outcomes.len() != chunk.len() {
            return Err(BackendError::Protocol(format!(
                "predict returned {} outcomes for {} prompts",
                outcomes.len(),
                chunk.len()
            )));
        }
        out.extend(outcomes);
    }
    Ok(out)
}
