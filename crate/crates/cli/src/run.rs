use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use cre_core::clloop::{self, Checkpoint, LoopEvent, RunOptions};
use cre_core::corpus::TaskStream;
use cre_core::metrics::{RunReport, RunStatus};
use cre_core::modeling::{Backend, BuiltinBackend};
use cre_core::protocol::ProtocolBackend;
use cre_core::replay::MemoryStore;
use rayon::prelude::*;
use serde_json::json;

use crate::config::{BackendKind, ExperimentConfig};
use crate::output::{self, pct, Table};

pub const REPORT_FILE: &str = "report.json";
pub const FAILED_MARKER: &str = "FAILED";

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// What happened to one seed. `error` is set whenever the seed did not complete.
#[derive(Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

impl SeedOutcome {
    pub fn completed(&self) -> bool {
        self.error.is_none()
    }
}

pub fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| anyhow!("worker pool: {e}"))
}

/// Run every stream into `root/seed-{S}` on the worker pool.
pub fn run_streams(
    cfg: &ExperimentConfig,
    streams: &[TaskStream],
    root: &Path,
    resume: bool,
) -> Result<Vec<SeedOutcome>> {
    if resume && cfg.backend == BackendKind::External {
        bail!(crate::Invalid(
            "resuming needs the builtin backend; external sessions cannot be restored".into()
        ));
    }
    let pool = pool(cfg.workers)?;
    Ok(pool.install(|| {
        streams
            .par_iter()
            .map(|stream| run_one(cfg, stream, &seed_dir(root, stream.seed), resume))
            .collect()
    }))
}

/// Run one seed into `dir`, writing the FAILED marker if it cannot finish.
pub fn run_one(cfg: &ExperimentConfig, stream: &TaskStream, dir: &Path, resume: bool) -> SeedOutcome {
    match run_seed(cfg, stream, dir, resume) {
        Ok(report) => {
            let error = match &report.status {
                RunStatus::Completed => None,
                RunStatus::Failed(msg) => Some(msg.clone()),
            };
            SeedOutcome {
                seed: stream.seed,
                dir: dir.to_path_buf(),
                report: Some(report),
                error,
            }
        }
        Err(e) => {
            let msg = format!("{e:#}");
            let _ = output::write_atomic(&dir.join(FAILED_MARKER), format!("{msg}\n").as_bytes());
            SeedOutcome {
                seed: stream.seed,
                dir: dir.to_path_buf(),
                report: None,
                error: Some(msg),
            }
        }
    }
}

fn checkpoint_paths(dir: &Path, stage: usize) -> (PathBuf, PathBuf) {
    let cp = dir.join("checkpoints");
    (
        cp.join(format!("stage-{stage}.json")),
        cp.join(format!("backend-{stage}.bin")),
    )
}

/// The newest stage with both a checkpoint and a backend snapshot.
fn latest_checkpoint(dir: &Path, n_tasks: usize) -> Result<Option<(Checkpoint, BuiltinBackend)>> {
    for stage in (1..=n_tasks).rev() {
        let (cp_path, backend_path) = checkpoint_paths(dir, stage);
        if cp_path.exists() && backend_path.exists() {
            let text = std::fs::read_to_string(&cp_path)?;
            let cp: Checkpoint =
                serde_json::from_str(&text).with_context(|| format!("checkpoint {}", cp_path.display()))?;
            let backend =
                BuiltinBackend::load(&backend_path).with_context(|| format!("backend {}", backend_path.display()))?;
            return Ok(Some((cp, backend)));
        }
    }
    Ok(None)
}

fn open_backend(cfg: &ExperimentConfig, seed: u64) -> Result<Box<dyn Backend>> {
    Ok(match cfg.backend {
        BackendKind::Builtin => Box::new(BuiltinBackend::new(cfg.builtin_config(seed))?),
        BackendKind::External => {
            let init = json!({ "seed": seed, "template": cfg.template.to_string(), "harness_config": cfg.echo() });
            Box::new(ProtocolBackend::spawn(
                &cfg.backend_command,
                init,
                Duration::from_secs(cfg.handshake_timeout_secs),
            )?)
        }
    })
}

pub fn run_seed(cfg: &ExperimentConfig, stream: &TaskStream, dir: &Path, resume: bool) -> Result<RunReport> {
    let seed = stream.seed;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let marker = dir.join(FAILED_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker)?;
    }

    let (mut backend, checkpoint): (Box<dyn Backend>, Option<Checkpoint>) = match resume
        .then(|| latest_checkpoint(dir, stream.len()))
        .transpose()?
        .flatten()
    {
        Some((cp, b)) => {
            eprintln!("seed {seed}: resuming after stage {}", cp.stage);
            (Box::new(b), Some(cp))
        }
        None => (open_backend(cfg, seed)?, None),
    };

    let mut memory: Option<MemoryStore> = checkpoint.as_ref().map(|c| c.memory.clone());
    let mut side_error: Option<anyhow::Error> = None;
    let n_tasks = stream.len();
    let mut observer = |e: &LoopEvent<'_>| match e {
        LoopEvent::Stage(rec) => {
            let correct = rec.predictions.iter().filter(|p| p.correct()).count();
            eprintln!(
                "seed {seed}: task {}/{n_tasks} seen-task acc {}% memory {}",
                rec.task_index,
                pct(correct as f64 / rec.predictions.len().max(1) as f64),
                rec.memory_after_union
            );
        }
        LoopEvent::Checkpoint(cp, b) => {
            memory = Some(cp.memory.clone());
            if cfg.checkpoints && side_error.is_none() {
                if let Err(e) = save_checkpoint(dir, cp, *b) {
                    side_error = Some(e);
                }
            }
        }
        _ => {}
    };
    let options = RunOptions {
        config_echo: Some(cfg.echo()),
        resume: checkpoint,
        observer: Some(&mut observer),
    };
    let report = clloop::run_continual_with(stream, backend.as_mut(), &cfg.loop_config(seed), options)
        .map_err(|e| anyhow!("seed {seed}: {e}"))?;
    drop(backend);
    if let Some(e) = side_error {
        return Err(e.context("writing checkpoint"));
    }

    write_run(dir, &report, memory.as_ref())?;
    Ok(report)
}

fn save_checkpoint(dir: &Path, cp: &Checkpoint, backend: &dyn Backend) -> Result<()> {
    let (cp_path, backend_path) = checkpoint_paths(dir, cp.stage);
    std::fs::create_dir_all(cp_path.parent().expect("has parent"))?;
    let tmp = backend_path.with_extension("bin.tmp");
    if backend.save_state(&tmp)? {
        std::fs::rename(&tmp, &backend_path)?;
    }
    output::write_json(&cp_path, cp)
}

/// report.json, matrix.csv, stages.csv, memory.jsonl and, for failed runs, the FAILED marker.
pub fn write_run(dir: &Path, report: &RunReport, memory: Option<&MemoryStore>) -> Result<()> {
    output::write_json(&dir.join(REPORT_FILE), report)?;

    let n = report.n_tasks;
    let mut header = vec!["stage".to_string()];
    header.extend((1..=n).map(|t| format!("task{t}")));
    let mut matrix = Table::new(&header)?;
    for (k, row) in report.matrix.rows.iter().enumerate() {
        let mut cells = vec![(k + 1).to_string()];
        cells.extend((0..n).map(|t| row.get(t).map(|&a| pct(a)).unwrap_or_default()));
        matrix.row(cells)?;
    }
    matrix.write(&dir.join("matrix.csv"))?;

    let mut stages = Table::new(&[
        "stage",
        "seen_task_acc",
        "avg_acc",
        "hallucinations",
        "memory_before_replay",
        "memory_after_union",
        "last_train_loss",
        "last_valid_loss",
        "last_lr",
        "retries",
    ])?;
    for (i, s) in report.stages.iter().enumerate() {
        let last = |v: &[f64]| v.last().map(|x| x.to_string()).unwrap_or_default();
        stages.row([
            s.task_index.to_string(),
            pct(report.seen_task_acc[i]),
            pct(report.avg_acc_by_stage[i]),
            report.hallucinations[i].to_string(),
            s.memory_before_replay.to_string(),
            s.memory_after_union.to_string(),
            last(&s.train_losses),
            last(&s.valid_losses),
            last(&s.lrs),
            s.retries.to_string(),
        ])?;
    }
    stages.write(&dir.join("stages.csv"))?;

    if let Some(mem) = memory {
        let mut buf = String::new();
        for entry in mem.iter() {
            buf.push_str(&serde_json::to_string(entry)?);
            buf.push('\n');
        }
        output::write_atomic(&dir.join("memory.jsonl"), buf.as_bytes())?;
    }

    if let RunStatus::Failed(msg) = &report.status {
        output::write_atomic(&dir.join(FAILED_MARKER), format!("{msg}\n").as_bytes())?;
    }
    Ok(())
}

/// One line per seed on stdout; returns whether all seeds completed.
pub fn print_outcomes(outcomes: &[SeedOutcome]) -> bool {
    for o in outcomes {
        match (&o.error, &o.report) {
            (None, Some(r)) => println!(
                "seed {}: w {}% a {}% bwt {} ({})",
                o.seed,
                pct(r.whole_acc.unwrap_or(f64::NAN)),
                pct(r.avg_acc.unwrap_or(f64::NAN)),
                pct(r.bwt.unwrap_or(f64::NAN)),
                o.dir.display()
            ),
            (Some(e), _) => println!("seed {}: FAILED: {e} ({})", o.seed, o.dir.display()),
            (None, None) => unreachable!("a seed without a report always carries an error"),
        }
    }
    outcomes.iter().all(SeedOutcome::completed)
}
