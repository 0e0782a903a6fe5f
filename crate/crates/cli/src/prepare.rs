use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cre_core::corpus::{self, CorpusError, RelationInstance, RelationOrder, TaskStream};
use serde_json::Value;

use crate::config::{differing_keys, DatasetFormat, ExperimentConfig};
use crate::output;
use crate::Invalid;

pub fn streams_dir(root: &Path) -> PathBuf {
    root.join("streams")
}

pub fn stream_path(root: &Path, seed: u64) -> PathBuf {
    streams_dir(root).join(format!("stream-seed{seed}.json"))
}

pub fn load_instances(cfg: &ExperimentConfig) -> Result<Vec<RelationInstance>> {
    let input = cfg
        .input
        .as_deref()
        .ok_or_else(|| anyhow!("no input corpus given (--input)"))?;
    let instances = match cfg.dataset {
        DatasetFormat::Tacred => corpus::ingest_tacred(input),
        DatasetFormat::Fewrel => corpus::ingest_fewrel(input),
        DatasetFormat::Normalized => corpus::ingest_normalized(input),
    };
    Ok(instances?)
}

pub fn load_order(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<RelationOrder>)> {
    let path = cfg
        .relation_order
        .clone()
        .ok_or_else(|| anyhow!("no relation order given (--relation-order)"))?;
    let blocks = corpus::load_relation_order(&path).with_context(|| path.display().to_string())?;
    Ok((path, blocks))
}

/// The run at position `i` of the seed list uses order block `i mod blocks`
/// and partitions the corpus with its own seed.
pub fn build_streams(cfg: &ExperimentConfig) -> Result<Vec<TaskStream>> {
    build_streams_inner(cfg).map_err(|e| Invalid(crate::render_chain(&e)).into())
}

fn build_streams_inner(cfg: &ExperimentConfig) -> Result<Vec<TaskStream>> {
    let instances = load_instances(cfg)?;
    let (order_path, blocks) = load_order(cfg)?;
    let dataset_id = cfg.dataset_id();
    cfg.seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let block = &blocks[i % blocks.len()];
            corpus::build_task_stream(&dataset_id, &instances, &block.tasks, cfg.caps(), seed).map_err(|e| match &e {
                CorpusError::UnknownLabel(label) | CorpusError::TooFewInstances { label, .. } => {
                    let line = block.line_of(label).unwrap_or(0);
                    anyhow!("{}:{line}: {e}", order_path.display())
                }
                _ => anyhow!("{}: {e}", order_path.display()),
            })
        })
        .collect()
}

pub fn summary(stream: &TaskStream) -> String {
    let mut out = format!(
        "stream {} seed {} ({} tasks)\n",
        stream.dataset_id,
        stream.seed,
        stream.len()
    );
    for t in &stream.tasks {
        out.push_str(&format!(
            "  task {:>2}: {} relations, train {}, valid {}, test {}: {}\n",
            t.task_index,
            t.relations.len(),
            t.train.len(),
            t.valid.len(),
            t.test.len(),
            t.relations.join(" ")
        ));
    }
    out
}

/// Config keys that decide stream contents.
const STREAM_KEYS: [&str; 6] = [
    "dataset",
    "input",
    "relation_order",
    "dataset_id",
    "train_cap",
    "eval_cap",
];

fn stream_manifest(cfg: &ExperimentConfig) -> Value {
    let echo = cfg.echo();
    Value::Object(STREAM_KEYS.iter().map(|&k| (k.to_string(), echo[k].clone())).collect())
}

/// Refuse to mix streams prepared under different settings in one directory.
fn check_manifest(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let path = streams_dir(root).join("manifest.json");
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(&path)?;
    let existing: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let diff = differing_keys(&existing, &stream_manifest(cfg), &[]);
    if !diff.is_empty() {
        bail!(Invalid(format!(
            "{} holds streams prepared with different settings ({}); use another output directory",
            streams_dir(root).display(),
            diff.join(", ")
        )));
    }
    Ok(())
}

pub fn write_streams(cfg: &ExperimentConfig, root: &Path, streams: &[TaskStream]) -> Result<()> {
    check_manifest(cfg, root)?;
    output::write_json(&streams_dir(root).join("manifest.json"), &stream_manifest(cfg))?;
    for s in streams {
        output::write_json(&stream_path(root, s.seed), s)?;
    }
    Ok(())
}

/// Load the prepared stream for every seed, preparing any that are missing.
pub fn load_or_prepare(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<TaskStream>> {
    check_manifest(cfg, root)?;
    if cfg.seeds.iter().all(|&s| stream_path(root, s).exists()) {
        return cfg
            .seeds
            .iter()
            .map(|&s| {
                let path = stream_path(root, s);
                TaskStream::load(&path).map_err(|e| Invalid(format!("stream {}: {e}", path.display())).into())
            })
            .collect();
    }
    let streams = build_streams(cfg)?;
    write_streams(cfg, root, &streams)?;
    Ok(streams)
}
