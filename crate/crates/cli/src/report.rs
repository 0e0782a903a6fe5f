use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cre_core::metrics::{aggregate_runs, Aggregate, RunReport};
use serde::Serialize;

use crate::config::differing_keys;
use crate::output::{self, pct, Table};
use crate::run::REPORT_FILE;
use crate::Invalid;

/// Config keys that may legitimately differ between runs being pooled.
const POOLABLE_KEYS: [&str; 1] = ["seeds"];

/// Report files under each directory: the directory's own report.json, or
/// else the report.json of every `seed-*` subdirectory.
pub fn find_reports(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for dir in dirs {
        let own = dir.join(REPORT_FILE);
        if own.is_file() {
            out.push(own);
            continue;
        }
        let mut found: Vec<(u64, PathBuf)> = Vec::new();
        let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
        for entry in entries {
            let path = entry?.path();
            let seed = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("seed-"))
                .and_then(|s| s.parse::<u64>().ok());
            if let Some(seed) = seed {
                if path.join(REPORT_FILE).is_file() {
                    found.push((seed, path.join(REPORT_FILE)));
                }
            }
        }
        if found.is_empty() {
            bail!(Invalid(format!("{}: no run reports found", dir.display())));
        }
        found.sort();
        out.extend(found.into_iter().map(|(_, p)| p));
    }
    Ok(out)
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Serialize)]
pub struct ConfusionCell {
    pub gold: String,
    pub predicted: String,
    pub count: u64,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub reports: Vec<PathBuf>,
    pub aggregate: Aggregate,
    /// Final-stage confusion counts summed over runs; hallucinations appear
    /// under the predicted label `<hallucinated>`.
    pub final_confusion: Vec<ConfusionCell>,
}

pub const HALLUCINATED: &str = "<hallucinated>";

fn final_confusion(reports: &[RunReport]) -> Vec<ConfusionCell> {
    let mut cells: BTreeMap<(String, String), u64> = BTreeMap::new();
    for r in reports {
        let last = r.n_tasks;
        for sc in r.confusion.iter().filter(|c| c.stage == last) {
            let m = &sc.matrix;
            for (g, row) in m.cells.iter().enumerate() {
                for (p, &n) in row.iter().enumerate() {
                    if n > 0 {
                        *cells.entry((m.labels[g].clone(), m.labels[p].clone())).or_default() += n;
                    }
                }
            }
        }
        // hallucinations by gold label come from the prediction log
        if let Some(stage) = r.stages.last() {
            for p in stage.predictions.iter().filter(|p| p.outcome.is_hallucinated()) {
                *cells.entry((p.gold.clone(), HALLUCINATED.into())).or_default() += 1;
            }
        }
    }
    cells
        .into_iter()
        .map(|((gold, predicted), count)| ConfusionCell { gold, predicted, count })
        .collect()
}

pub fn summarize(paths: Vec<PathBuf>) -> Result<Summary> {
    let mut reports = Vec::new();
    let mut used = Vec::new();
    for path in paths {
        let r = load_report(&path)?;
        if !r.is_complete() {
            eprintln!("skipping incomplete run {}", path.display());
            continue;
        }
        reports.push(r);
        used.push(path);
    }
    let Some(first) = reports.first() else {
        bail!(Invalid("no completed runs to aggregate".into()));
    };
    for (r, path) in reports.iter().zip(&used).skip(1) {
        let diff = differing_keys(&first.meta.config, &r.meta.config, &POOLABLE_KEYS);
        if !diff.is_empty() {
            bail!(Invalid(format!(
                "{} and {} were run with different configs; differing fields: {}",
                used[0].display(),
                path.display(),
                diff.join(", ")
            )));
        }
    }
    let aggregate = aggregate_runs(&reports).map_err(|e| Invalid(e.to_string()))?;
    Ok(Summary {
        reports: used,
        final_confusion: final_confusion(&reports),
        aggregate,
    })
}

pub fn write_summary(out: &Path, s: &Summary) -> Result<()> {
    let g = &s.aggregate;
    output::write_json(&out.join("aggregate.json"), s)?;

    let mut agg = Table::new(&["metric", "mean", "sd", "n_runs"])?;
    for (name, m) in [("w", g.whole_acc), ("a", g.avg_acc), ("bwt", g.bwt)] {
        agg.row([name.to_string(), pct(m.mean), pct(m.sd), g.n_runs.to_string()])?;
    }
    agg.write(&out.join("aggregate.csv"))?;

    let mut traj = Table::new(&["stage", "task1_mean", "task1_sd"])?;
    for (k, m) in g.task1_trajectory.iter().enumerate() {
        traj.row([(k + 1).to_string(), pct(m.mean), pct(m.sd)])?;
    }
    traj.write(&out.join("trajectory.csv"))?;

    let mut stages = Table::new(&[
        "stage",
        "seen_task_acc_mean",
        "seen_task_acc_sd",
        "avg_acc_mean",
        "avg_acc_sd",
        "hallucinations_mean",
        "hallucinations_sd",
    ])?;
    for k in 0..g.n_tasks {
        stages.row([
            (k + 1).to_string(),
            pct(g.seen_task_acc[k].mean),
            pct(g.seen_task_acc[k].sd),
            pct(g.avg_acc_by_stage[k].mean),
            pct(g.avg_acc_by_stage[k].sd),
            g.hallucinations[k].mean.to_string(),
            g.hallucinations[k].sd.to_string(),
        ])?;
    }
    stages.write(&out.join("stage_metrics.csv"))?;

    let mut conf = Table::new(&["gold", "predicted", "count"])?;
    for c in &s.final_confusion {
        conf.row([c.gold.clone(), c.predicted.clone(), c.count.to_string()])?;
    }
    conf.write(&out.join("confusion.csv"))
}

pub fn print_summary(s: &Summary) {
    let g = &s.aggregate;
    println!("runs {} (seeds {:?})", g.n_runs, g.seeds);
    for (name, m) in [("w", g.whole_acc), ("a", g.avg_acc), ("bwt", g.bwt)] {
        println!("{name:<4}{:>9} (sd {})", pct(m.mean), pct(m.sd));
    }
}
