use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use cre_core::corpus::TaskStream;
use cre_core::metrics::{aggregate_runs, t_test_two_tailed, Aggregate, RunReport, TTest};
use cre_core::prompting::PromptTemplateId;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::{self, pct, Table};
use crate::run::{self, SeedOutcome};
use crate::Invalid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    MemorySize(usize),
    Template(PromptTemplateId),
}

impl Arm {
    pub fn name(&self) -> String {
        match self {
            Arm::MemorySize(m) => format!("m={m}"),
            Arm::Template(t) => t.to_string(),
        }
    }

    fn dir_name(&self) -> String {
        match self {
            Arm::MemorySize(m) => format!("m{m}"),
            Arm::Template(t) => t.to_string(),
        }
    }

    fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = cfg.clone();
        match *self {
            Arm::MemorySize(m) => cfg.memory_size = m,
            Arm::Template(t) => cfg.template = t,
        }
        cfg
    }
}

pub fn arms(memory_sizes: &[usize], templates: &[PromptTemplateId]) -> Result<Vec<Arm>> {
    let arms: Vec<Arm> = match (memory_sizes.is_empty(), templates.is_empty()) {
        (false, true) => memory_sizes.iter().map(|&m| Arm::MemorySize(m)).collect(),
        (true, false) => templates.iter().map(|&t| Arm::Template(t)).collect(),
        (true, true) => bail!(Invalid("give --memory-sizes or --templates".into())),
        (false, false) => bail!(Invalid("--memory-sizes and --templates cannot be combined".into())),
    };
    if arms.len() < 2 {
        bail!(Invalid(format!(
            "an ablation needs at least 2 arms, got {}",
            arms.len()
        )));
    }
    for (i, a) in arms.iter().enumerate() {
        if arms[..i].contains(a) {
            bail!(Invalid(format!("arm {} is listed twice", a.name())));
        }
    }
    Ok(arms)
}

/// m = 0 when it is one of the arms, otherwise the first arm.
pub fn baseline(arms: &[Arm]) -> usize {
    arms.iter().position(|a| *a == Arm::MemorySize(0)).unwrap_or(0)
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub whole_acc: Option<TTest>,
    pub avg_acc: Option<TTest>,
    pub bwt: Option<TTest>,
}

#[derive(Debug, Serialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub name: String,
    pub dir: PathBuf,
    pub aggregate: Aggregate,
    /// Against the baseline arm; absent for the baseline itself.
    pub vs_baseline: Option<Comparison>,
}

#[derive(Debug, Serialize)]
pub struct Ablation {
    pub test: &'static str,
    pub baseline: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmResult>,
}

pub struct AblationRun {
    pub outcomes: Vec<(Arm, SeedOutcome)>,
    pub table: Option<Ablation>,
}

/// Run every arm over the same streams. The table is only built when every
/// seed of every arm completed.
pub fn ablate(
    cfg: &ExperimentConfig,
    streams: &[TaskStream],
    root: &Path,
    arms: &[Arm],
    paired: bool,
) -> Result<AblationRun> {
    let jobs: Vec<(Arm, ExperimentConfig, &TaskStream)> = arms
        .iter()
        .flat_map(|arm| streams.iter().map(move |s| (*arm, arm.apply(cfg), s)))
        .collect();
    let pool = run::pool(cfg.workers)?;
    let outcomes: Vec<(Arm, SeedOutcome)> = pool.install(|| {
        jobs.par_iter()
            .map(|(arm, arm_cfg, stream)| {
                let arm_root = root.join(arm.dir_name());
                let outcome = run::run_one(arm_cfg, stream, &run::seed_dir(&arm_root, stream.seed), false);
                (*arm, outcome)
            })
            .collect()
    });
    if !outcomes.iter().all(|(_, o)| o.completed()) {
        return Ok(AblationRun { outcomes, table: None });
    }

    let reports_of = |arm: Arm| -> Vec<&RunReport> {
        outcomes
            .iter()
            .filter(|(a, _)| *a == arm)
            .map(|(_, o)| o.report.as_ref().expect("completed"))
            .collect()
    };
    let base = arms[baseline(arms)];
    let metric = |rs: &[&RunReport], f: fn(&RunReport) -> Option<f64>| -> Vec<f64> {
        rs.iter().map(|r| f(r).expect("completed")).collect()
    };
    let test = |x: Vec<f64>, y: Vec<f64>| t_test_two_tailed(&x, &y, paired).ok();
    let base_reports = reports_of(base);
    let mut results = Vec::new();
    for &arm in arms {
        let reports = reports_of(arm);
        let owned: Vec<RunReport> = reports.iter().map(|r| (*r).clone()).collect();
        let aggregate = aggregate_runs(&owned)?;
        let vs_baseline = (arm != base).then(|| Comparison {
            whole_acc: test(
                metric(&reports, |r| r.whole_acc),
                metric(&base_reports, |r| r.whole_acc),
            ),
            avg_acc: test(metric(&reports, |r| r.avg_acc), metric(&base_reports, |r| r.avg_acc)),
            bwt: test(metric(&reports, |r| r.bwt), metric(&base_reports, |r| r.bwt)),
        });
        results.push(ArmResult {
            arm,
            name: arm.name(),
            dir: root.join(arm.dir_name()),
            aggregate,
            vs_baseline,
        });
    }
    let table = Ablation {
        test: if paired { "paired" } else { "welch" },
        baseline: base.name(),
        seeds: streams.iter().map(|s| s.seed).collect(),
        arms: results,
    };
    write_ablation(root, &table)?;
    Ok(AblationRun {
        outcomes,
        table: Some(table),
    })
}

type MetricRow = (&'static str, fn(&Aggregate) -> f64);

const METRIC_ROWS: [MetricRow; 3] = [
    ("w", |a| a.whole_acc.mean),
    ("a", |a| a.avg_acc.mean),
    ("bwt", |a| a.bwt.mean),
];

fn p_cell(t: Option<&TTest>) -> String {
    t.map(|t| t.p.to_string()).unwrap_or_default()
}

pub fn write_ablation(root: &Path, ab: &Ablation) -> Result<()> {
    // metric rows by arm columns, percentages
    let mut header = vec!["metric".to_string()];
    header.extend(ab.arms.iter().map(|a| a.name.clone()));
    let mut shaped = Table::new(&header)?;
    for (name, f) in METRIC_ROWS {
        let mut cells = vec![name.to_string()];
        cells.extend(ab.arms.iter().map(|a| pct(f(&a.aggregate))));
        shaped.row(cells)?;
    }
    shaped.write(&root.join("ablation.csv"))?;

    let mut detail = Table::new(&[
        "arm", "n_runs", "w_mean", "w_sd", "a_mean", "a_sd", "bwt_mean", "bwt_sd", "p_w", "p_a", "p_bwt", "test",
    ])?;
    for a in &ab.arms {
        let g = &a.aggregate;
        let cmp = a.vs_baseline.as_ref();
        detail.row([
            a.name.clone(),
            g.n_runs.to_string(),
            pct(g.whole_acc.mean),
            pct(g.whole_acc.sd),
            pct(g.avg_acc.mean),
            pct(g.avg_acc.sd),
            pct(g.bwt.mean),
            pct(g.bwt.sd),
            p_cell(cmp.and_then(|c| c.whole_acc.as_ref())),
            p_cell(cmp.and_then(|c| c.avg_acc.as_ref())),
            p_cell(cmp.and_then(|c| c.bwt.as_ref())),
            if cmp.is_some() {
                ab.test.to_string()
            } else {
                String::new()
            },
        ])?;
    }
    detail.write(&root.join("ablation_detail.csv"))?;
    output::write_json(&root.join("ablation.json"), ab)
}

pub fn print_ablation(ab: &Ablation) {
    print!("{:<6}", "");
    for a in &ab.arms {
        print!("{:>10}", a.name);
    }
    println!();
    for (name, f) in METRIC_ROWS {
        print!("{name:<6}");
        for a in &ab.arms {
            print!("{:>10}", pct(f(&a.aggregate)));
        }
        println!();
    }
    for a in &ab.arms {
        if let Some(c) = &a.vs_baseline {
            println!(
                "{} vs {} ({}): p_w {} p_a {} p_bwt {}",
                a.name,
                ab.baseline,
                ab.test,
                p_cell(c.whole_acc.as_ref()),
                p_cell(c.avg_acc.as_ref()),
                p_cell(c.bwt.as_ref())
            );
        }
    }
}
