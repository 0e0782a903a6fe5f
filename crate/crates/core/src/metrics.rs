//! Incremental-learning metrics, run reports and significance tests.
//!
//! Everything here is computed from persisted prediction logs, so a report
//! can be rebuilt offline from its own stage records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clloop::StageRecord;
use crate::prompting::PredictionOutcome;
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction log is empty")]
    EmptyLog,
    #[error("accuracy matrix row {row} has {found} entries, expected {expected}")]
    RaggedMatrix { row: usize, expected: usize, found: usize },
    #[error("accuracy {value} at A[{k}][{t}] is outside [0, 1]")]
    OutOfRange { k: usize, t: usize, value: f64 },
    #[error("stage {k} is outside 1..={n}")]
    StageOutOfRange { k: usize, n: usize },
    #[error("gold label `{0}` is not in the label set")]
    UnknownGold(String),
    #[error("cannot aggregate runs with {0} and {1} tasks")]
    MismatchedTasks(usize, usize),
    #[error("no runs to aggregate")]
    NoRuns,
    #[error("run with seed {0} did not complete")]
    IncompleteRun(u64),
    #[error("t-test needs {needed} observations per sample, got {x} and {y}")]
    TooFewObservations { needed: usize, x: usize, y: usize },
    #[error("paired t-test needs equal sample sizes, got {0} and {1}")]
    UnequalPairs(usize, usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// One evaluated test instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    /// Task whose test set the instance belongs to.
    pub task: usize,
    pub gold: String,
    pub outcome: PredictionOutcome,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.outcome.is_correct(&self.gold)
    }
}

/// Lower-triangular matrix: `rows[k-1][t-1]` is the accuracy on task `t`
/// after training through task `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(MetricsError::RaggedMatrix {
                    row: i + 1,
                    expected: i + 1,
                    found: row.len(),
                });
            }
            for (j, &value) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(MetricsError::OutOfRange {
                        k: i + 1,
                        t: j + 1,
                        value,
                    });
                }
            }
        }
        Ok(AccuracyMatrix { rows })
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    /// A[k][t], 1-based.
    pub fn get(&self, k: usize, t: usize) -> f64 {
        self.rows[k - 1][t - 1]
    }
}

fn pooled_accuracy(log: &[PredictionRecord]) -> Result<f64> {
    if log.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    Ok(log.iter().filter(|r| r.correct()).count() as f64 / log.len() as f64)
}

/// Accuracy of the final model over the pooled test sets of all tasks.
pub fn whole_accuracy(final_log: &[PredictionRecord]) -> Result<f64> {
    pooled_accuracy(final_log)
}

/// Pooled accuracy over every prediction made at one stage.
pub fn seen_task_accuracy(stage_log: &[PredictionRecord]) -> Result<f64> {
    pooled_accuracy(stage_log)
}

/// Mean of A[k][1..=k].
pub fn average_accuracy(matrix: &AccuracyMatrix, k: usize) -> Result<f64> {
    if k == 0 || k > matrix.n_tasks() {
        return Err(MetricsError::StageOutOfRange { k, n: matrix.n_tasks() });
    }
    Ok(matrix.rows[k - 1].iter().sum::<f64>() / k as f64)
}

/// (1/(N−1)) · Σ_{t=1..N} (A[N][t] − A[t][t]); 0 when N = 1.
pub fn backward_transfer(matrix: &AccuracyMatrix) -> f64 {
    let n = matrix.n_tasks();
    if n <= 1 {
        return 0.0;
    }
    let sum: f64 = (1..=n).map(|t| matrix.get(n, t) - matrix.get(t, t)).sum();
    sum / (n - 1) as f64
}

/// Per-task accuracies of one stage log, keyed by task index.
pub fn per_task_accuracy(stage_log: &[PredictionRecord]) -> BTreeMap<usize, f64> {
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in stage_log {
        let e = tally.entry(r.task).or_default();
        e.1 += 1;
        if r.correct() {
            e.0 += 1;
        }
    }
    tally.into_iter().map(|(t, (c, n))| (t, c as f64 / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// `cells[gold][predicted]`, indices into `labels`.
    pub cells: Vec<Vec<u64>>,
    pub hallucinated: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.cells[i][i]).sum()
    }
}

/// Count (gold, predicted) pairs. Hallucinations are tallied separately and
/// never enter a cell. A known prediction outside `labels` is treated as a
/// hallucination for the purposes of this table.
pub fn confusion_matrix(log: &[PredictionRecord], labels: &[String]) -> Result<ConfusionMatrix> {
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut cm = ConfusionMatrix {
        labels: labels.to_vec(),
        cells: vec![vec![0; labels.len()]; labels.len()],
        hallucinated: 0,
    };
    for r in log {
        let g = *index
            .get(r.gold.as_str())
            .ok_or_else(|| MetricsError::UnknownGold(r.gold.clone()))?;
        match r.outcome.label().and_then(|p| index.get(p)) {
            Some(&p) => cm.cells[g][p] += 1,
            None => cm.hallucinated += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "error", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed(String),
}

/// Identification and configuration of a run, echoed verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub dataset_id: String,
    pub backend_id: String,
    pub embedding_source: String,
    pub template: String,
    pub template_version: String,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfusion {
    pub stage: usize,
    pub task: usize,
    pub matrix: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub meta: RunMeta,
    pub status: RunStatus,
    pub n_tasks: usize,
    pub matrix: AccuracyMatrix,
    pub seen_task_acc: Vec<f64>,
    pub avg_acc_by_stage: Vec<f64>,
    /// Final-stage metrics; absent until every task has been evaluated.
    pub whole_acc: Option<f64>,
    pub avg_acc: Option<f64>,
    pub bwt: Option<f64>,
    pub hallucinations: Vec<u64>,
    pub confusion: Vec<StageConfusion>,
    pub stages: Vec<StageRecord>,
}

/// Assemble every metric from the stage records. `n_tasks` is the stream
/// length; a run that stopped early has fewer stages and no final metrics.
pub fn build_report(meta: RunMeta, status: RunStatus, n_tasks: usize, stages: Vec<StageRecord>) -> Result<RunReport> {
    let mut rows = Vec::with_capacity(stages.len());
    let mut seen = Vec::with_capacity(stages.len());
    let mut hallucinations = Vec::with_capacity(stages.len());
    let mut confusion = Vec::new();
    let mut labels: Vec<String> = Vec::new();

    for stage in &stages {
        let k = stage.task_index;
        let per_task = per_task_accuracy(&stage.predictions);
        rows.push((1..=k).map(|t| per_task.get(&t).copied().unwrap_or(0.0)).collect());
        seen.push(seen_task_accuracy(&stage.predictions)?);
        hallucinations.push(stage.predictions.iter().filter(|r| r.outcome.is_hallucinated()).count() as u64);

        for rel in &stage.relations {
            if !labels.contains(rel) {
                labels.push(rel.clone());
            }
        }
        for t in 1..=k {
            let log: Vec<PredictionRecord> = stage.predictions.iter().filter(|r| r.task == t).cloned().collect();
            confusion.push(StageConfusion {
                stage: k,
                task: t,
                matrix: confusion_matrix(&log, &labels)?,
            });
        }
    }

    let matrix = AccuracyMatrix::new(rows)?;
    let avg_by_stage = (1..=matrix.n_tasks())
        .map(|k| average_accuracy(&matrix, k))
        .collect::<Result<Vec<_>>>()?;
    let complete = status == RunStatus::Completed && matrix.n_tasks() == n_tasks && n_tasks > 0;
    let (whole, avg, bwt) = if complete {
        let last = stages.last().expect("complete run has stages");
        (
            Some(whole_accuracy(&last.predictions)?),
            avg_by_stage.last().copied(),
            Some(backward_transfer(&matrix)),
        )
    } else {
        (None, None, None)
    };

    Ok(RunReport {
        meta,
        status,
        n_tasks,
        matrix,
        seen_task_acc: seen,
        avg_acc_by_stage: avg_by_stage,
        whole_acc: whole,
        avg_acc: avg,
        bwt,
        hallucinations,
        confusion,
        stages,
    })
}

impl RunReport {
    /// Rebuild every derived field from the stored stage records.
    pub fn recompute(&self) -> Result<RunReport> {
        build_report(
            self.meta.clone(),
            self.status.clone(),
            self.n_tasks,
            self.stages.clone(),
        )
    }

    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Completed && self.whole_acc.is_some()
    }

    /// A[k][1] for k = 1..N.
    pub fn task1_trajectory(&self) -> Vec<f64> {
        self.matrix.rows.iter().map(|r| r[0]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Self {
        MeanSd {
            mean: stats::mean(xs),
            sd: stats::sample_sd(xs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_runs: usize,
    pub n_tasks: usize,
    pub seeds: Vec<u64>,
    pub whole_acc: MeanSd,
    pub avg_acc: MeanSd,
    pub bwt: MeanSd,
    pub seen_task_acc: Vec<MeanSd>,
    pub avg_acc_by_stage: Vec<MeanSd>,
    pub task1_trajectory: Vec<MeanSd>,
    pub hallucinations: Vec<MeanSd>,
    /// Element-wise mean of the accuracy matrices.
    pub mean_matrix: Vec<Vec<f64>>,
}

/// Element-wise mean and sample standard deviation over completed runs.
pub fn aggregate_runs(reports: &[RunReport]) -> Result<Aggregate> {
    let first = reports.first().ok_or(MetricsError::NoRuns)?;
    let n = first.n_tasks;
    for r in reports {
        if r.n_tasks != n {
            return Err(MetricsError::MismatchedTasks(n, r.n_tasks));
        }
        if !r.is_complete() {
            return Err(MetricsError::IncompleteRun(r.meta.seed));
        }
    }
    let column = |f: &dyn Fn(&RunReport) -> f64| MeanSd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let per_stage = |f: &dyn Fn(&RunReport, usize) -> f64| (0..n).map(|k| column(&|r| f(r, k))).collect::<Vec<_>>();
    Ok(Aggregate {
        n_runs: reports.len(),
        n_tasks: n,
        seeds: reports.iter().map(|r| r.meta.seed).collect(),
        whole_acc: column(&|r| r.whole_acc.expect("complete")),
        avg_acc: column(&|r| r.avg_acc.expect("complete")),
        bwt: column(&|r| r.bwt.expect("complete")),
        seen_task_acc: per_stage(&|r, k| r.seen_task_acc[k]),
        avg_acc_by_stage: per_stage(&|r, k| r.avg_acc_by_stage[k]),
        task1_trajectory: per_stage(&|r, k| r.matrix.rows[k][0]),
        hallucinations: per_stage(&|r, k| r.hallucinations[k] as f64),
        mean_matrix: (0..n)
            .map(|k| (0..=k).map(|t| column(&|r| r.matrix.rows[k][t]).mean).collect())
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub paired: bool,
}

/// Two-tailed t-test. Paired: t = mean(d) / (sd(d)/√n) with n − 1 degrees of
/// freedom. Unpaired: Welch's t with Welch–Satterthwaite degrees of freedom.
/// Zero variance yields p = 1 when the means agree and p = 0 otherwise.
pub fn t_test_two_tailed(x: &[f64], y: &[f64], paired: bool) -> Result<TTest> {
    if x.len() < 2 || y.len() < 2 {
        return Err(MetricsError::TooFewObservations {
            needed: 2,
            x: x.len(),
            y: y.len(),
        });
    }
    let degenerate = |diff: f64, df: f64| TTest {
        t: if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        },
        df,
        p: if diff == 0.0 { 1.0 } else { 0.0 },
        paired,
    };
    if paired {
        if x.len() != y.len() {
            return Err(MetricsError::UnequalPairs(x.len(), y.len()));
        }
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let n = d.len() as f64;
        let (m, sd) = (stats::mean(&d), stats::sample_sd(&d));
        let df = n - 1.0;
        if sd == 0.0 {
            return Ok(degenerate(m, df));
        }
        let t = m / (sd / n.sqrt());
        return Ok(TTest {
            t,
            df,
            p: stats::t_two_tailed_p(t, df),
            paired,
        });
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (vx, vy) = (stats::sample_sd(x).powi(2) / nx, stats::sample_sd(y).powi(2) / ny);
    let diff = stats::mean(x) - stats::mean(y);
    let se2 = vx + vy;
    if se2 == 0.0 {
        return Ok(degenerate(diff, nx + ny - 2.0));
    }
    let df = se2 * se2 / (vx * vx / (nx - 1.0) + vy * vy / (ny - 1.0));
    let t = diff / se2.sqrt();
    Ok(TTest {
        t,
        df,
        p: stats::t_two_tailed_p(t, df),
        paired,
    })
}
