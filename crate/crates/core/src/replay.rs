//! K-means memory selection and the replay buffer.
//!
//! Memory holds real training instances: for every centroid found over a
//! relation's embeddings, the nearest instance (the medoid) is stored.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::RelationInstance;
use crate::modeling::{BackendError, EmbeddingVector};
use crate::rng;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("k = {k} is outside 1..={n} points")]
    InvalidK { k: usize, n: usize },
    #[error("point {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("embedding returned {found} vectors for {expected} instances")]
    EmbeddingCount { expected: usize, found: usize },
    #[error("relation `{0}` is already in memory")]
    RelationPresent(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub type Result<T> = std::result::Result<T, ReplayError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            max_iters: 100,
            tol: 1e-6,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub sse: f64,
    /// SSE after every assignment step, first to last.
    pub sse_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_points(points: &[EmbeddingVector], k: usize) -> Result<()> {
    if k == 0 || k > points.len() {
        return Err(ReplayError::InvalidK { k, n: points.len() });
    }
    let dim = points[0].len();
    for (index, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(ReplayError::DimensionMismatch {
                index,
                expected: dim,
                found: p.len(),
            });
        }
    }
    Ok(())
}

/// Greedy k-means++ seeding: the first centre is uniform; every later centre
/// is the best, by resulting potential, of `2 + ln k` candidates drawn
/// proportionally to D².
fn plus_plus_init(points: &[EmbeddingVector], k: usize, rng: &mut rng::HarnessRng) -> Vec<Vec<f64>> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = vec![points[rng::below(rng, points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // Every point coincides with a centre; duplicates are unavoidable.
            centroids.push(points[rng::below(rng, points.len())].clone());
            continue;
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let target = rng::unit_f64(rng) * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            let chosen = chosen.unwrap_or_else(|| {
                d2.iter()
                    .rposition(|&d| d > 0.0)
                    .expect("positive total implies a positive distance")
            });
            let updated: Vec<f64> = d2
                .iter()
                .zip(points)
                .map(|(&d, p)| d.min(sq_dist(p, &points[chosen])))
                .collect();
            let potential: f64 = updated.iter().sum();
            // near-ties keep the earlier draw so rounding noise cannot decide
            if best.as_ref().is_none_or(|(b, _, _)| potential < *b - 1e-12 * b.abs()) {
                best = Some((potential, chosen, updated));
            }
        }
        let (_, chosen, updated) = best.expect("at least one trial");
        centroids.push(points[chosen].clone());
        d2 = updated;
    }
    centroids
}

fn lloyd(points: &[EmbeddingVector], mut centroids: Vec<Vec<f64>>, params: &KMeansParams) -> ClusteringResult {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![0; points.len()];
    let mut dists = vec![0.0; points.len()];
    let mut sse_trace = Vec::new();

    for _ in 0..params.max_iters.max(1) {
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignments[i] = c;
            dists[i] = d;
        }
        repair_empty(points, &mut centroids, &mut assignments, &mut dists);
        let sse: f64 = dists.iter().sum();
        debug_assert!(
            sse_trace
                .last()
                .is_none_or(|&prev: &f64| sse <= prev * (1.0 + 1e-12) + 1e-12),
            "Lloyd SSE increased"
        );
        sse_trace.push(sse);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for (c, sum) in sums.into_iter().enumerate() {
            let mean: Vec<f64> = sum.into_iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        if shift < params.tol {
            break;
        }
    }

    // Final assignment against the settled centroids.
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest(p, &centroids);
        assignments[i] = c;
        dists[i] = d;
    }
    repair_empty(points, &mut centroids, &mut assignments, &mut dists);
    sse_trace.push(dists.iter().sum());

    hartigan(points, &mut assignments, k, params.max_iters, &mut sse_trace);
    let centroids = cluster_means(points, &assignments, k);
    let sse = points
        .iter()
        .zip(&assignments)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum();
    ClusteringResult {
        centroids,
        assignments,
        sse,
        sse_trace,
    }
}

fn cluster_means(points: &[EmbeddingVector], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignments) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(sum, n)| sum.into_iter().map(|s| s / n as f64).collect())
        .collect()
}

/// Single-point moves: relocate a point whenever that strictly lowers the
/// SSE, using the exact change n_j/(n_j+1)·d²(x, c_j) − n_i/(n_i−1)·d²(x, c_i).
/// Lloyd fixed points can still admit such moves; the converse never holds.
fn hartigan(points: &[EmbeddingVector], assignments: &mut [usize], k: usize, max_sweeps: usize, trace: &mut Vec<f64>) {
    if k < 2 {
        return;
    }
    let mut centroids = cluster_means(points, assignments, k);
    let mut counts = vec![0usize; k];
    for &c in assignments.iter() {
        counts[c] += 1;
    }
    for _ in 0..max_sweeps.max(1) {
        let mut moved = false;
        for (i, x) in points.iter().enumerate() {
            let from = assignments[i];
            let n_from = counts[from] as f64;
            if counts[from] < 2 {
                continue;
            }
            let removal = n_from / (n_from - 1.0) * sq_dist(x, &centroids[from]);
            let mut best: Option<(usize, f64)> = None;
            for (to, c) in centroids.iter().enumerate() {
                if to == from {
                    continue;
                }
                let n_to = counts[to] as f64;
                let addition = n_to / (n_to + 1.0) * sq_dist(x, c);
                if best.is_none_or(|(_, b)| addition < b) {
                    best = Some((to, addition));
                }
            }
            let Some((to, addition)) = best else { continue };
            if addition < removal * (1.0 - 1e-12) {
                let n_to = counts[to] as f64;
                for d in 0..x.len() {
                    centroids[from][d] = (n_from * centroids[from][d] - x[d]) / (n_from - 1.0);
                    centroids[to][d] = (n_to * centroids[to][d] + x[d]) / (n_to + 1.0);
                }
                counts[from] -= 1;
                counts[to] += 1;
                assignments[i] = to;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        let exact = cluster_means(points, assignments, k);
        let sse = points
            .iter()
            .zip(assignments.iter())
            .map(|(p, &c)| sq_dist(p, &exact[c]))
            .sum();
        trace.push(sse);
        centroids = exact;
    }
}

/// Give every empty cluster the point farthest from its own centroid,
/// taken from a cluster that can spare it.
fn repair_empty(points: &[EmbeddingVector], centroids: &mut [Vec<f64>], assignments: &mut [usize], dists: &mut [f64]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignments.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let donor = (0..points.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
            .expect("k <= n guarantees a cluster with two or more points");
        centroids[empty] = points[donor].clone();
        assignments[donor] = empty;
        dists[donor] = 0.0;
    }
}

/// Best-of-`restarts` k-means++ / Lloyd clustering.
pub fn kmeans(points: &[EmbeddingVector], k: usize, seed: u64, params: &KMeansParams) -> Result<ClusteringResult> {
    check_points(points, k)?;
    let mut best: Option<ClusteringResult> = None;
    for restart in 0..params.restarts.max(1) {
        let mut r = rng::seeded(rng::derive_seed(seed, &[restart as u64]));
        let init = plus_plus_init(points, k, &mut r);
        let result = lloyd(points, init, params);
        if best.as_ref().is_none_or(|b| result.sse < b.sse) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Pick up to `m` representative instances of one relation.
///
/// Runs k-means with `k = m` over the embeddings and returns, centroid by
/// centroid, the nearest instance not already chosen (ties to the lower
/// input index).
pub fn select_memory<F>(
    instances: &[RelationInstance],
    m: usize,
    seed: u64,
    params: &KMeansParams,
    embed: F,
) -> Result<Vec<RelationInstance>>
where
    F: FnOnce(&[RelationInstance]) -> std::result::Result<Vec<EmbeddingVector>, BackendError>,
{
    if m == 0 {
        return Ok(Vec::new());
    }
    if instances.len() <= m {
        return Ok(instances.to_vec());
    }
    let points = embed(instances)?;
    if points.len() != instances.len() {
        return Err(ReplayError::EmbeddingCount {
            expected: instances.len(),
            found: points.len(),
        });
    }
    let clusters = kmeans(&points, m, seed, params)?;
    let mut used = vec![false; instances.len()];
    let mut chosen = Vec::with_capacity(m);
    for centroid in &clusters.centroids {
        let pick = (0..points.len())
            .filter(|&i| !used[i])
            .min_by(|&a, &b| {
                sq_dist(&points[a], centroid)
                    .total_cmp(&sq_dist(&points[b], centroid))
                    .then(a.cmp(&b))
            })
            .expect("m < n leaves an unused instance");
        used[pick] = true;
        chosen.push(instances[pick].clone());
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    #[serde(flatten)]
    pub instance: RelationInstance,
    pub origin_task: usize,
}

/// The cumulative replay buffer, keyed by relation.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryStore {
    pub memory_size: usize,
    pub entries: BTreeMap<String, Vec<MemoryEntry>>,
}

impl MemoryStore {
    pub fn new(memory_size: usize) -> Self {
        MemoryStore {
            memory_size,
            entries: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.values().all(Vec::is_empty)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.values().flatten()
    }

    /// Entries in task order, then relation order within each task.
    pub fn ordered(&self, relation_order: &[String]) -> Vec<&MemoryEntry> {
        let mut out: Vec<&MemoryEntry> = Vec::with_capacity(self.len());
        for rel in relation_order {
            if let Some(list) = self.entries.get(rel) {
                out.extend(list);
            }
        }
        out
    }

    pub fn origin_tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.iter().map(|e| e.origin_task)
    }

    /// Serialize as normalized instance lines carrying `origin_task`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in self.iter() {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, memory_size: usize) -> serde_json::Result<Self> {
        let mut store = MemoryStore::new(memory_size);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let entry: MemoryEntry = serde_json::from_str(line)?;
            store
                .entries
                .entry(entry.instance.relation.clone())
                .or_default()
                .push(entry);
        }
        Ok(store)
    }
}

/// Add a task's selections to the store. Relations must be new.
pub fn memory_union(
    mut store: MemoryStore,
    selected: BTreeMap<String, Vec<RelationInstance>>,
    task_index: usize,
) -> Result<MemoryStore> {
    if let Some(dup) = selected.keys().find(|r| store.entries.contains_key(*r)) {
        return Err(ReplayError::RelationPresent(dup.clone()));
    }
    for (relation, list) in selected {
        let entries = list
            .into_iter()
            .map(|instance| MemoryEntry {
                instance,
                origin_task: task_index,
            })
            .collect();
        store.entries.insert(relation, entries);
    }
    Ok(store)
}
