//! Backend contract and the built-in desk-scale classifier.
//!
//! The built-in backend hashes unigram, bigram and entity-marker features
//! into a `2^15`-wide sparse vector, maps them through one tanh hidden layer
//! and scores every known relation with a linear row. The hidden activation
//! doubles as the sample embedding used for memory selection, so embeddings
//! move as the model trains.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::RelationInstance;
use crate::prompting::{PredictionOutcome, Prompt};
use crate::rng;

pub type EmbeddingVector = Vec<f64>;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("session has not been trained on any class")]
    Untrained,
    #[error("training diverged: non-finite loss {loss} at lr {lr}")]
    NonFiniteLoss { loss: f64, lr: f64 },
    #[error("could not start backend: {0}")]
    Spawn(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend lost: {0}")]
    Lost(String),
    #[error("backend reported failure: {0}")]
    Remote(String),
}

pub type Result<T> = std::result::Result<T, BackendError>;

/// Operations the continual-learning loop needs from a model.
///
/// `train` mutates the session; the other calls must leave it unchanged.
pub trait Backend {
    fn backend_id(&self) -> &str;
    fn embedding_dim(&self) -> usize;
    /// Which representation `embed` exposes, echoed into reports.
    fn embedding_source(&self) -> &str;
    /// Runs `epochs` passes over `examples` and returns the mean loss of the last one.
    fn train(&mut self, examples: &[Prompt], epochs: usize, lr: f64) -> Result<f64>;
    fn eval_loss(&mut self, examples: &[Prompt]) -> Result<f64>;
    fn predict(&mut self, prompts: &[Prompt]) -> Result<Vec<PredictionOutcome>>;
    fn embed(&mut self, prompts: &[Prompt]) -> Result<Vec<EmbeddingVector>>;
    /// Persist the session so a run can resume from it. Returns `false` when
    /// the backend cannot be snapshotted.
    fn save_state(&self, _path: &Path) -> io::Result<bool> {
        Ok(false)
    }
}

/// Sparse hashed feature counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureVector {
    pub values: BTreeMap<usize, u32>,
}

impl FeatureVector {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.keys().copied()
    }
}

pub const DEFAULT_FEATURE_DIM: usize = 1 << 15;
pub const DEFAULT_HIDDEN: usize = 128;

/// Hash index of a feature string: FNV-1a-64 reduced mod `dim`.
pub fn feature_index(feature: &str, dim: usize) -> usize {
    (rng::fnv1a64(feature.as_bytes()) % dim as u64) as usize
}

/// Unigrams (`tok`), adjacent bigrams (`a b`), and entity markers
/// (`[E1]tok` for head tokens, `[E2]tok` for tail tokens).
pub fn featurize(instance: &RelationInstance, dim: usize) -> FeatureVector {
    assert!(
        dim.is_power_of_two() && dim >= 1 << 10,
        "feature dim must be a power of two >= 1024"
    );
    let mut values = BTreeMap::new();
    let mut add = |f: &str| *values.entry(feature_index(f, dim)).or_insert(0) += 1;
    for tok in &instance.tokens {
        add(tok);
    }
    for pair in instance.tokens.windows(2) {
        add(&format!("{} {}", pair[0], pair[1]));
    }
    for tok in &instance.tokens[instance.head.start()..instance.head.end()] {
        add(&format!("[E1]{tok}"));
    }
    for tok in &instance.tokens[instance.tail.start()..instance.tail.end()] {
        add(&format!("[E2]{tok}"));
    }
    FeatureVector { values }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuiltinConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BuiltinConfig {
    fn default() -> Self {
        BuiltinConfig {
            feature_dim: DEFAULT_FEATURE_DIM,
            hidden: DEFAULT_HIDDEN,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Trainable weights. `w1` is row-major by feature: row `i` holds the
/// `hidden` weights of feature `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub feature_dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub classes: Vec<String>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

/// Gradient of the mean loss over a batch. Only feature rows that occur in
/// the batch are present in `w1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w1: HashMap<usize, Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

impl Parameters {
    fn init(cfg: &BuiltinConfig) -> Self {
        let mut r = rng::seeded(cfg.seed);
        let w1 = (0..cfg.feature_dim * cfg.hidden)
            .map(|_| (rng::unit_f64(&mut r) * 2.0 - 1.0) * 0.05)
            .collect();
        Parameters {
            feature_dim: cfg.feature_dim,
            hidden: cfg.hidden,
            w1,
            b1: vec![0.0; cfg.hidden],
            classes: Vec::new(),
            w2: Vec::new(),
            b2: Vec::new(),
        }
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    fn ensure_class(&mut self, label: &str) -> usize {
        self.class_index(label).unwrap_or_else(|| {
            self.classes.push(label.to_string());
            self.w2.push(vec![0.0; self.hidden]);
            self.b2.push(0.0);
            self.classes.len() - 1
        })
    }

    pub fn hidden_activation(&self, x: &FeatureVector) -> Vec<f64> {
        let mut z = self.b1.clone();
        for (&i, &count) in &x.values {
            let row = &self.w1[i * self.hidden..(i + 1) * self.hidden];
            let c = count as f64;
            for (zj, wj) in z.iter_mut().zip(row) {
                *zj += c * wj;
            }
        }
        z.iter_mut().for_each(|v| *v = v.tanh());
        z
    }

    fn logit(&self, class: usize, h: &[f64]) -> f64 {
        self.b2[class] + dot(&self.w2[class], h)
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        (0..self.classes.len()).map(|c| self.logit(c, h)).collect()
    }

    /// Mean cross-entropy and its gradient. Every `gold` must index a known class.
    pub fn loss_and_gradient(&self, batch: &[(FeatureVector, usize)]) -> (f64, Gradient) {
        let n_classes = self.classes.len();
        let mut grad = Gradient {
            w1: HashMap::new(),
            b1: vec![0.0; self.hidden],
            w2: vec![vec![0.0; self.hidden]; n_classes],
            b2: vec![0.0; n_classes],
        };
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (x, gold) in batch {
            let h = self.hidden_activation(x);
            let logits = self.logits(&h);
            let (loss, mut delta) = softmax_xent(&logits, *gold);
            total += loss;
            delta.iter_mut().for_each(|d| *d *= scale);

            let mut dh = vec![0.0; self.hidden];
            for (c, &d) in delta.iter().enumerate() {
                grad.b2[c] += d;
                for j in 0..self.hidden {
                    grad.w2[c][j] += d * h[j];
                    dh[j] += d * self.w2[c][j];
                }
            }
            let dz: Vec<f64> = dh.iter().zip(&h).map(|(g, hj)| g * (1.0 - hj * hj)).collect();
            for (gb, d) in grad.b1.iter_mut().zip(&dz) {
                *gb += d;
            }
            for (&i, &count) in &x.values {
                let row = grad.w1.entry(i).or_insert_with(|| vec![0.0; self.hidden]);
                let c = count as f64;
                for (gj, d) in row.iter_mut().zip(&dz) {
                    *gj += c * d;
                }
            }
        }
        (total * scale, grad)
    }

    fn apply(&mut self, grad: &Gradient, lr: f64) {
        for (&i, row) in &grad.w1 {
            let w = &mut self.w1[i * self.hidden..(i + 1) * self.hidden];
            for (wj, gj) in w.iter_mut().zip(row) {
                *wj -= lr * gj;
            }
        }
        axpy(&mut self.b1, &grad.b1, -lr);
        for (w, g) in self.w2.iter_mut().zip(&grad.w2) {
            axpy(w, g, -lr);
        }
        axpy(&mut self.b2, &grad.b2, -lr);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Cross-entropy of `gold` under softmax(`logits`) and d loss / d logits.
fn softmax_xent(logits: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[gold];
    let mut delta: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    delta[gold] -= 1.0;
    (loss, delta)
}

/// In-process classifier backend.
#[derive(Debug, Clone)]
pub struct BuiltinBackend {
    config: BuiltinConfig,
    params: Parameters,
    train_calls: u64,
}

impl BuiltinBackend {
    pub const ID: &'static str = "builtin-hashed-mlp";

    pub fn new(config: BuiltinConfig) -> Result<Self> {
        if !config.feature_dim.is_power_of_two() || config.feature_dim < 1 << 10 {
            return Err(BackendError::InvalidArgument(format!(
                "feature_dim {} must be a power of two >= 1024",
                config.feature_dim
            )));
        }
        if config.hidden == 0 || config.batch_size == 0 {
            return Err(BackendError::InvalidArgument(
                "hidden and batch_size must be positive".into(),
            ));
        }
        Ok(BuiltinBackend {
            params: Parameters::init(&config),
            config,
            train_calls: 0,
        })
    }

    pub fn config(&self) -> &BuiltinConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn features(&self, prompt: &Prompt) -> FeatureVector {
        featurize(&prompt.instance, self.config.feature_dim)
    }

    /// Loss and gradient on `prompts`, registering unseen gold labels first.
    pub fn batch_gradient(&mut self, prompts: &[Prompt]) -> (f64, Gradient) {
        let batch: Vec<_> = prompts
            .iter()
            .map(|p| (self.features(p), self.params.ensure_class(&p.gold)))
            .collect();
        self.params.loss_and_gradient(&batch)
    }

    /// Serialize the full session state.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let header = SnapshotHeader {
            config: self.config,
            train_calls: self.train_calls,
            classes: self.params.classes.clone(),
        };
        let mut out = io::BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        let p = &self.params;
        let rows = p.w2.iter().flatten();
        for v in p.w1.iter().chain(&p.b1).chain(rows).chain(&p.b2) {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let mut input = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        input.read_line(&mut line)?;
        let header: SnapshotHeader = serde_json::from_str(&line)?;
        let cfg = header.config;
        let mut read_vec = |n: usize| -> io::Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            input.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let w1 = read_vec(cfg.feature_dim * cfg.hidden)?;
        let b1 = read_vec(cfg.hidden)?;
        let w2 = (0..header.classes.len())
            .map(|_| read_vec(cfg.hidden))
            .collect::<io::Result<Vec<_>>>()?;
        let b2 = read_vec(header.classes.len())?;
        Ok(BuiltinBackend {
            config: cfg,
            params: Parameters {
                feature_dim: cfg.feature_dim,
                hidden: cfg.hidden,
                w1,
                b1,
                classes: header.classes,
                w2,
                b2,
            },
            train_calls: header.train_calls,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    config: BuiltinConfig,
    train_calls: u64,
    classes: Vec<String>,
}

impl Backend for BuiltinBackend {
    fn backend_id(&self) -> &str {
        Self::ID
    }

    fn embedding_dim(&self) -> usize {
        self.config.hidden
    }

    fn embedding_source(&self) -> &str {
        "hidden-tanh"
    }

    fn save_state(&self, path: &Path) -> io::Result<bool> {
        self.save(path).map(|_| true)
    }

    fn train(&mut self, examples: &[Prompt], epochs: usize, lr: f64) -> Result<f64> {
        if examples.is_empty() {
            return Err(BackendError::InvalidArgument("no training examples".into()));
        }
        if epochs == 0 {
            return Err(BackendError::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(BackendError::InvalidArgument(format!(
                "learning rate {lr} must be positive"
            )));
        }
        let data: Vec<(FeatureVector, usize)> = examples
            .iter()
            .map(|p| (self.features(p), self.params.ensure_class(&p.gold)))
            .collect();
        self.train_calls += 1;
        let mut order_rng = rng::seeded(rng::derive_seed(self.config.seed, &[self.train_calls]));
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_loss = f64::NAN;
        for _ in 0..epochs {
            rng::fisher_yates(&mut order, &mut order_rng);
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<_> = chunk.iter().map(|&i| data[i].clone()).collect();
                let (loss, grad) = self.params.loss_and_gradient(&batch);
                if !loss.is_finite() {
                    return Err(BackendError::NonFiniteLoss { loss, lr });
                }
                self.params.apply(&grad, lr);
                total += loss * chunk.len() as f64;
            }
            epoch_loss = total / data.len() as f64;
        }
        Ok(epoch_loss)
    }

    fn eval_loss(&mut self, examples: &[Prompt]) -> Result<f64> {
        if examples.is_empty() {
            return Err(BackendError::InvalidArgument("no evaluation examples".into()));
        }
        // Labels the output layer has not seen score as zero rows, exactly
        // as they would right after being added.
        let mut labels = self.params.classes.clone();
        for p in examples {
            if !labels.contains(&p.gold) {
                labels.push(p.gold.clone());
            }
        }
        let known = self.params.classes.len();
        let mut total = 0.0;
        for p in examples {
            let h = self.params.hidden_activation(&self.features(p));
            let mut logits = self.params.logits(&h);
            logits.resize(labels.len(), 0.0);
            let gold = labels.iter().position(|l| *l == p.gold).expect("gold registered");
            total += softmax_xent(&logits, gold).0;
        }
        debug_assert_eq!(known, self.params.classes.len());
        Ok(total / examples.len() as f64)
    }

    fn predict(&mut self, prompts: &[Prompt]) -> Result<Vec<PredictionOutcome>> {
        if self.params.classes.is_empty() {
            return Err(BackendError::Untrained);
        }
        prompts
            .iter()
            .map(|p| {
                let h = self.params.hidden_activation(&self.features(p));
                let mut best: Option<(&String, f64)> = None;
                for cand in &p.candidates {
                    let score = self.params.class_index(cand).map_or(0.0, |c| self.params.logit(c, &h));
                    if best.is_none_or(|(_, s)| score > s) {
                        best = Some((cand, score));
                    }
                }
                best.map(|(label, _)| PredictionOutcome::Known(label.clone()))
                    .ok_or_else(|| BackendError::InvalidArgument("prompt has no candidates".into()))
            })
            .collect()
    }

    fn embed(&mut self, prompts: &[Prompt]) -> Result<Vec<EmbeddingVector>> {
        Ok(prompts
            .iter()
            .map(|p| self.params.hidden_activation(&self.features(p)))
            .collect())
    }
}
