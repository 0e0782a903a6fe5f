//! Corpus ingestion and task-stream construction.
//!
//! Three input formats are understood: the native TACRED JSON array, the
//! native FewRel relation→examples map, and a normalized one-object-per-line
//! format that the rest of the harness (and every fixture) uses.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::rng;

pub const NO_RELATION: &str = "no_relation";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid JSON{}: {source}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    Json {
        path: PathBuf,
        line: Option<usize>,
        source: serde_json::Error,
    },
    #[error("instance {instance_id}: field `{field}`: {reason}")]
    Malformed {
        instance_id: String,
        field: String,
        reason: String,
    },
    #[error("duplicate instance id {0}")]
    DuplicateId(String),
    #[error("relation order line {line}: label `{label}` already used on line {first_line}")]
    DuplicateOrderLabel {
        label: String,
        line: usize,
        first_line: usize,
    },
    #[error("relation order file {0} contains no tasks")]
    EmptyOrder(PathBuf),
    #[error("relation `{0}` does not occur in the corpus")]
    UnknownLabel(String),
    #[error("relation `{label}` has {count} instances; at least 3 are needed for train/valid/test")]
    TooFewInstances { label: String, count: usize },
    #[error("partition caps must be positive (train {train}, eval {eval})")]
    InvalidCaps { train: usize, eval: usize },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    pub fn start(self) -> usize {
        self.0
    }

    pub fn end(self) -> usize {
        self.1
    }

    pub fn contains(self, idx: usize) -> bool {
        self.0 <= idx && idx < self.1
    }
}

/// One labelled sentence with head and tail entity spans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub id: String,
    pub tokens: Vec<String>,
    pub head: Span,
    pub tail: Span,
    pub relation: String,
}

impl RelationInstance {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| CorpusError::Malformed {
            instance_id: self.id.clone(),
            field: field.to_string(),
            reason,
        };
        if self.tokens.is_empty() {
            return Err(bad("tokens", "token list is empty".into()));
        }
        if self.relation.is_empty() {
            return Err(bad("relation", "relation label is empty".into()));
        }
        for (field, span) in [("head", self.head), ("tail", self.tail)] {
            if span.0 >= span.1 || span.1 > self.tokens.len() {
                return Err(bad(
                    field,
                    format!(
                        "span ({}, {}) is empty or outside {} tokens",
                        span.0,
                        span.1,
                        self.tokens.len()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn head_text(&self) -> String {
        self.tokens[self.head.0..self.head.1].join(" ")
    }

    pub fn tail_text(&self) -> String {
        self.tokens[self.tail.0..self.tail.1].join(" ")
    }

    pub fn sentence(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    /// 1-based.
    pub task_index: usize,
    pub relations: Vec<String>,
    pub train: Vec<RelationInstance>,
    pub valid: Vec<RelationInstance>,
    pub test: Vec<RelationInstance>,
}

impl TaskSplit {
    pub fn train_for<'a>(&'a self, relation: &'a str) -> impl Iterator<Item = &'a RelationInstance> {
        self.train.iter().filter(move |i| i.relation == relation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub dataset_id: String,
    pub seed: u64,
    pub tasks: Vec<TaskSplit>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Labels of tasks `1..=k`, in stream order.
    pub fn labels_through(&self, k: usize) -> Vec<String> {
        self.tasks
            .iter()
            .take(k)
            .flat_map(|t| t.relations.iter().cloned())
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read(path)?;
        serde_json::from_str(&text).map_err(|source| CorpusError::Json {
            path: path.to_path_buf(),
            line: None,
            source,
        })
    }
}

/// Per-relation partition caps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caps {
    pub train: usize,
    pub eval: usize,
}

impl Caps {
    pub const TACRED: Caps = Caps { train: 320, eval: 40 };
    pub const FEWREL: Caps = Caps { train: 420, eval: 140 };

    /// Partition sizes `(train, valid, test)` for a relation with `n` instances.
    ///
    /// With `n >= train + 2*eval` every partition is full. Below that, the
    /// evaluation partitions shrink in proportion to the caps but keep at
    /// least one instance each, and training takes what remains.
    pub fn partition_sizes(self, n: usize) -> (usize, usize, usize) {
        let full = self.train + 2 * self.eval;
        if n >= full {
            return (self.train, self.eval, self.eval);
        }
        if n < 3 {
            return (n.min(self.train), 0, 0);
        }
        let proportional = (n * self.eval + full / 2) / full;
        let eval = proportional.clamp(1, self.eval).min((n - 1) / 2);
        let train = (n - 2 * eval).min(self.train);
        (train, eval, eval)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_json(path: &Path, text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        line: None,
        source,
    })
}

struct Fields<'a> {
    id: &'a str,
    obj: &'a serde_json::Map<String, Value>,
}

impl<'a> Fields<'a> {
    fn err(&self, field: &str, reason: impl Into<String>) -> CorpusError {
        CorpusError::Malformed {
            instance_id: self.id.to_string(),
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    fn get(&self, field: &str) -> Result<&'a Value> {
        self.obj.get(field).ok_or_else(|| self.err(field, "missing"))
    }

    fn str(&self, field: &str) -> Result<&'a str> {
        self.get(field)?
            .as_str()
            .ok_or_else(|| self.err(field, "expected a string"))
    }

    fn index(&self, field: &str) -> Result<i64> {
        self.get(field)?
            .as_i64()
            .ok_or_else(|| self.err(field, "expected an integer"))
    }

    fn tokens(&self, field: &str) -> Result<Vec<String>> {
        string_list(self.get(field)?).ok_or_else(|| self.err(field, "expected a list of strings"))
    }
}

fn string_list(v: &Value) -> Option<Vec<String>> {
    v.as_array()?.iter().map(|t| t.as_str().map(str::to_string)).collect()
}

/// Convert an inclusive `[start, end]` index pair to a half-open span.
fn inclusive_span(fields: &Fields, start_field: &str, end_field: &str) -> Result<Span> {
    let start = fields.index(start_field)?;
    let end = fields.index(end_field)?;
    if start < 0 {
        return Err(fields.err(start_field, "negative index"));
    }
    if end < start {
        return Err(fields.err(end_field, format!("empty span ({start}, {})", end + 1)));
    }
    Ok(Span(start as usize, end as usize + 1))
}

fn check_unique(instances: &[RelationInstance]) -> Result<()> {
    let mut seen = HashSet::with_capacity(instances.len());
    for inst in instances {
        if !seen.insert(inst.id.as_str()) {
            return Err(CorpusError::DuplicateId(inst.id.clone()));
        }
    }
    Ok(())
}

/// Read a TACRED-style JSON array. `no_relation` records are dropped.
///
/// Native TACRED span ends (`subj_end`, `obj_end`) are inclusive.
pub fn ingest_tacred(path: &Path) -> Result<Vec<RelationInstance>> {
    let text = read(path)?;
    let root = parse_json(path, &text)?;
    let records = root.as_array().ok_or_else(|| CorpusError::Malformed {
        instance_id: path.display().to_string(),
        field: "<root>".into(),
        reason: "expected a JSON array of records".into(),
    })?;

    let mut out = Vec::with_capacity(records.len());
    for (pos, record) in records.iter().enumerate() {
        let fallback = format!("#{pos}");
        let obj = record.as_object().ok_or_else(|| CorpusError::Malformed {
            instance_id: fallback.clone(),
            field: "<record>".into(),
            reason: "expected an object".into(),
        })?;
        let id = obj.get("id").and_then(Value::as_str).unwrap_or(&fallback);
        let fields = Fields { id, obj };
        fields.str("id")?;
        let relation = fields.str("relation")?;
        if relation == NO_RELATION {
            continue;
        }
        let inst = RelationInstance {
            id: id.to_string(),
            tokens: fields.tokens("token")?,
            head: inclusive_span(&fields, "subj_start", "subj_end")?,
            tail: inclusive_span(&fields, "obj_start", "obj_end")?,
            relation: relation.to_string(),
        };
        inst.validate()?;
        out.push(inst);
    }
    check_unique(&out)?;
    Ok(out)
}

fn fewrel_span(fields: &Fields, field: &str) -> Result<Span> {
    // ["surface", "wikidata id", [[i, j, ...], ...]]; the first mention is used.
    let entity = fields
        .get(field)?
        .as_array()
        .ok_or_else(|| fields.err(field, "expected [name, id, positions]"))?;
    let positions: Vec<i64> = entity
        .get(2)
        .and_then(Value::as_array)
        .and_then(|mentions| mentions.first())
        .and_then(Value::as_array)
        .and_then(|idx| idx.iter().map(Value::as_i64).collect::<Option<Vec<_>>>())
        .ok_or_else(|| fields.err(field, "missing token position list"))?;
    let (min, max) = match (positions.iter().min(), positions.iter().max()) {
        (Some(&lo), Some(&hi)) if lo >= 0 => (lo as usize, hi as usize),
        _ => return Err(fields.err(field, "empty or negative position list")),
    };
    Ok(Span(min, max + 1))
}

/// Read a FewRel-style map of relation label → examples.
pub fn ingest_fewrel(path: &Path) -> Result<Vec<RelationInstance>> {
    let text = read(path)?;
    let root = parse_json(path, &text)?;
    let map = root.as_object().ok_or_else(|| CorpusError::Malformed {
        instance_id: path.display().to_string(),
        field: "<root>".into(),
        reason: "expected an object mapping relation labels to examples".into(),
    })?;

    let mut out = Vec::new();
    for (relation, examples) in map {
        let examples = examples.as_array().ok_or_else(|| CorpusError::Malformed {
            instance_id: relation.clone(),
            field: "<examples>".into(),
            reason: "expected a list of examples".into(),
        })?;
        for (i, example) in examples.iter().enumerate() {
            let id = format!("{relation}#{i}");
            let obj = example.as_object().ok_or_else(|| CorpusError::Malformed {
                instance_id: id.clone(),
                field: "<example>".into(),
                reason: "expected an object".into(),
            })?;
            let fields = Fields { id: &id, obj };
            let inst = RelationInstance {
                tokens: fields.tokens("tokens")?,
                head: fewrel_span(&fields, "h")?,
                tail: fewrel_span(&fields, "t")?,
                relation: relation.clone(),
                id,
            };
            inst.validate()?;
            out.push(inst);
        }
    }
    check_unique(&out)?;
    Ok(out)
}

/// Read the normalized one-object-per-line format.
pub fn ingest_normalized(path: &Path) -> Result<Vec<RelationInstance>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: RelationInstance = serde_json::from_str(line).map_err(|source| CorpusError::Json {
            path: path.to_path_buf(),
            line: Some(lineno + 1),
            source,
        })?;
        inst.validate()?;
        out.push(inst);
    }
    check_unique(&out)?;
    Ok(out)
}

pub fn write_normalized(path: &Path, instances: &[RelationInstance]) -> std::io::Result<()> {
    let mut buf = String::new();
    for inst in instances {
        buf.push_str(&serde_json::to_string(inst).expect("instance serializes"));
        buf.push('\n');
    }
    fs::write(path, buf)
}

/// One run's task order, with the source line of every task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationOrder {
    pub tasks: Vec<Vec<String>>,
    pub lines: Vec<usize>,
}

impl RelationOrder {
    /// Source line of the task that lists `label`.
    pub fn line_of(&self, label: &str) -> Option<usize> {
        self.tasks
            .iter()
            .position(|t| t.iter().any(|l| l == label))
            .map(|i| self.lines[i])
    }
}

pub fn parse_relation_order(text: &str) -> Result<Vec<RelationOrder>> {
    let mut runs = Vec::new();
    let mut current = RelationOrder {
        tasks: Vec::new(),
        lines: Vec::new(),
    };
    let mut first_seen: HashMap<String, usize> = HashMap::new();

    let mut flush = |current: &mut RelationOrder, first_seen: &mut HashMap<String, usize>| {
        if !current.tasks.is_empty() {
            runs.push(std::mem::replace(
                current,
                RelationOrder {
                    tasks: Vec::new(),
                    lines: Vec::new(),
                },
            ));
        }
        first_seen.clear();
    };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            flush(&mut current, &mut first_seen);
            continue;
        }
        let labels: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        for label in &labels {
            if let Some(&first_line) = first_seen.get(label) {
                return Err(CorpusError::DuplicateOrderLabel {
                    label: label.clone(),
                    line: lineno,
                    first_line,
                });
            }
            first_seen.insert(label.clone(), lineno);
        }
        current.tasks.push(labels);
        current.lines.push(lineno);
    }
    flush(&mut current, &mut first_seen);
    Ok(runs)
}

pub fn load_relation_order(path: &Path) -> Result<Vec<RelationOrder>> {
    let runs = parse_relation_order(&read(path)?)?;
    if runs.is_empty() {
        return Err(CorpusError::EmptyOrder(path.to_path_buf()));
    }
    Ok(runs)
}

/// Partition every ordered relation into train/valid/test and group them
/// into tasks. Each relation's instances are shuffled by a generator keyed
/// on `(seed, label)`, so adding or removing a relation leaves the others
/// untouched.
pub fn build_task_stream(
    dataset_id: &str,
    instances: &[RelationInstance],
    order: &[Vec<String>],
    caps: Caps,
    seed: u64,
) -> Result<TaskStream> {
    if caps.train == 0 || caps.eval == 0 {
        return Err(CorpusError::InvalidCaps {
            train: caps.train,
            eval: caps.eval,
        });
    }
    let mut by_relation: BTreeMap<&str, Vec<&RelationInstance>> = BTreeMap::new();
    for inst in instances {
        by_relation.entry(&inst.relation).or_default().push(inst);
    }

    let mut tasks = Vec::with_capacity(order.len());
    for (t, labels) in order.iter().enumerate() {
        let mut split = TaskSplit {
            task_index: t + 1,
            relations: labels.clone(),
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        };
        for label in labels {
            let pool = by_relation
                .get(label.as_str())
                .ok_or_else(|| CorpusError::UnknownLabel(label.clone()))?;
            if pool.len() < 3 {
                return Err(CorpusError::TooFewInstances {
                    label: label.clone(),
                    count: pool.len(),
                });
            }
            let mut shuffled = pool.clone();
            rng::fisher_yates(&mut shuffled, &mut rng::keyed(seed, label));
            let (n_train, n_valid, n_test) = caps.partition_sizes(shuffled.len());
            let mut it = shuffled.into_iter().cloned();
            split.train.extend(it.by_ref().take(n_train));
            split.valid.extend(it.by_ref().take(n_valid));
            split.test.extend(it.by_ref().take(n_test));
        }
        tasks.push(split);
    }
    Ok(TaskStream {
        dataset_id: dataset_id.to_string(),
        seed,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn inst(id: &str, relation: &str) -> RelationInstance {
        RelationInstance {
            id: id.into(),
            tokens: vec!["a".into(), "b".into(), "c".into()],
            head: Span(0, 1),
            tail: Span(2, 3),
            relation: relation.into(),
        }
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn tacred_record(id: &str, relation: &str, subj: (i64, i64)) -> String {
        format!(
            r#"{{"id":"{id}","token":["Bill","Gates","founded","Microsoft","in","1975","."],"subj_start":{},"subj_end":{},"obj_start":3,"obj_end":3,"relation":"{relation}"}}"#,
            subj.0, subj.1
        )
    }

    #[test]
    fn tacred_fixture_drops_no_relation() {
        let rels = [
            "org:founded_by",
            "no_relation",
            "per:title",
            "no_relation",
            "per:employee_of",
            "org:founded_by",
            "per:title",
        ];
        let body: Vec<String> = rels
            .iter()
            .enumerate()
            .map(|(i, r)| tacred_record(&format!("r{i}"), r, (0, 1)))
            .collect();
        let f = write_tmp(&format!("[{}]", body.join(",")));
        let out = ingest_tacred(f.path()).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|i| i.relation != NO_RELATION));
        assert_eq!(
            out.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(),
            ["r0", "r2", "r4", "r5", "r6"]
        );
        assert_eq!(out[0].head, Span(0, 2));
        assert_eq!(out[0].tail, Span(3, 4));
        assert_eq!(out[0].head_text(), "Bill Gates");
    }

    #[test]
    fn tacred_empty_span_is_rejected() {
        // subj_start 3, subj_end 2 is the half-open span (3, 3).
        let f = write_tmp(&format!("[{}]", tacred_record("bad", "per:title", (3, 2))));
        match ingest_tacred(f.path()) {
            Err(CorpusError::Malformed { instance_id, field, .. }) => {
                assert_eq!(instance_id, "bad");
                assert_eq!(field, "subj_end");
            }
            other => panic!("expected malformed, got {other:?}"),
        }
    }

    #[test]
    fn tacred_missing_field_names_id_and_field() {
        let f = write_tmp(r#"[{"id":"x1","token":["a"],"subj_start":0,"subj_end":0,"obj_start":0,"relation":"r"}]"#);
        let err = ingest_tacred(f.path()).unwrap_err().to_string();
        assert!(err.contains("x1") && err.contains("obj_end"), "{err}");
    }

    #[test]
    fn tacred_span_out_of_bounds() {
        let f = write_tmp(
            r#"[{"id":"x2","token":["a","b"],"subj_start":0,"subj_end":0,"obj_start":1,"obj_end":4,"relation":"r"}]"#,
        );
        let err = ingest_tacred(f.path()).unwrap_err().to_string();
        assert!(err.contains("x2") && err.contains("tail"), "{err}");
    }

    fn fewrel_example(h: &[usize], t: &[usize]) -> String {
        let toks: Vec<String> = (0..8).map(|i| format!("\"w{i}\"")).collect();
        format!(
            r#"{{"tokens":[{}],"h":["head","Q1",[{:?}]],"t":["tail","Q2",[{:?}]]}}"#,
            toks.join(","),
            h,
            t
        )
    }

    #[test]
    fn fewrel_fixture_flattens_in_file_order() {
        let ex = fewrel_example(&[2, 3, 4], &[6]);
        let body = format!(r#"{{"P931":[{ex},{ex}],"P17":[{ex},{ex}],"P106":[{ex},{ex}]}}"#);
        let f = write_tmp(&body);
        let out = ingest_fewrel(f.path()).unwrap();
        assert_eq!(out.len(), 6);
        let rels: Vec<&str> = out.iter().map(|i| i.relation.as_str()).collect();
        assert_eq!(rels, ["P931", "P931", "P17", "P17", "P106", "P106"]);
        assert_eq!(out[0].head, Span(2, 5));
        assert_eq!(out[0].tail, Span(6, 7));
        assert_eq!(out[1].id, "P931#1");
    }

    #[test]
    fn fewrel_large_relation_keeps_count() {
        let ex = fewrel_example(&[0], &[1]);
        let list = vec![ex; 700].join(",");
        let f = write_tmp(&format!(r#"{{"P1":[{list}]}}"#));
        let out = ingest_fewrel(f.path()).unwrap();
        assert_eq!(out.len(), 700);
        assert!(out.iter().all(|i| i.relation == "P1"));
    }

    #[test]
    fn fewrel_bad_positions() {
        let f = write_tmp(r#"{"P1":[{"tokens":["a","b"],"h":["a","Q",[[]]],"t":["b","Q",[[1]]]}]}"#);
        let err = ingest_fewrel(f.path()).unwrap_err().to_string();
        assert!(err.contains("P1#0") && err.contains("`h`"), "{err}");
    }

    #[test]
    fn normalized_round_trip() {
        let items = vec![inst("a", "r1"), inst("b", "r2")];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_normalized(f.path(), &items).unwrap();
        assert_eq!(ingest_normalized(f.path()).unwrap(), items);
    }

    #[test]
    fn normalized_duplicate_ids_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        write_normalized(f.path(), &[inst("a", "r1"), inst("a", "r2")]).unwrap();
        assert!(matches!(ingest_normalized(f.path()), Err(CorpusError::DuplicateId(_))));
    }

    #[test]
    fn order_file_runs_and_comments() {
        let mut text = String::from("# five runs\n");
        for run in 0..5 {
            for task in 0..10 {
                let labels: Vec<String> = (0..4).map(|r| format!("rel{run}_{}", task * 4 + r)).collect();
                text.push_str(&labels.join(" "));
                text.push('\n');
            }
            text.push('\n');
        }
        let runs = parse_relation_order(&text).unwrap();
        assert_eq!(runs.len(), 5);
        for run in &runs {
            assert_eq!(run.tasks.len(), 10);
            assert!(run.tasks.iter().all(|t| t.len() == 4));
        }
        assert_eq!(runs[0].lines[0], 2);
        assert_eq!(runs[1].line_of("rel1_5"), Some(14));
    }

    #[test]
    fn order_file_duplicate_label() {
        let err = parse_relation_order("a b\nc a\n").unwrap_err();
        assert!(matches!(
            err,
            CorpusError::DuplicateOrderLabel {
                line: 2,
                first_line: 1,
                ..
            }
        ));
        // the same label may reappear in a different run
        assert!(parse_relation_order("a b\n\nb a\n").is_ok());
    }

    fn corpus(relations: usize, per: usize) -> Vec<RelationInstance> {
        (0..relations)
            .flat_map(|r| (0..per).map(move |i| inst(&format!("r{r}-{i}"), &format!("rel{r}"))))
            .collect()
    }

    fn order(relations: usize, per_task: usize) -> Vec<Vec<String>> {
        (0..relations / per_task)
            .map(|t| (0..per_task).map(|r| format!("rel{}", t * per_task + r)).collect())
            .collect()
    }

    #[test]
    fn stream_shape_and_caps() {
        let mut data = corpus(40, 420);
        data.extend((0..80).map(|i| inst(&format!("big-{i}"), "rel0")));
        let stream = build_task_stream("t", &data, &order(40, 4), Caps::TACRED, 3).unwrap();
        assert_eq!(stream.tasks.len(), 10);
        assert_eq!(
            stream.tasks.iter().map(|t| t.task_index).collect::<Vec<_>>(),
            (1..=10).collect::<Vec<_>>()
        );
        let first = &stream.tasks[0];
        assert_eq!(first.train_for("rel0").count(), 320);
        assert_eq!(first.train.len(), 4 * 320);
        assert_eq!(first.valid.len(), 4 * 40);
        assert_eq!(first.test.len(), 4 * 40);
    }

    #[test]
    fn stream_is_deterministic() {
        let data = corpus(8, 30);
        let a = build_task_stream("t", &data, &order(8, 4), Caps::TACRED, 11).unwrap();
        let b = build_task_stream("t", &data, &order(8, 4), Caps::TACRED, 11).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = build_task_stream("t", &data, &order(8, 4), Caps::TACRED, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn per_relation_seeding_is_independent_of_neighbours() {
        let data = corpus(8, 30);
        let full = build_task_stream("t", &data, &order(8, 4), Caps::TACRED, 5).unwrap();
        let only = build_task_stream("t", &data, &[vec!["rel2".to_string()]], Caps::TACRED, 5).unwrap();
        let ids = |s: &TaskSplit| {
            s.train
                .iter()
                .filter(|i| i.relation == "rel2")
                .map(|i| i.id.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(&full.tasks[0]), ids(&only.tasks[0]));
    }

    #[test]
    fn unknown_and_sparse_relations() {
        let data = corpus(2, 10);
        let err = build_task_stream("t", &data, &[vec!["nope".into()]], Caps::TACRED, 0).unwrap_err();
        assert!(err.to_string().contains("nope"));

        let mut sparse = corpus(1, 2);
        sparse.extend(corpus(2, 10).into_iter().skip(10));
        let err = build_task_stream("t", &sparse, &[vec!["rel0".into()]], Caps::TACRED, 0).unwrap_err();
        assert!(matches!(err, CorpusError::TooFewInstances { count: 2, .. }));
    }

    #[test]
    fn partition_sizes_small_relations() {
        assert_eq!(Caps::TACRED.partition_sizes(3), (1, 1, 1));
        assert_eq!(Caps::TACRED.partition_sizes(400), (320, 40, 40));
        assert_eq!(Caps::TACRED.partition_sizes(1000), (320, 40, 40));
        assert_eq!(Caps::TACRED.partition_sizes(200), (160, 20, 20));
        assert_eq!(Caps::FEWREL.partition_sizes(700), (420, 140, 140));
    }

    proptest::proptest! {
        #[test]
        fn partitions_are_disjoint_and_capped(
            sizes in proptest::collection::vec(3usize..60, 1..6),
            train_cap in 1usize..30,
            eval_cap in 1usize..10,
            seed in 0u64..1000,
        ) {
            let data: Vec<RelationInstance> = sizes
                .iter()
                .enumerate()
                .flat_map(|(r, &n)| (0..n).map(move |i| inst(&format!("{r}-{i}"), &format!("rel{r}"))))
                .collect();
            let order: Vec<Vec<String>> = (0..sizes.len()).map(|r| vec![format!("rel{r}")]).collect();
            let caps = Caps { train: train_cap, eval: eval_cap };
            let stream = build_task_stream("p", &data, &order, caps, seed).unwrap();
            for (task, &n) in stream.tasks.iter().zip(&sizes) {
                let mut ids = HashSet::new();
                for i in task.train.iter().chain(&task.valid).chain(&task.test) {
                    proptest::prop_assert!(ids.insert(i.id.clone()));
                    proptest::prop_assert!(task.relations.contains(&i.relation));
                }
                proptest::prop_assert!(task.train.len() <= train_cap);
                proptest::prop_assert!(task.valid.len() <= eval_cap && task.test.len() <= eval_cap);
                proptest::prop_assert!(!task.train.is_empty() && !task.valid.is_empty() && !task.test.is_empty());
                if n >= train_cap + 2 * eval_cap {
                    proptest::prop_assert_eq!(task.train.len(), train_cap);
                    proptest::prop_assert_eq!(task.valid.len(), eval_cap);
                    proptest::prop_assert_eq!(task.test.len(), eval_cap);
                }
            }
        }
    }
}
