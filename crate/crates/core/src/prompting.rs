//! Instruction prompts and completion parsing.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::RelationInstance;

/// Version stamp for the canonical template wordings below. Results are
/// only comparable between reports carrying the same stamp.
pub const TEMPLATE_VERSION: &str = "cre-templates/1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("gold relation `{gold}` of instance {instance_id} is not among the candidates")]
    GoldNotCandidate { instance_id: String, gold: String },
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("candidate `{0}` is listed twice")]
    DuplicateCandidate(String),
    #[error("unknown template `{0}` (expected T1 or T2)")]
    UnknownTemplate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum PromptTemplateId {
    /// Entity-marked sentence followed by the candidate list and a question.
    #[default]
    T1,
    /// Explicit task statement naming both entities, then sentence and candidates.
    T2,
}

impl fmt::Display for PromptTemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptTemplateId::T1 => "T1",
            PromptTemplateId::T2 => "T2",
        })
    }
}

impl FromStr for PromptTemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T1" | "1" => Ok(PromptTemplateId::T1),
            "T2" | "2" => Ok(PromptTemplateId::T2),
            _ => Err(PromptError::UnknownTemplate(s.to_string())),
        }
    }
}

/// A rendered prompt. The structured instance travels with the text so that
/// in-process backends can skip tokenization; external backends only ever
/// see `text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub gold: String,
    pub candidates: Vec<String>,
    pub origin_task: usize,
    pub instance: RelationInstance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum PredictionOutcome {
    Known(String),
    Hallucinated(String),
}

impl PredictionOutcome {
    pub fn label(&self) -> Option<&str> {
        match self {
            PredictionOutcome::Known(l) => Some(l),
            PredictionOutcome::Hallucinated(_) => None,
        }
    }

    pub fn is_hallucinated(&self) -> bool {
        matches!(self, PredictionOutcome::Hallucinated(_))
    }

    /// Hallucinations never match a gold label.
    pub fn is_correct(&self, gold: &str) -> bool {
        self.label() == Some(gold)
    }
}

fn marked_sentence(instance: &RelationInstance) -> String {
    let mut parts = Vec::with_capacity(instance.tokens.len() + 4);
    for (i, tok) in instance.tokens.iter().enumerate() {
        if i == instance.head.start() {
            parts.push("[E1]");
        }
        if i == instance.tail.start() {
            parts.push("[E2]");
        }
        parts.push(tok);
        if i + 1 == instance.tail.end() {
            parts.push("[/E2]");
        }
        if i + 1 == instance.head.end() {
            parts.push("[/E1]");
        }
    }
    parts.join(" ")
}

fn check_candidates(instance: &RelationInstance, candidates: &[String]) -> Result<(), PromptError> {
    if candidates.is_empty() {
        return Err(PromptError::NoCandidates);
    }
    let mut seen = BTreeSet::new();
    for c in candidates {
        if !seen.insert(c.as_str()) {
            return Err(PromptError::DuplicateCandidate(c.clone()));
        }
    }
    if !seen.contains(instance.relation.as_str()) {
        return Err(PromptError::GoldNotCandidate {
            instance_id: instance.id.clone(),
            gold: instance.relation.clone(),
        });
    }
    Ok(())
}

pub fn render_prompt(
    instance: &RelationInstance,
    candidates: &[String],
    template: PromptTemplateId,
    origin_task: usize,
) -> Result<Prompt, PromptError> {
    check_candidates(instance, candidates)?;
    let list = candidates.join(", ");
    let text = match template {
        PromptTemplateId::T1 => format!(
            "Sentence: {}\nWhat is the relation between [E1] and [E2]? Choose exactly one of: {list}.\nRelation:",
            marked_sentence(instance)
        ),
        PromptTemplateId::T2 => format!(
            "Task: classify the relation between the head entity \"{}\" and the tail entity \"{}\" in the sentence.\nSentence: {}\nCandidate relations: {list}.\nAnswer:",
            instance.head_text(),
            instance.tail_text(),
            instance.sentence()
        ),
    };
    Ok(Prompt {
        text,
        gold: instance.relation.clone(),
        candidates: candidates.to_vec(),
        origin_task,
        instance: instance.clone(),
    })
}

/// Lowercase, trim, strip leading/trailing non-alphanumerics, collapse
/// internal whitespace.
pub fn normalize_label(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let stripped = lowered.trim_matches(|c: char| !c.is_alphanumeric());
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Map a raw completion onto the label universe. An exact match (modulo
/// surrounding whitespace) wins; otherwise anything that does not normalize
/// to exactly one universe label is a hallucination.
pub fn parse_completion<S: AsRef<str>>(raw: &str, universe: &[S]) -> PredictionOutcome {
    let trimmed = raw.trim();
    if let Some(label) = universe.iter().map(AsRef::as_ref).find(|l| *l == trimmed) {
        return PredictionOutcome::Known(label.to_string());
    }
    let needle = normalize_label(raw);
    let mut hits = universe
        .iter()
        .map(AsRef::as_ref)
        .filter(|label| normalize_label(label) == needle);
    match (hits.next(), hits.next()) {
        (Some(label), None) if !needle.is_empty() => PredictionOutcome::Known(label.to_string()),
        _ => PredictionOutcome::Hallucinated(raw.to_string()),
    }
}
