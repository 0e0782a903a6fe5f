//! Synthetic relation corpus with planted trigger words.
//!
//! Every relation owns a handful of trigger tokens; a sentence is filler
//! noise around a head entity, a tail entity and (usually) one of its
//! relation's triggers. Relations are therefore learnable from bag-of-words
//! features, while shared filler and entity vocabulary keeps tasks coupled
//! enough for sequential training to forget.

use serde::{Deserialize, Serialize};

use crate::corpus::{RelationInstance, Span};
use crate::rng::{self, HarnessRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub relations_per_task: usize,
    pub instances_per_relation: usize,
    pub triggers_per_relation: usize,
    pub filler_vocab: usize,
    pub entity_vocab: usize,
    /// Filler tokens per sentence.
    pub filler_len: usize,
    /// Probability that a sentence carries one of its own relation's triggers.
    pub signal_rate: f64,
    /// Probability that a sentence also carries another relation's trigger.
    pub distractor_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            tasks: 10,
            relations_per_task: 4,
            instances_per_relation: 60,
            triggers_per_relation: 3,
            filler_vocab: 200,
            entity_vocab: 400,
            filler_len: 8,
            signal_rate: 1.0,
            distractor_rate: 0.1,
        }
    }
}

pub fn relation_label(index: usize) -> String {
    format!("syn:rel{index:02}")
}

fn trigger(relation: usize, j: usize) -> String {
    format!("trig{relation:02}{}", (b'a' + j as u8) as char)
}

fn pick(rng: &mut HarnessRng, n: usize) -> usize {
    rng::below(rng, n)
}

/// Generate the corpus and its single-run relation order.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> (Vec<RelationInstance>, Vec<Vec<String>>) {
    let n_rel = spec.tasks * spec.relations_per_task;
    let mut g = rng::seeded(seed);
    let mut instances = Vec::with_capacity(n_rel * spec.instances_per_relation);
    for r in 0..n_rel {
        let label = relation_label(r);
        for i in 0..spec.instances_per_relation {
            let mut tokens: Vec<String> = (0..spec.filler_len)
                .map(|_| format!("w{}", pick(&mut g, spec.filler_vocab.max(1))))
                .collect();
            let insert_random = |g: &mut HarnessRng, tokens: &mut Vec<String>, tok: String| {
                let at = pick(g, tokens.len() + 1);
                tokens.insert(at, tok);
            };
            if rng::unit_f64(&mut g) < spec.signal_rate && spec.triggers_per_relation > 0 {
                let t = trigger(r, pick(&mut g, spec.triggers_per_relation));
                insert_random(&mut g, &mut tokens, t);
            }
            if n_rel > 1 && spec.triggers_per_relation > 0 && rng::unit_f64(&mut g) < spec.distractor_rate {
                let other = (r + 1 + pick(&mut g, n_rel - 1)) % n_rel;
                let t = trigger(other, pick(&mut g, spec.triggers_per_relation));
                insert_random(&mut g, &mut tokens, t);
            }
            let head = format!("ent{}", pick(&mut g, spec.entity_vocab.max(1)));
            let tail = format!("ent{}", pick(&mut g, spec.entity_vocab.max(1)));
            let len = tokens.len() + 2;
            let h = pick(&mut g, len);
            let mut t = pick(&mut g, len - 1);
            if t >= h {
                t += 1;
            }
            if h < t {
                tokens.insert(h, head);
                tokens.insert(t, tail);
            } else {
                tokens.insert(t, tail);
                tokens.insert(h, head);
            }
            instances.push(RelationInstance {
                id: format!("{label}#{i}"),
                tokens,
                head: Span(h, h + 1),
                tail: Span(t, t + 1),
                relation: label.clone(),
            });
        }
    }
    let order = (0..spec.tasks)
        .map(|k| {
            (0..spec.relations_per_task)
                .map(|j| relation_label(k * spec.relations_per_task + j))
                .collect()
        })
        .collect();
    (instances, order)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_validity() {
        let spec = SyntheticSpec::default();
        let (instances, order) = generate(&spec, 7);
        assert_eq!(instances.len(), 40 * 60);
        assert_eq!(order.len(), 10);
        assert!(order.iter().all(|t| t.len() == 4));
        for inst in &instances {
            inst.validate().unwrap();
            assert!(inst.head_text().starts_with("ent"));
            assert!(inst.tail_text().starts_with("ent"));
            assert_ne!(inst.head, inst.tail);
        }
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec {
            tasks: 2,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate(&spec, 3), generate(&spec, 3));
        assert_ne!(generate(&spec, 3).0, generate(&spec, 4).0);
    }
}
