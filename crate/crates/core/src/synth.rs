//! Seeded synthetic corpora for tests, benchmarks and directional checks.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ArgumentMention, DocumentRecord, EventRecord, Role};

/// Shape of [`random_corpus`] documents.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub min_events: usize,
    pub max_events: usize,
    pub entities: usize,
    pub predicates: usize,
    /// Size of the lemma pool shared by entity heads and entity-less arguments.
    pub lemmas: usize,
    pub dobj_prob: f64,
    pub prep_prob: f64,
    /// Probability that an argument mentions a document entity.
    pub entity_prob: f64,
    /// Entity `i` is drawn with weight `(i + 1)^-salience`; 0 is uniform.
    pub salience: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            min_events: 3,
            max_events: 7,
            entities: 4,
            predicates: 12,
            lemmas: 15,
            dobj_prob: 0.7,
            prep_prob: 0.3,
            entity_prob: 0.8,
            salience: 0.0,
        }
    }
}

const PREPOSITIONS: [&str; 3] = ["in", "to", "with"];

struct DocBuilder {
    events: Vec<EventRecord>,
    next_mention: usize,
}

impl DocBuilder {
    fn new() -> Self {
        DocBuilder {
            events: Vec::new(),
            next_mention: 0,
        }
    }

    fn event(&mut self, pred: &str, args: Vec<(Role, String, Option<usize>)>) {
        let args = args
            .into_iter()
            .map(|(role, lemma, entity_id)| {
                self.next_mention += 1;
                ArgumentMention {
                    role,
                    lemma,
                    entity_id,
                    mention_id: self.next_mention - 1,
                }
            })
            .collect();
        self.events.push(EventRecord {
            predicate_lemma: pred.to_string(),
            negated: false,
            particle: None,
            args,
        });
    }

    fn finish(self, doc_id: String, entity_count: usize) -> DocumentRecord {
        DocumentRecord {
            doc_id,
            entity_count,
            events: self.events,
        }
    }
}

/// Documents of random events over a few entities; entity-less arguments and
/// prepositional roles are mixed in.
pub fn random_corpus(config: &SynthConfig, n_docs: usize, seed: u64) -> Vec<DocumentRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..config.entities)
        .map(|i| ((i + 1) as f64).powf(-config.salience))
        .collect();
    let pick_entity = WeightedIndex::new(&weights).expect("at least one entity");
    (0..n_docs)
        .map(|d| {
            let heads: Vec<String> = (0..config.entities)
                .map(|_| format!("n{}", rng.random_range(0..config.lemmas)))
                .collect();
            let n_events = rng.random_range(config.min_events..=config.max_events);
            let mut doc = DocBuilder::new();
            for _ in 0..n_events {
                let pred = format!("v{}", rng.random_range(0..config.predicates));
                let mut roles = vec![Role::Subj];
                if rng.random_bool(config.dobj_prob) {
                    roles.push(Role::Dobj);
                }
                if rng.random_bool(config.prep_prob) {
                    let p = PREPOSITIONS[rng.random_range(0..PREPOSITIONS.len())];
                    roles.push(Role::Prep(p.into()));
                }
                let args = roles
                    .into_iter()
                    .map(|role| {
                        if rng.random_bool(config.entity_prob) {
                            let e = pick_entity.sample(&mut rng);
                            (role, heads[e].clone(), Some(e))
                        } else {
                            (role, format!("n{}", rng.random_range(0..config.lemmas)), None)
                        }
                    })
                    .collect();
                doc.event(&pred, args);
            }
            doc.finish(format!("synth-{seed}-{d}"), config.entities)
        })
        .collect()
}

/// Shape of [`planted_multi_arg_corpus`] documents.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConfig {
    /// Number of `pair` events, each linking a subject to an object entity.
    pub pairs: usize,
    /// Distinct entity lemmas available; must be at least `2 * pairs`.
    pub lemmas: usize,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig { pairs: 4, lemmas: 12 }
    }
}

/// Documents `pair a_k b_k` (k < pairs) with one `lead a_c` inserted at a
/// random position, closed by `follow a_c b_c`. The closing event has two
/// qualifying arguments; its object is determined only through the subject
/// chosen by `lead`.
pub fn planted_multi_arg_corpus(config: &PlantedConfig, n_docs: usize, seed: u64) -> Vec<DocumentRecord> {
    assert!(config.lemmas >= 2 * config.pairs && config.pairs >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|d| {
            let lemmas = rand::seq::index::sample(&mut rng, config.lemmas, 2 * config.pairs).into_vec();
            let name = |e: usize| format!("x{}", lemmas[e]);
            // entity 2k is the subject of pair k, 2k + 1 its object
            let chosen = rng.random_range(0..config.pairs);
            let lead_at = rng.random_range(0..=config.pairs);
            let mut doc = DocBuilder::new();
            for k in 0..=config.pairs {
                if k == lead_at {
                    doc.event("lead", vec![(Role::Subj, name(2 * chosen), Some(2 * chosen))]);
                }
                if k < config.pairs {
                    doc.event(
                        "pair",
                        vec![
                            (Role::Subj, name(2 * k), Some(2 * k)),
                            (Role::Dobj, name(2 * k + 1), Some(2 * k + 1)),
                        ],
                    );
                }
            }
            doc.event(
                "follow",
                vec![
                    (Role::Subj, name(2 * chosen), Some(2 * chosen)),
                    (Role::Dobj, name(2 * chosen + 1), Some(2 * chosen + 1)),
                ],
            );
            doc.finish(format!("planted-{seed}-{d}"), 2 * config.pairs)
        })
        .collect()
}

/// Documents of `pair a_k b_k` events closed by `follow a_c b_c`, where the
/// chosen pair's heads come from a separate `m{i}` lemma pool. The removed
/// entities are recognizable from their own tokens, so no chaining is needed
/// to locate them.
pub fn planted_marked_pair_corpus(config: &PlantedConfig, n_docs: usize, seed: u64) -> Vec<DocumentRecord> {
    assert!(config.lemmas >= 2 * config.pairs && config.pairs >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|d| {
            let plain = rand::seq::index::sample(&mut rng, config.lemmas, 2 * config.pairs).into_vec();
            let marked = rand::seq::index::sample(&mut rng, config.lemmas, 2).into_vec();
            let chosen = rng.random_range(0..config.pairs);
            let name = |e: usize| {
                if e / 2 == chosen {
                    format!("m{}", marked[e % 2])
                } else {
                    format!("x{}", plain[e])
                }
            };
            let mut doc = DocBuilder::new();
            for k in 0..config.pairs {
                doc.event(
                    "pair",
                    vec![
                        (Role::Subj, name(2 * k), Some(2 * k)),
                        (Role::Dobj, name(2 * k + 1), Some(2 * k + 1)),
                    ],
                );
            }
            doc.event(
                "follow",
                vec![
                    (Role::Subj, name(2 * chosen), Some(2 * chosen)),
                    (Role::Dobj, name(2 * chosen + 1), Some(2 * chosen + 1)),
                ],
            );
            doc.finish(format!("marked-{seed}-{d}"), 2 * config.pairs)
        })
        .collect()
}

/// Random documents whose entities follow a steep salience profile, so the
/// most mentioned entity is usually the one being asked about.
pub fn planted_frequency_corpus(n_docs: usize, seed: u64) -> Vec<DocumentRecord> {
    let config = SynthConfig {
        min_events: 6,
        max_events: 14,
        entities: 6,
        entity_prob: 0.9,
        salience: 1.5,
        ..Default::default()
    };
    random_corpus(&config, n_docs, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clozegen::{generate_instances, generate_multi_arg_instances};

    #[test]
    fn corpora_validate_and_are_seeded() {
        let a = random_corpus(&SynthConfig::default(), 20, 3);
        assert_eq!(a, random_corpus(&SynthConfig::default(), 20, 3));
        assert_ne!(a, random_corpus(&SynthConfig::default(), 20, 4));
        for doc in a.iter().chain(&planted_multi_arg_corpus(&PlantedConfig::default(), 20, 1)) {
            doc.validate().unwrap();
        }
        for doc in planted_frequency_corpus(20, 2)
            .into_iter()
            .chain(planted_marked_pair_corpus(&PlantedConfig::default(), 20, 3))
        {
            doc.validate().unwrap();
        }
    }

    #[test]
    fn planted_documents_yield_two_multi_arg_queries() {
        for doc in planted_multi_arg_corpus(&PlantedConfig::default(), 30, 5) {
            let multi = generate_multi_arg_instances(&doc);
            assert_eq!(multi.len(), 2);
            assert!(multi.iter().all(|i| i.meta.event_index == doc.events.len() - 1));
            let object = multi.iter().find(|i| i.meta.target_role == Role::Dobj).unwrap();
            // the object is mentioned once, in its pair event
            assert_eq!(object.answer_positions.len(), 1);
            assert!(generate_instances(&doc).len() >= 2);
        }
    }

    #[test]
    fn marked_pair_supervision_covers_only_marked_mentions() {
        for doc in planted_marked_pair_corpus(&PlantedConfig::default(), 30, 6) {
            let multi = generate_multi_arg_instances(&doc);
            assert_eq!(multi.len(), 2);
            let sup = multi[0].supervision.as_ref().unwrap();
            assert_eq!(sup.len(), 2);
            assert!(sup.iter().all(|&p| multi[0].doc_tokens[p].surface.starts_with('m')));
        }
    }
}
