//! Argument-cloze instance generation: each coreferent argument of an event
//! becomes a query whose answer must be found among the argument mentions of
//! the preceding events.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{event_to_tokens, DocumentRecord, EventToken, Role, TokenKind};
use crate::error::{ParError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceMeta {
    pub doc_id: String,
    pub event_index: usize,
    /// Entity of the removed target argument.
    pub entity_id: usize,
    pub target_role: Role,
    /// Co-missing roles replaced by `MISSING-<role>` (multi-argument queries).
    #[serde(default)]
    pub missing_roles: Vec<Role>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClozeInstance {
    pub doc_tokens: Vec<EventToken>,
    pub query_tokens: Vec<EventToken>,
    /// Sorted indices into `doc_tokens` mentioning the removed entity.
    pub answer_positions: Vec<usize>,
    /// Sorted indices of every argument token in `doc_tokens`.
    pub candidate_positions: Vec<usize>,
    /// Mentions of every removed entity, for first-hop supervision.
    pub supervision: Option<Vec<usize>>,
    pub meta: InstanceMeta,
}

impl ClozeInstance {
    pub fn target_role(&self) -> &Role {
        &self.meta.target_role
    }

    pub fn is_answer(&self, position: usize) -> bool {
        self.answer_positions.binary_search(&position).is_ok()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let arg_positions: Vec<usize> = self
            .doc_tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.kind == TokenKind::Argument)
            .map(|(i, _)| i)
            .collect();
        if arg_positions != self.candidate_positions {
            return Err("candidates must be exactly the argument positions of the document".into());
        }
        if self.answer_positions.is_empty() {
            return Err("no answer positions".into());
        }
        if !self.answer_positions.windows(2).all(|w| w[0] < w[1]) {
            return Err("answer positions must be sorted and unique".into());
        }
        for &p in &self.answer_positions {
            if p >= self.doc_tokens.len() || self.doc_tokens[p].kind != TokenKind::Argument {
                return Err(format!("answer position {p} is not a candidate"));
            }
            if self.doc_tokens[p].entity_id != Some(self.meta.entity_id) {
                return Err(format!("answer position {p} does not mention the removed entity"));
            }
        }
        let targets = self
            .query_tokens
            .iter()
            .filter(|t| t.kind == TokenKind::PlaceholderTarget)
            .count();
        if targets != 1 {
            return Err(format!("query has {targets} target placeholders, expected 1"));
        }
        if let Some(sup) = &self.supervision {
            if sup.is_empty() {
                return Err("empty supervision set".into());
            }
            if let Some(p) = sup.iter().find(|p| self.candidate_positions.binary_search(p).is_err()) {
                return Err(format!("supervision position {p} is not a candidate"));
            }
        }
        Ok(())
    }
}

/// Tokens of all events in `doc` before `event_index`, concatenated.
fn prefix_tokens(doc: &DocumentRecord, event_index: usize) -> Vec<EventToken> {
    doc.events[..event_index]
        .iter()
        .flat_map(event_to_tokens)
        .collect()
}

fn mentions_of(tokens: &[EventToken], entity: usize) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind == TokenKind::Argument && t.entity_id == Some(entity))
        .map(|(i, _)| i)
        .collect()
}

fn argument_positions(tokens: &[EventToken]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind == TokenKind::Argument)
        .map(|(i, _)| i)
        .collect()
}

/// Indices (into the event's args) of arguments whose entity is mentioned
/// by some argument of a preceding event.
fn qualifying_args(doc: &DocumentRecord, event_index: usize, prefix: &[EventToken]) -> Vec<usize> {
    doc.events[event_index]
        .args
        .iter()
        .enumerate()
        .filter(|(_, a)| a.entity_id.is_some_and(|e| !mentions_of(prefix, e).is_empty()))
        .map(|(i, _)| i)
        .collect()
}

/// One instance per qualifying (event, argument) pair, in event then
/// canonical-role order.
pub fn generate_instances(doc: &DocumentRecord) -> Vec<ClozeInstance> {
    let mut out = Vec::new();
    for event_index in 1..doc.events.len() {
        let prefix = prefix_tokens(doc, event_index);
        let candidates = argument_positions(&prefix);
        let event = &doc.events[event_index];
        for ai in qualifying_args(doc, event_index, &prefix) {
            let arg = &event.args[ai];
            let entity = arg.entity_id.expect("qualifying args have entities");
            let mut query = event_to_tokens(event);
            query[ai + 1] = EventToken::target(&arg.role);
            out.push(ClozeInstance {
                doc_tokens: prefix.clone(),
                query_tokens: query,
                answer_positions: mentions_of(&prefix, entity),
                candidate_positions: candidates.clone(),
                supervision: None,
                meta: InstanceMeta {
                    doc_id: doc.doc_id.clone(),
                    event_index,
                    entity_id: entity,
                    target_role: arg.role.clone(),
                    missing_roles: Vec::new(),
                },
            });
        }
    }
    out
}

/// For events with two or more qualifying arguments: one instance per
/// qualifying argument, with every other qualifying argument replaced by a
/// `MISSING-<role>` placeholder.
pub fn generate_multi_arg_instances(doc: &DocumentRecord) -> Vec<ClozeInstance> {
    let mut out = Vec::new();
    for event_index in 1..doc.events.len() {
        let prefix = prefix_tokens(doc, event_index);
        let qualifying = qualifying_args(doc, event_index, &prefix);
        if qualifying.len() < 2 {
            continue;
        }
        let candidates = argument_positions(&prefix);
        let event = &doc.events[event_index];
        let supervision: Vec<usize> = qualifying
            .iter()
            .flat_map(|&ai| mentions_of(&prefix, event.args[ai].entity_id.unwrap()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        for &target in &qualifying {
            let arg = &event.args[target];
            let entity = arg.entity_id.unwrap();
            let mut query = event_to_tokens(event);
            let mut missing_roles = Vec::new();
            for &ai in &qualifying {
                let role = &event.args[ai].role;
                if ai == target {
                    query[ai + 1] = EventToken::target(role);
                } else {
                    query[ai + 1] = EventToken::missing(role);
                    missing_roles.push(role.clone());
                }
            }
            out.push(ClozeInstance {
                doc_tokens: prefix.clone(),
                query_tokens: query,
                answer_positions: mentions_of(&prefix, entity),
                candidate_positions: candidates.clone(),
                supervision: Some(supervision.clone()),
                meta: InstanceMeta {
                    doc_id: doc.doc_id.clone(),
                    event_index,
                    entity_id: entity,
                    target_role: arg.role.clone(),
                    missing_roles,
                },
            });
        }
    }
    out
}

/// Keep probability for a predicate seen `count` times.
pub fn keep_probability(count: usize, threshold: usize) -> f64 {
    if count <= threshold {
        1.0
    } else {
        (threshold as f64 / count as f64).sqrt()
    }
}

/// Drops events of frequent predicates (count above `threshold`), keeping
/// each independently with probability `sqrt(threshold / count)`.
pub fn downsample_verbs(
    corpus: &[DocumentRecord],
    threshold: usize,
    seed: u64,
) -> Vec<DocumentRecord> {
    assert!(threshold > 0, "downsampling threshold must be positive");
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for event in corpus.iter().flat_map(|d| &d.events) {
        *counts.entry(event.predicate_lemma.as_str()).or_default() += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .iter()
        .map(|doc| {
            let events = doc
                .events
                .iter()
                .filter(|e| {
                    let p = keep_probability(counts[e.predicate_lemma.as_str()], threshold);
                    p >= 1.0 || rng.random::<f64>() < p
                })
                .cloned()
                .collect();
            DocumentRecord {
                doc_id: doc.doc_id.clone(),
                entity_count: doc.entity_count,
                events,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub instances: usize,
    pub avg_candidates: Option<f64>,
    pub avg_correct: Option<f64>,
}

pub fn dataset_stats(instances: &[ClozeInstance]) -> DatasetStats {
    let n = instances.len();
    let mean = |f: &dyn Fn(&ClozeInstance) -> usize| {
        (n > 0).then(|| instances.iter().map(f).sum::<usize>() as f64 / n as f64)
    };
    DatasetStats {
        instances: n,
        avg_candidates: mean(&|i| i.candidate_positions.len()),
        avg_correct: mean(&|i| i.answer_positions.len()),
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        writeln!(f, "# test cases        {}", self.instances)?;
        writeln!(f, "Avg # candidates    {}", show(self.avg_candidates))?;
        write!(f, "Avg # correct       {}", show(self.avg_correct))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenRecord {
    s: String,
    k: TokenKind,
    e: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    doc: Vec<TokenRecord>,
    query: Vec<TokenRecord>,
    answers: Vec<usize>,
    candidates: Vec<usize>,
    supervision: Option<Vec<usize>>,
    meta: InstanceMeta,
}

impl From<&EventToken> for TokenRecord {
    fn from(t: &EventToken) -> Self {
        TokenRecord {
            s: t.surface.clone(),
            k: t.kind,
            e: t.entity_id,
        }
    }
}

impl TryFrom<TokenRecord> for EventToken {
    type Error = String;

    fn try_from(t: TokenRecord) -> std::result::Result<Self, String> {
        let role = match t.k {
            TokenKind::Predicate => None,
            _ => {
                let (_, role) = t
                    .s
                    .rsplit_once('-')
                    .ok_or_else(|| format!("token {:?} has no role suffix", t.s))?;
                Some(role.parse::<Role>()?)
            }
        };
        if t.e.is_some() && t.k != TokenKind::Argument {
            return Err(format!("non-argument token {:?} carries an entity", t.s));
        }
        Ok(EventToken {
            surface: t.s,
            kind: t.k,
            role,
            entity_id: t.e,
            mention_id: None,
        })
    }
}

pub fn instance_to_json(inst: &ClozeInstance) -> String {
    let record = InstanceRecord {
        doc: inst.doc_tokens.iter().map(TokenRecord::from).collect(),
        query: inst.query_tokens.iter().map(TokenRecord::from).collect(),
        answers: inst.answer_positions.clone(),
        candidates: inst.candidate_positions.clone(),
        supervision: inst.supervision.clone(),
        meta: inst.meta.clone(),
    };
    serde_json::to_string(&record).expect("instance serializes")
}

pub fn instance_from_json(line: &str, line_no: usize) -> Result<ClozeInstance> {
    let record: InstanceRecord = serde_json::from_str(line).map_err(|e| ParError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let convert = |tokens: Vec<TokenRecord>| {
        tokens
            .into_iter()
            .map(EventToken::try_from)
            .collect::<std::result::Result<Vec<_>, _>>()
    };
    let invalid = |message: String| ParError::Validation { line: line_no, message };
    let inst = ClozeInstance {
        doc_tokens: convert(record.doc).map_err(invalid)?,
        query_tokens: convert(record.query).map_err(invalid)?,
        answer_positions: record.answers,
        candidate_positions: record.candidates,
        supervision: record.supervision,
        meta: record.meta,
    };
    inst.validate().map_err(invalid)?;
    Ok(inst)
}

pub fn write_instances(path: &Path, instances: &[ClozeInstance]) -> Result<()> {
    let file = File::create(path).map_err(|e| ParError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for inst in instances {
        writeln!(out, "{}", instance_to_json(inst)).map_err(|e| ParError::io(path, e))?;
    }
    out.flush().map_err(|e| ParError::io(path, e))
}

pub fn read_instances(path: &Path) -> Result<Vec<ClozeInstance>> {
    let file = File::open(path).map_err(|e| ParError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ParError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(instance_from_json(&line, i + 1)?);
    }
    Ok(out)
}
