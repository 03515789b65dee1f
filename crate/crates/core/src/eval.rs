//! Accuracy of trained readers and baselines, accuracy by answer frequency,
//! and attention-trace export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clozegen::ClozeInstance;
use crate::error::{ParError, Result};
use crate::exec::Executor;
use crate::model::{AttentionTrace, ParModel};

/// Instances with at least this many preceding answer mentions share the
/// last frequency bucket.
pub const FREQUENCY_CAP: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    /// `"1"` .. `"9"`, then `"10+"`.
    pub bucket: String,
    pub n: usize,
    pub correct: usize,
    /// Absent for empty buckets.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    /// Chosen document position; absent when the instance could not be scored.
    pub pointer: Option<usize>,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub n: usize,
    pub correct: usize,
    /// Absent when `n == 0`.
    pub accuracy: Option<f64>,
    /// Closed-form expectation, reported by the random baseline.
    pub expected_accuracy: Option<f64>,
    /// Instances that could not be scored; they count as incorrect.
    pub skipped: usize,
    pub by_frequency: Vec<BucketStat>,
    /// Outcome per input instance, in input order (also the trace line order).
    pub per_instance: Vec<InstanceOutcome>,
}

impl EvalReport {
    fn from_outcomes(method: &str, instances: &[ClozeInstance], per_instance: Vec<InstanceOutcome>) -> Self {
        let n = per_instance.len();
        let correct = per_instance.iter().filter(|o| o.correct).count();
        let flags: Vec<bool> = per_instance.iter().map(|o| o.correct).collect();
        EvalReport {
            method: method.to_string(),
            n,
            correct,
            accuracy: (n > 0).then(|| correct as f64 / n as f64),
            expected_accuracy: None,
            skipped: per_instance.iter().filter(|o| o.pointer.is_none()).count(),
            by_frequency: frequency_breakdown(instances, &flags),
            per_instance,
        }
    }
}

fn outcome(inst: &ClozeInstance, pointer: Option<usize>) -> InstanceOutcome {
    InstanceOutcome {
        pointer,
        correct: pointer.is_some_and(|p| inst.is_answer(p)),
    }
}

fn model_outcomes(
    model: &ParModel,
    instances: &[ClozeInstance],
    exec: &Executor,
) -> Vec<(InstanceOutcome, Option<AttentionTrace>)> {
    exec.map(instances, |i, inst| match model.predict(inst) {
        Ok((pointer, trace)) => (outcome(inst, Some(pointer)), Some(trace)),
        Err(e) => {
            log::warn!("instance {i} not scored: {e}");
            (outcome(inst, None), None)
        }
    })
}

/// Accuracy of `model` with dropout disabled: an instance is correct iff the
/// pointer lands on an answer position.
pub fn evaluate(model: &ParModel, instances: &[ClozeInstance], exec: &Executor) -> EvalReport {
    let outcomes = model_outcomes(model, instances, exec).into_iter().map(|o| o.0).collect();
    EvalReport::from_outcomes("par", instances, outcomes)
}

/// Uniform choice among the candidates of each instance.
pub fn baseline_random(instances: &[ClozeInstance], seed: u64) -> EvalReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcomes = instances
        .iter()
        .map(|inst| {
            let c = &inst.candidate_positions;
            let pointer = (!c.is_empty()).then(|| c[rng.random_range(0..c.len())]);
            outcome(inst, pointer)
        })
        .collect();
    let mut report = EvalReport::from_outcomes("random", instances, outcomes);
    report.expected_accuracy = expected_random_accuracy(instances);
    report
}

/// `mean(|answers| / |candidates|)`.
pub fn expected_random_accuracy(instances: &[ClozeInstance]) -> Option<f64> {
    let rates: Vec<f64> = instances
        .iter()
        .filter(|i| !i.candidate_positions.is_empty())
        .map(|i| i.answer_positions.len() as f64 / i.candidate_positions.len() as f64)
        .collect();
    (!instances.is_empty()).then(|| rates.iter().sum::<f64>() / instances.len() as f64)
}

/// Position chosen by the most-frequent-entity rule: the largest group of
/// candidates sharing an entity (entity-less candidates are singletons);
/// ties go to the group mentioned most recently; the group's latest mention
/// is returned.
pub fn most_freq_choice(inst: &ClozeInstance) -> Option<usize> {
    // key -> (size, latest position)
    let mut groups: BTreeMap<(bool, usize), (usize, usize)> = BTreeMap::new();
    for &p in &inst.candidate_positions {
        let key = match inst.doc_tokens[p].entity_id {
            Some(e) => (true, e),
            None => (false, p),
        };
        let g = groups.entry(key).or_insert((0, p));
        g.0 += 1;
        g.1 = g.1.max(p);
    }
    groups.values().max().map(|&(_, latest)| latest)
}

pub fn baseline_most_freq(instances: &[ClozeInstance]) -> EvalReport {
    let outcomes = instances.iter().map(|i| outcome(i, most_freq_choice(i))).collect();
    EvalReport::from_outcomes("mostfreq", instances, outcomes)
}

fn bucket_index(answers: usize) -> usize {
    answers.clamp(1, FREQUENCY_CAP) - 1
}

fn bucket_label(index: usize) -> String {
    if index + 1 == FREQUENCY_CAP {
        format!("{FREQUENCY_CAP}+")
    } else {
        (index + 1).to_string()
    }
}

/// Accuracy grouped by the number of preceding answer mentions.
pub fn frequency_breakdown(instances: &[ClozeInstance], correct: &[bool]) -> Vec<BucketStat> {
    let mut counts = vec![(0usize, 0usize); FREQUENCY_CAP];
    for (inst, &ok) in instances.iter().zip(correct) {
        let b = &mut counts[bucket_index(inst.answer_positions.len())];
        b.0 += 1;
        b.1 += usize::from(ok);
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, (n, c))| BucketStat {
            bucket: bucket_label(i),
            n,
            correct: c,
            accuracy: (n > 0).then(|| c as f64 / n as f64),
        })
        .collect()
}

/// `bucket,n,accuracy` rows; empty buckets leave accuracy blank.
pub fn write_breakdown_csv(path: &Path, buckets: &[BucketStat]) -> Result<()> {
    let mut text = String::from("bucket,n,accuracy\n");
    for b in buckets {
        let acc = b.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        text.push_str(&format!("{},{},{acc}\n", b.bucket, b.n));
    }
    std::fs::write(path, text).map_err(|e| ParError::io(path, e))
}

/// One line of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    pub doc_id: String,
    pub event_index: usize,
    pub doc: Vec<String>,
    pub query: Vec<String>,
    /// Attention over document positions, first hop first.
    pub attention: Vec<Vec<f64>>,
    pub answers: Vec<usize>,
    pub pointer: usize,
}

/// Evaluates `model` and writes one [`TraceRecord`] per scored instance.
pub fn export_traces(model: &ParModel, instances: &[ClozeInstance], path: &Path, exec: &Executor) -> Result<EvalReport> {
    let results = model_outcomes(model, instances, exec);
    let file = File::create(path).map_err(|e| ParError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (index, (inst, (_, trace))) in instances.iter().zip(&results).enumerate() {
        let Some(trace) = trace else { continue };
        let record = TraceRecord {
            index,
            doc_id: inst.meta.doc_id.clone(),
            event_index: inst.meta.event_index,
            doc: inst.doc_tokens.iter().map(|t| t.surface.clone()).collect(),
            query: inst.query_tokens.iter().map(|t| t.surface.clone()).collect(),
            attention: trace.hops.iter().map(|h| h.probs.clone()).collect(),
            answers: inst.answer_positions.clone(),
            pointer: trace.pointer,
        };
        serde_json::to_writer(&mut out, &record).expect("trace serializes");
        out.write_all(b"\n").map_err(|e| ParError::io(path, e))?;
    }
    out.flush().map_err(|e| ParError::io(path, e))?;
    let outcomes = results.into_iter().map(|r| r.0).collect();
    Ok(EvalReport::from_outcomes("par", instances, outcomes))
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| ParError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| ParError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
