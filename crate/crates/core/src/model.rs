//! The Pointer Attentive Reader: a shared embedding layer, BiGRU document and
//! query encoders, additive pointer attention over argument mentions and an
//! optional first hop that refines the query vector.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clozegen::ClozeInstance;
use crate::corpus::{TokenKind, Vocabulary};
use crate::error::{ParError, Result};
use crate::tensor::{GruCellParams, Gradients, ParamId, ParamStore, Tape, Tensor, Var};

/// Range of the uniform embedding initialization.
pub const EMBEDDING_INIT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParConfig {
    pub embedding_dim: usize,
    /// Per direction; document and query vectors have `2 * hidden_dim` entries.
    pub hidden_dim: usize,
    /// Rows of the attention projection; `None` means `2 * hidden_dim`.
    pub attention_dim: Option<usize>,
    pub num_hops: usize,
    pub dropout_rate: f64,
    /// Weight of the first-hop KL term (two-hop models with supervision only).
    pub kl_weight: f64,
}

impl Default for ParConfig {
    fn default() -> Self {
        ParConfig {
            embedding_dim: 32,
            hidden_dim: 32,
            attention_dim: None,
            num_hops: 1,
            dropout_rate: 0.2,
            kl_weight: 1.0,
        }
    }
}

impl ParConfig {
    pub fn attention_dim(&self) -> usize {
        self.attention_dim.unwrap_or(2 * self.hidden_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ParError::Config(m.to_string()));
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.attention_dim == Some(0) {
            return bad("model dimensions must be at least 1");
        }
        if !matches!(self.num_hops, 1 | 2) {
            return bad("num_hops must be 1 or 2");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if !(self.kl_weight >= 0.0) || !self.kl_weight.is_finite() {
            return bad("kl_weight must be a non-negative number");
        }
        Ok(())
    }
}

/// `s_t = v . tanh(W [d_t; q])`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w: ParamId,
    pub v: ParamId,
}

impl AttentionParams {
    fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        attention_dim: usize,
        input_dim: usize,
        rng: &mut R,
    ) -> Self {
        let kw = (6.0 / (attention_dim + input_dim) as f64).sqrt();
        let w = (0..attention_dim * input_dim)
            .map(|_| rng.random_range(-kw..kw))
            .collect();
        let kv = (6.0 / (attention_dim + 1) as f64).sqrt();
        let v = (0..attention_dim).map(|_| rng.random_range(-kv..kv)).collect();
        AttentionParams {
            w: store.add(format!("{prefix}.w"), Tensor::matrix(attention_dim, input_dim, w).unwrap()),
            v: store.add(format!("{prefix}.v"), Tensor::vector(v)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParParams {
    pub store: ParamStore,
    pub embedding: ParamId,
    pub doc_fwd: GruCellParams,
    pub doc_bwd: GruCellParams,
    pub query_fwd: GruCellParams,
    pub query_bwd: GruCellParams,
    /// Final-hop attention.
    pub attn: AttentionParams,
    /// First-hop attention, present iff `num_hops == 2`.
    pub hop: Option<AttentionParams>,
}

impl ParParams {
    /// Random initialization; embedding rows of placeholder tokens start at zero.
    pub fn init<R: Rng + ?Sized>(config: &ParConfig, vocab: &Vocabulary, rng: &mut R) -> Self {
        let (e, h, a) = (config.embedding_dim, config.hidden_dim, config.attention_dim());
        let mut store = ParamStore::new();
        let mut emb: Vec<f64> = (0..vocab.len() * e)
            .map(|_| rng.random_range(-EMBEDDING_INIT..EMBEDDING_INIT))
            .collect();
        for id in vocab.placeholder_ids() {
            emb[id * e..(id + 1) * e].fill(0.0);
        }
        let embedding = store.add("embedding", Tensor::matrix(vocab.len(), e, emb).unwrap());
        let doc_fwd = GruCellParams::init(&mut store, "doc.fwd", e, h, rng);
        let doc_bwd = GruCellParams::init(&mut store, "doc.bwd", e, h, rng);
        let query_fwd = GruCellParams::init(&mut store, "query.fwd", e, h, rng);
        let query_bwd = GruCellParams::init(&mut store, "query.bwd", e, h, rng);
        let attn = AttentionParams::init(&mut store, "attn", a, 4 * h, rng);
        let hop = (config.num_hops == 2).then(|| AttentionParams::init(&mut store, "hop", a, 4 * h, rng));
        ParParams {
            store,
            embedding,
            doc_fwd,
            doc_bwd,
            query_fwd,
            query_bwd,
            attn,
            hop,
        }
    }

    /// Overwrites every parameter from named arrays, which must match the
    /// current names and shapes exactly.
    pub fn load_values(&mut self, arrays: Vec<(String, Tensor)>) -> Result<()> {
        if arrays.len() != self.store.len() {
            return Err(ParError::Config(format!(
                "checkpoint has {} arrays, model expects {}",
                arrays.len(),
                self.store.len()
            )));
        }
        for (name, tensor) in arrays {
            let id = self
                .store
                .id_of(&name)
                .ok_or_else(|| ParError::Config(format!("unexpected array {name}")))?;
            let current = self.store.get(id);
            if current.shape() != tensor.shape() {
                return Err(ParError::dim("load_values", current.shape(), tensor.shape()));
            }
            *self.store.get_mut(id) = tensor;
        }
        Ok(())
    }
}

/// An instance mapped to vocabulary indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInstance {
    pub doc_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
    pub candidate_mask: Vec<bool>,
    pub candidates: Vec<usize>,
    pub answers: Vec<usize>,
    pub supervision: Option<Vec<usize>>,
}

impl EncodedInstance {
    pub fn new(vocab: &Vocabulary, inst: &ClozeInstance) -> Result<Self> {
        let targets = inst
            .query_tokens
            .iter()
            .filter(|t| t.kind == TokenKind::PlaceholderTarget)
            .count();
        if targets != 1 {
            return Err(ParError::Contract(format!(
                "query must contain exactly one target placeholder, found {targets}"
            )));
        }
        let candidate_mask: Vec<bool> = inst
            .doc_tokens
            .iter()
            .map(|t| t.kind == TokenKind::Argument)
            .collect();
        let candidates: Vec<usize> = (0..candidate_mask.len()).filter(|&i| candidate_mask[i]).collect();
        if candidates.is_empty() {
            return Err(ParError::InstanceSkip(format!(
                "document of {}/{} has no argument tokens",
                inst.meta.doc_id, inst.meta.event_index
            )));
        }
        if inst.answer_positions.is_empty()
            || inst.answer_positions.iter().any(|&p| !candidate_mask.get(p).copied().unwrap_or(false))
        {
            return Err(ParError::Contract("answers must be a non-empty subset of the candidates".into()));
        }
        if let Some(sup) = &inst.supervision {
            if sup.is_empty() || sup.iter().any(|&p| !candidate_mask.get(p).copied().unwrap_or(false)) {
                return Err(ParError::Contract("supervision must be a non-empty subset of the candidates".into()));
            }
        }
        Ok(EncodedInstance {
            doc_ids: inst.doc_tokens.iter().map(|t| vocab.lookup(&t.surface)).collect(),
            query_ids: inst.query_tokens.iter().map(|t| vocab.lookup(&t.surface)).collect(),
            candidate_mask,
            candidates,
            answers: inst.answer_positions.clone(),
            supervision: inst.supervision.clone(),
        })
    }
}

fn embed(
    tape: &mut Tape<'_>,
    params: &ParParams,
    config: &ParConfig,
    ids: &[usize],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Var>> {
    ids.iter()
        .map(|&id| {
            let x = tape.row(params.embedding, id)?;
            Ok(match rng.as_deref_mut() {
                Some(r) => tape.dropout(x, config.dropout_rate, true, r),
                None => x,
            })
        })
        .collect()
}

/// Runs the document BiGRU and returns `(position, [fwd_t; bwd_t])` for every
/// candidate position. Non-candidate tokens are still consumed by the GRUs.
pub fn encode_document(
    tape: &mut Tape<'_>,
    params: &ParParams,
    config: &ParConfig,
    doc_ids: &[usize],
    candidate_mask: &[bool],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<(usize, Var)>> {
    if doc_ids.len() != candidate_mask.len() {
        return Err(ParError::dim("encode_document", &[doc_ids.len()], &[candidate_mask.len()]));
    }
    if !candidate_mask.iter().any(|&m| m) {
        return Err(ParError::InstanceSkip("document has no argument tokens".into()));
    }
    let xs = embed(tape, params, config, doc_ids, rng)?;
    let fwd = params.doc_fwd.run(tape, &xs)?;
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let mut bwd = params.doc_bwd.run(tape, &rev)?;
    bwd.reverse();
    Ok((0..xs.len())
        .filter(|&t| candidate_mask[t])
        .map(|t| (t, tape.concat(&[fwd[t], bwd[t]])))
        .collect())
}

/// `q = [forward state after the last token; backward state after the first]`.
pub fn encode_query(
    tape: &mut Tape<'_>,
    params: &ParParams,
    config: &ParConfig,
    query_ids: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if query_ids.is_empty() {
        return Err(ParError::Contract("empty query".into()));
    }
    let xs = embed(tape, params, config, query_ids, rng)?;
    let fwd = params.query_fwd.run(tape, &xs)?;
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let bwd = params.query_bwd.run(tape, &rev)?;
    Ok(tape.concat(&[*fwd.last().unwrap(), *bwd.last().unwrap()]))
}

/// Scores every candidate against `q` and normalizes over the candidates.
/// Both returned vectors span all `doc_len` positions; non-candidate scores
/// are recorded as 0 and their probabilities are exactly 0.
pub fn attend(
    tape: &mut Tape<'_>,
    d: &[(usize, Var)],
    q: Var,
    attn: &AttentionParams,
    doc_len: usize,
) -> Result<(Var, Var)> {
    let zero = tape.constant(vec![0.0]);
    let mut parts = vec![zero; doc_len];
    let mut mask = vec![false; doc_len];
    for &(pos, dt) in d {
        let x = tape.concat(&[dt, q]);
        let h = tape.linear(attn.w, x, None)?;
        let h = tape.tanh(h);
        parts[pos] = tape.dot_param(h, attn.v)?;
        mask[pos] = true;
    }
    let scores = tape.concat(&parts);
    let probs = tape.masked_softmax(scores, &mask)?;
    Ok((scores, probs))
}

pub struct HopOutput {
    pub scores: Var,
    pub probs: Var,
    pub q1: Var,
}

/// First hop: `o_1 = sum_t a'_t d_t`, `q_1 = o_1 + q`.
pub fn hop_update(
    tape: &mut Tape<'_>,
    d: &[(usize, Var)],
    q: Var,
    hop: &AttentionParams,
    doc_len: usize,
) -> Result<HopOutput> {
    let (scores, probs) = attend(tape, d, q, hop, doc_len)?;
    let o1 = tape.weighted_sum(probs, d)?;
    let q1 = tape.add(o1, q)?;
    Ok(HopOutput { scores, probs, q1 })
}

/// Index with the largest value among `positions` (lowest index on ties).
fn argmax_over(values: &[f64], positions: &[usize]) -> Option<usize> {
    positions
        .iter()
        .copied()
        .fold(None, |best: Option<usize>, p| match best {
            Some(b) if values[b] >= values[p] => Some(b),
            _ => Some(p),
        })
}

/// `-log max_{i in answers} a_i`; the gradient flows through the maximizing
/// entry only.
pub fn loss_max_correct(tape: &mut Tape<'_>, probs: Var, answers: &[usize]) -> Result<Var> {
    let values = tape.value(probs);
    if answers.iter().any(|&p| p >= values.len()) {
        return Err(ParError::Contract("answer position out of range".into()));
    }
    let best = argmax_over(values, answers)
        .ok_or_else(|| ParError::Contract("empty answer set".into()))?;
    if values[best] <= 0.0 {
        return Err(ParError::Contract("answers lie outside the candidate support".into()));
    }
    Ok(tape.neg_log(probs, best))
}

/// `KL(p || a)` where `p` puts `1/k` on each of the `k` supervised positions.
pub fn loss_extra_supervision(tape: &mut Tape<'_>, probs: Var, supervision: &[usize]) -> Result<Var> {
    let values = tape.value(probs);
    if supervision.is_empty() {
        return Err(ParError::Contract("empty supervision set".into()));
    }
    if supervision.iter().any(|&p| p >= values.len() || values[p] <= 0.0) {
        return Err(ParError::Contract("supervision outside the candidate support".into()));
    }
    let k = supervision.len() as f64;
    let target: Vec<(usize, f64)> = supervision.iter().map(|&p| (p, 1.0 / k)).collect();
    Ok(tape.kl_from_target(probs, &target))
}

/// Variables of one forward pass.
pub struct Forward<'p> {
    pub tape: Tape<'p>,
    pub candidates: Vec<(usize, Var)>,
    pub q: Var,
    pub first_hop: Option<HopOutput>,
    pub scores: Var,
    pub probs: Var,
}

/// Full forward pass. Dropout is active iff `rng` is given.
pub fn forward<'p>(
    params: &'p ParParams,
    config: &ParConfig,
    inst: &EncodedInstance,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward<'p>> {
    let mut tape = Tape::new(&params.store);
    let d = encode_document(
        &mut tape,
        params,
        config,
        &inst.doc_ids,
        &inst.candidate_mask,
        rng.as_deref_mut(),
    )?;
    let q = encode_query(&mut tape, params, config, &inst.query_ids, rng)?;
    let doc_len = inst.doc_ids.len();
    let (first_hop, final_q) = match (&params.hop, config.num_hops) {
        (Some(hop), 2) => {
            let out = hop_update(&mut tape, &d, q, hop, doc_len)?;
            let q1 = out.q1;
            (Some(out), q1)
        }
        (None, 1) => (None, q),
        _ => return Err(ParError::Config("parameters do not match num_hops".into())),
    };
    let (scores, probs) = attend(&mut tape, &d, final_q, &params.attn, doc_len)?;
    Ok(Forward {
        tape,
        candidates: d,
        q,
        first_hop,
        scores,
        probs,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    /// `nll + kl_weight * kl`.
    pub total: f64,
    pub nll: f64,
    pub kl: Option<f64>,
}

fn build_loss(f: &mut Forward<'_>, config: &ParConfig, inst: &EncodedInstance) -> Result<(Var, LossParts)> {
    let nll = loss_max_correct(&mut f.tape, f.probs, &inst.answers)?;
    let mut parts = LossParts {
        total: f.tape.scalar(nll),
        nll: f.tape.scalar(nll),
        kl: None,
    };
    let mut total = nll;
    if let (Some(hop), Some(sup)) = (&f.first_hop, &inst.supervision) {
        if config.kl_weight > 0.0 {
            let kl = loss_extra_supervision(&mut f.tape, hop.probs, sup)?;
            parts.kl = Some(f.tape.scalar(kl));
            let weighted = f.tape.scale(kl, config.kl_weight);
            total = f.tape.add(nll, weighted)?;
            parts.total = f.tape.scalar(total);
        }
    }
    Ok((total, parts))
}

/// Loss of one instance without dropout.
pub fn instance_loss(params: &ParParams, config: &ParConfig, inst: &EncodedInstance) -> Result<LossParts> {
    let mut f = forward(params, config, inst, None)?;
    Ok(build_loss(&mut f, config, inst)?.1)
}

/// Loss of one instance and its gradient with respect to every parameter.
pub fn instance_loss_and_grad(
    params: &ParParams,
    config: &ParConfig,
    inst: &EncodedInstance,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossParts, Gradients)> {
    let mut f = forward(params, config, inst, rng)?;
    let (loss, parts) = build_loss(&mut f, config, inst)?;
    let mut grads = Gradients::zeros_like(&params.store);
    f.tape.backward(loss, &mut grads);
    Ok((parts, grads))
}

/// `weight * ||theta||^2` over all parameters.
pub fn l2_penalty(params: &ParParams, weight: f64) -> f64 {
    if weight == 0.0 {
        0.0
    } else {
        weight * params.store.squared_norm()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopTrace {
    /// Attention scores per document position (0 at non-candidates).
    pub scores: Vec<f64>,
    /// Attention probabilities per document position.
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// One entry per hop, first hop first.
    pub hops: Vec<HopTrace>,
    /// Document position the final hop points to.
    pub pointer: usize,
    pub q: Vec<f64>,
    pub q1: Option<Vec<f64>>,
}

/// Points at the most probable candidate (lowest position on ties).
pub fn predict(params: &ParParams, config: &ParConfig, inst: &EncodedInstance) -> Result<(usize, AttentionTrace)> {
    let f = forward(params, config, inst, None)?;
    let probs = f.tape.value(f.probs).to_vec();
    let pointer = argmax_over(&probs, &inst.candidates).expect("candidates are non-empty");
    let mut hops = Vec::with_capacity(2);
    if let Some(h) = &f.first_hop {
        hops.push(HopTrace {
            scores: f.tape.value(h.scores).to_vec(),
            probs: f.tape.value(h.probs).to_vec(),
        });
    }
    hops.push(HopTrace {
        scores: f.tape.value(f.scores).to_vec(),
        probs,
    });
    Ok((
        pointer,
        AttentionTrace {
            hops,
            pointer,
            q: f.tape.value(f.q).to_vec(),
            q1: f.first_hop.as_ref().map(|h| f.tape.value(h.q1).to_vec()),
        },
    ))
}

/// Configuration, parameters and vocabulary of a reader.
#[derive(Clone, Debug, PartialEq)]
pub struct ParModel {
    pub config: ParConfig,
    pub params: ParParams,
    pub vocab: Vocabulary,
}

impl ParModel {
    pub fn new<R: Rng + ?Sized>(config: ParConfig, vocab: Vocabulary, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = ParParams::init(&config, &vocab, rng);
        Ok(ParModel { config, params, vocab })
    }

    pub fn encode(&self, inst: &ClozeInstance) -> Result<EncodedInstance> {
        EncodedInstance::new(&self.vocab, inst)
    }

    pub fn predict(&self, inst: &ClozeInstance) -> Result<(usize, AttentionTrace)> {
        predict(&self.params, &self.config, &self.encode(inst)?)
    }
}
