//! Mini-batch Adagrad training with seeded shuffling and dropout, ordered
//! gradient reduction and per-epoch checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clozegen::ClozeInstance;
use crate::corpus::Vocabulary;
use crate::error::{ParError, Result};
use crate::eval::evaluate;
use crate::exec::Executor;
use crate::model::{instance_loss_and_grad, l2_penalty, EncodedInstance, ParConfig, ParModel, ParParams};
use crate::tensor::{load_arrays, save_arrays, Gradients, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
    pub seed: u64,
    /// Weight of `||theta||^2` in every batch objective.
    pub l2_weight: f64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 10,
            learning_rate: 0.01,
            adagrad_epsilon: 1e-8,
            seed: 0,
            l2_weight: 0.0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ParError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(self.adagrad_epsilon >= 0.0) || !self.adagrad_epsilon.is_finite() {
            return bad("adagrad_epsilon must be non-negative");
        }
        if !(self.l2_weight >= 0.0) || !self.l2_weight.is_finite() {
            return bad("l2_weight must be non-negative");
        }
        Ok(())
    }
}

/// The JSON config file: model and training sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ParConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ParError::io(path, e))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| ParError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}

/// Squared-gradient accumulators, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState {
    pub accum: Vec<Vec<f64>>,
}

impl AdagradState {
    pub fn new(store: &ParamStore) -> Self {
        AdagradState {
            accum: store.ids().map(|id| vec![0.0; store.get(id).len()]).collect(),
        }
    }

    fn to_tensors(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| Tensor::from_vec(store.get(id).shape(), self.accum[id.0].clone()).unwrap())
            .collect()
    }

    fn from_arrays(store: &ParamStore, arrays: Vec<(String, Tensor)>) -> Result<Self> {
        let mut state = AdagradState::new(store);
        if arrays.len() != state.accum.len() {
            return Err(ParError::Config("optimizer state does not match the model".into()));
        }
        for (name, t) in arrays {
            let id = store
                .id_of(&name)
                .ok_or_else(|| ParError::Config(format!("unexpected optimizer array {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(ParError::dim("adagrad state", t.shape(), store.get(id).shape()));
            }
            state.accum[id.0] = t.data().to_vec();
        }
        Ok(state)
    }
}

/// `G += g^2; theta -= lr * g / (sqrt(G) + eps)`, coordinatewise.
pub fn adagrad_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdagradState,
    lr: f64,
    eps: f64,
) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    if state.accum.len() != ids.len() {
        return Err(ParError::dim("adagrad_step", &[state.accum.len()], &[ids.len()]));
    }
    for id in ids {
        let (g, acc) = (grads.get(id), &mut state.accum[id.0]);
        let theta = store.get_mut(id).data_mut();
        if g.len() != theta.len() || acc.len() != theta.len() {
            return Err(ParError::dim("adagrad_step", &[theta.len()], &[g.len(), acc.len()]));
        }
        for ((t, &gi), a) in theta.iter_mut().zip(g).zip(acc.iter_mut()) {
            if gi != 0.0 {
                *a += gi * gi;
                *t -= lr * gi / (a.sqrt() + eps);
            }
        }
    }
    Ok(())
}

fn derived_seed(seed: u64, epoch: usize, index: u64, tag: u64) -> ChaCha8Rng {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    s[16..24].copy_from_slice(&index.to_le_bytes());
    s[24..].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(s)
}

/// Dropout stream of one instance in one epoch, independent of batching and
/// of the worker that processes it.
pub fn instance_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    derived_seed(seed, epoch, index as u64, 0)
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    derived_seed(seed, epoch, 0, 1)
}

/// Instance order of one epoch.
pub fn epoch_order(n: usize, config: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if config.shuffle {
        order.shuffle(&mut shuffle_rng(config.seed, epoch));
    }
    order
}

/// Averaged objective of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchObjective {
    /// Mean instance loss plus `l2_weight * ||theta||^2`.
    pub loss: f64,
    pub grads: Gradients,
    pub used: usize,
    pub skipped: usize,
}

/// Dropout source for [`batch_objective`]: `None` disables dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutSeed {
    pub seed: u64,
    pub epoch: usize,
}

/// Loss and gradient of a batch given as `(dataset index, instance)` pairs.
/// Instances that violate a contract are skipped with a warning. Returns
/// `None` when every instance was skipped.
pub fn batch_objective(
    params: &ParParams,
    config: &ParConfig,
    batch: &[(usize, &EncodedInstance)],
    l2_weight: f64,
    dropout: Option<DropoutSeed>,
    exec: &Executor,
) -> Option<BatchObjective> {
    let results = exec.map(batch, |_, &(index, inst)| {
        let mut rng = dropout.map(|d| instance_rng(d.seed, d.epoch, index));
        instance_loss_and_grad(params, config, inst, rng.as_mut())
    });
    let mut grads = Gradients::zeros_like(&params.store);
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for ((index, _), r) in batch.iter().zip(results) {
        match r {
            Ok((parts, g)) => {
                sum += parts.total;
                grads.add_assign(&g);
                used += 1;
            }
            Err(e) => {
                log::warn!("skipping instance {index}: {e}");
                skipped += 1;
            }
        }
    }
    if used == 0 {
        return None;
    }
    grads.scale(1.0 / used as f64);
    if l2_weight > 0.0 {
        grads.add_l2(&params.store, l2_weight);
    }
    Some(BatchObjective {
        loss: sum / used as f64 + l2_penalty(params, l2_weight),
        grads,
        used,
        skipped,
    })
}

/// Model plus optimizer state; `epoch` counts completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ParModel,
    pub adagrad: AdagradState,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: ParModel) -> Self {
        let adagrad = AdagradState::new(&model.params.store);
        TrainState {
            model,
            adagrad,
            epoch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based number of the completed epoch.
    pub epoch: usize,
    pub loss: f64,
    pub dev_acc: Option<f64>,
}

/// Encodes every instance, dropping (with a warning) those that violate a
/// model contract. Returns `(dataset index, encoding)` pairs.
pub fn encode_all(model: &ParModel, instances: &[ClozeInstance]) -> Vec<(usize, EncodedInstance)> {
    instances
        .iter()
        .enumerate()
        .filter_map(|(i, inst)| match model.encode(inst) {
            Ok(e) => Some((i, e)),
            Err(e) => {
                log::warn!("skipping instance {i} ({}/{}): {e}", inst.meta.doc_id, inst.meta.event_index);
                None
            }
        })
        .collect()
}

/// Runs the next epoch and returns its mean batch loss.
pub fn train_epoch(
    state: &mut TrainState,
    data: &[(usize, EncodedInstance)],
    config: &TrainConfig,
    exec: &Executor,
) -> Result<f64> {
    if data.is_empty() {
        return Err(ParError::Contract("no trainable instances".into()));
    }
    let epoch = state.epoch;
    let order = epoch_order(data.len(), config, epoch);
    let dropout = Some(DropoutSeed {
        seed: config.seed,
        epoch,
    });
    let (mut total, mut batches) = (0.0, 0usize);
    for chunk in order.chunks(config.batch_size) {
        let batch: Vec<(usize, &EncodedInstance)> = chunk.iter().map(|&k| (data[k].0, &data[k].1)).collect();
        let model = &state.model;
        let Some(obj) = batch_objective(&model.params, &model.config, &batch, config.l2_weight, dropout, exec) else {
            continue;
        };
        adagrad_step(
            &mut state.model.params.store,
            &obj.grads,
            &mut state.adagrad,
            config.learning_rate,
            config.adagrad_epsilon,
        )?;
        total += obj.loss;
        batches += 1;
    }
    state.epoch += 1;
    if batches == 0 {
        return Err(ParError::Contract(format!("every instance was skipped in epoch {}", epoch + 1)));
    }
    Ok(total / batches as f64)
}

/// Trains from `state.epoch` up to `config.epochs`, calling `on_epoch` after
/// every epoch. Dev accuracy is measured when `dev` is given.
pub fn train<F>(
    state: &mut TrainState,
    instances: &[ClozeInstance],
    dev: Option<&[ClozeInstance]>,
    config: &TrainConfig,
    exec: &Executor,
    mut on_epoch: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&TrainState, &EpochRecord) -> Result<()>,
{
    config.validate()?;
    if instances.is_empty() {
        return Err(ParError::Contract("no training instances".into()));
    }
    let data = encode_all(&state.model, instances);
    let mut log = Vec::new();
    while state.epoch < config.epochs {
        let loss = train_epoch(state, &data, config, exec)?;
        let dev_acc = dev.and_then(|d| evaluate(&state.model, d, exec).accuracy);
        let record = EpochRecord {
            epoch: state.epoch,
            loss,
            dev_acc,
        };
        log::info!("epoch {} loss {loss:.6}", state.epoch);
        on_epoch(state, &record)?;
        log.push(record);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub epoch: usize,
    pub config: RunConfig,
    pub vocab_hash: String,
    pub record: Option<EpochRecord>,
}

pub const CHECKPOINT_FORMAT: &str = "par-checkpoint-v1";

/// `<out>/ckpt-NNN` for the state after `epoch` completed epochs.
pub fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("ckpt-{epoch:03}"))
}

/// Writes parameters, optimizer state, vocabulary and metadata into `dir`.
pub fn save_checkpoint(dir: &Path, state: &TrainState, config: &RunConfig, record: Option<&EpochRecord>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ParError::io(dir, e))?;
    let store = &state.model.params.store;
    let params: Vec<(&str, &Tensor)> = store.iter().collect();
    save_arrays(dir, "params", &params)?;
    let accum = state.adagrad.to_tensors(store);
    let named: Vec<(&str, &Tensor)> = store.iter().map(|(n, _)| n).zip(&accum).collect();
    save_arrays(dir, "adagrad", &named)?;
    state.model.vocab.save(&dir.join("vocab.json"))?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        epoch: state.epoch,
        config: config.clone(),
        vocab_hash: state.model.vocab.hash(),
        record: record.cloned(),
    };
    let path = dir.join("checkpoint.json");
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| ParError::io(&path, e))
}

/// Restores a state written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let path = dir.join("checkpoint.json");
    let text = std::fs::read_to_string(&path).map_err(|e| ParError::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| ParError::Checkpoint {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(ParError::Checkpoint {
            path,
            message: format!("unsupported format {}", meta.format),
        });
    }
    meta.config.validate()?;
    let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
    if vocab.hash() != meta.vocab_hash {
        return Err(ParError::HashMismatch {
            what: "checkpoint vocabulary".into(),
            expected: meta.vocab_hash.clone(),
            found: vocab.hash(),
        });
    }
    // parameter names and shapes come from a fresh initialization
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = ParModel::new(meta.config.model.clone(), vocab, &mut rng)?;
    model.params.load_values(load_arrays(dir, "params")?)?;
    let adagrad = AdagradState::from_arrays(&model.params.store, load_arrays(dir, "adagrad")?)?;
    Ok((
        TrainState {
            model,
            adagrad,
            epoch: meta.epoch,
        },
        meta,
    ))
}
