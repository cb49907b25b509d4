//! Optimization loop: initialization, gradient clipping, learning-rate
//! schedule, bucketed batching, validation perplexity and checkpoints.

mod manifest;
mod optim;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use manifest::{EpochRecord, ManifestHeader, RunManifest};
pub use optim::{Optimizer, OptimizerState};

use crate::compute::{checkpoint, Gradients, NodeId, ParameterStore, Tape};
use crate::error::ModelError;

/// A model the trainer can optimize.
pub trait Trainable: Sync {
    type Example: Sync;

    fn kind(&self) -> ModelKind;
    fn register(&self, store: &mut ParameterStore) -> Result<(), ModelError>;
    /// Length used for bucketing.
    fn example_len(&self, ex: &Self::Example) -> usize;
    /// Summed loss over `batch` and the count it should be averaged over.
    /// `rng` is present during training and enables dropout.
    fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&Self::Example],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, usize), ModelError>;
    /// JSON description sufficient to rebuild the model structure.
    fn describe(&self) -> serde_json::Value;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Word,
    Char,
    Cnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Word => "word",
            ModelKind::Char => "char",
            ModelKind::Cnn => "cnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Last epoch at the initial rate; halving every epoch afterwards.
    pub halving_start: usize,
    /// Start halving early once validation perplexity stops improving.
    pub stall_halving: bool,
    pub stall_tolerance: f64,
    pub clip: f64,
    pub init_range_word: f64,
    pub init_range_char: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Stop after this many parameter updates.
    pub max_updates: Option<usize>,
    /// Each batch is split into this many pieces whose forward/backward
    /// passes run in parallel; gradients are summed in piece order.
    pub grad_chunks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 14,
            batch_size: 64,
            lr: 1.0,
            halving_start: 10,
            stall_halving: true,
            stall_tolerance: 1e-4,
            clip: 5.0,
            init_range_word: 0.1,
            init_range_char: 0.05,
            seed: 1,
            optimizer: Optimizer::Sgd,
            max_updates: None,
            grad_chunks: 1,
        }
    }
}

impl TrainConfig {
    /// Small-batch recipe for desk-scale models on a few thousand pairs.
    /// These models need many more epochs at the initial rate before the
    /// attention locks onto the source, so halving starts later and the
    /// stall trigger is off; the char range matches the word range.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            halving_start: 20,
            stall_halving: false,
            init_range_char: 0.1,
            ..Self::default()
        }
    }

    /// The sentence classifier's recipe: Adadelta for a fixed number of
    /// epochs with no rate schedule.
    pub fn cnn() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 50,
            halving_start: usize::MAX,
            stall_halving: false,
            optimizer: Optimizer::adadelta(),
            ..Self::default()
        }
    }

    pub fn init_range(&self, kind: ModelKind) -> f64 {
        match kind {
            ModelKind::Char => self.init_range_char,
            ModelKind::Word | ModelKind::Cnn => self.init_range_word,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr > 0.0
            && self.clip > 0.0
            && self.init_range_word > 0.0
            && self.init_range_char > 0.0
            && self.grad_chunks > 0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config(format!("train settings must be positive: {self:?}")))
        }
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Registers `model`'s parameters in an empty store and draws each value
/// uniformly from `[-r, r]` with `r` the kind's range.
pub fn init_params<M: Trainable>(store: &mut ParameterStore, model: &M, config: &TrainConfig) -> Result<(), ModelError> {
    if !store.is_empty() {
        return Err(ModelError::Config("init_params needs an empty store".into()));
    }
    model.register(store)?;
    let r = config.init_range(model.kind());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x1417));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-r..=r);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `threshold`.
/// Returns the factor applied.
pub fn clip_gradients(store: &mut ParameterStore, threshold: f64) -> f64 {
    let norm = store.grad_norm();
    if norm <= threshold || norm == 0.0 {
        return 1.0;
    }
    let scale = threshold / norm;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.grad_mut(id).scale_in_place(scale);
    }
    scale
}

/// Learning rate for `epoch` (1-based) given validation perplexities of
/// the completed epochs (`history[k]` after epoch `k + 1`).
///
/// The rate stays at `lr` until halving starts, then halves every epoch.
/// Halving starts after `halving_start`, or earlier after the first epoch
/// `k ≥ 2` whose perplexity is not below its predecessor's by more than
/// `stall_tolerance`.
pub fn lr_at(epoch: usize, config: &TrainConfig, history: &[f64]) -> f64 {
    let mut start = config.halving_start.saturating_add(1);
    if config.stall_halving {
        let seen = &history[..history.len().min(epoch.saturating_sub(1))];
        if let Some(k) = (1..seen.len()).find(|&k| seen[k] >= seen[k - 1] - config.stall_tolerance) {
            // k is 0-based, so the stalled epoch is k + 1
            start = start.min(k + 2);
        }
    }
    if epoch < start {
        config.lr
    } else {
        config.lr * 0.5f64.powi((epoch - start + 1) as i32)
    }
}

/// Length-bucketed batches: shuffle, sort windows of 20 batches by length,
/// cut, then shuffle batch order.
pub fn make_batches(lens: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lens.len()).collect();
    idx.shuffle(rng);
    let mut batches = Vec::new();
    for window in idx.chunks(batch_size * 20) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| lens[i]);
        batches.extend(w.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Mean loss over `data` with dropout disabled. Never mutates parameters.
pub fn evaluate<M: Trainable>(
    model: &M,
    store: &ParameterStore,
    data: &[M::Example],
    batch_size: usize,
) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Err(ModelError::Empty("evaluation set"));
    }
    let parts: Vec<(f64, usize)> = data
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&M::Example> = chunk.iter().collect();
            let mut tape = Tape::new(store);
            let (loss, n) = model.batch_loss(&mut tape, &refs, None)?;
            Ok((tape.value(loss).data()[0], n))
        })
        .collect::<Result<_, ModelError>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, c), &(a, b)| (s + a, c + b));
    Ok(sum / n as f64)
}

/// Gradients of the summed loss over one batch, split into `chunks`
/// pieces computed in parallel.
fn batch_gradients<M: Trainable>(
    model: &M,
    store: &ParameterStore,
    batch: &[&M::Example],
    chunks: usize,
    seed: u64,
) -> Result<(f64, usize, Gradients), ModelError> {
    let size = batch.len().div_ceil(chunks.max(1));
    let parts: Vec<(f64, usize, Gradients)> = batch
        .par_chunks(size.max(1))
        .enumerate()
        .map(|(k, piece)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, k as u64));
            let mut tape = Tape::new(store);
            let (loss, n) = model.batch_loss(&mut tape, piece, Some(&mut rng))?;
            let value = tape.value(loss).data()[0];
            Ok((value, n, tape.backward(loss)?))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut total = 0.0;
    let mut count = 0;
    let mut grads = Gradients::default();
    for (l, n, g) in parts {
        total += l;
        count += n;
        grads.merge(g);
    }
    Ok((total, count, grads))
}

/// Where training resumes: epochs completed so far and their validation
/// perplexities.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub updates: usize,
    pub history: Vec<f64>,
}

#[derive(Default)]
pub struct TrainOptions {
    /// Per-epoch checkpoints and `manifest.jsonl` go here.
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<(TrainState, OptimizerState)>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: serde_json::Value,
    state: TrainState,
}

/// A decoded checkpoint.
pub struct Checkpoint {
    pub model: serde_json::Value,
    pub state: TrainState,
    pub params: ParameterStore,
    pub optimizer: OptimizerState,
}

pub fn save_checkpoint(
    path: &Path,
    model: serde_json::Value,
    state: &TrainState,
    params: &ParameterStore,
    opt: &OptimizerState,
) -> Result<(), ModelError> {
    let meta = serde_json::to_string(&CheckpointMeta { model, state: state.clone() }).expect("serializable");
    let mut all = params.clone();
    opt.export(params, &mut all)?;
    checkpoint::save(path, &meta, &all)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let (meta, all) = checkpoint::load(path)?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta).map_err(|e| ModelError::Config(format!("checkpoint header: {e}")))?;
    let mut params = ParameterStore::new();
    for id in all.ids() {
        let name = all.name(id);
        if !name.starts_with(optim::STATE_PREFIX) {
            params.insert(name, all.value(id).clone())?;
        }
    }
    let optimizer = OptimizerState::import(&params, &all);
    Ok(Checkpoint { model: meta.model, state: meta.state, params, optimizer })
}

/// Runs the training loop on an initialized store.
pub fn train<M: Trainable>(
    model: &M,
    store: &mut ParameterStore,
    train_set: &[M::Example],
    valid_set: &[M::Example],
    config: &TrainConfig,
    options: TrainOptions,
) -> Result<RunManifest, ModelError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::Empty("training set"));
    }
    let header = ManifestHeader {
        kind: model.kind().name().to_string(),
        optimizer: config.optimizer.name().to_string(),
        model: model.describe(),
        train: serde_json::to_value(config).expect("serializable"),
        train_examples: train_set.len(),
        valid_examples: valid_set.len(),
    };
    let manifest_path = options.checkpoint_dir.as_ref().map(|d| d.join("manifest.jsonl"));
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let (mut state, mut opt) = options.resume.unwrap_or_default();
    if let (Some(p), 0) = (&manifest_path, state.epoch) {
        let _ = std::fs::remove_file(p);
        RunManifest::append_line(p, &header)?;
    }
    let mut manifest = RunManifest { header, epochs: Vec::new() };
    let lens: Vec<usize> = train_set.iter().map(|e| model.example_len(e)).collect();

    'epochs: for epoch in state.epoch + 1..=config.epochs {
        if config.max_updates.is_some_and(|m| state.updates >= m) {
            break;
        }
        let started = Instant::now();
        let lr = lr_at(epoch, config, &state.history);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64));
        let batches = make_batches(&lens, config.batch_size, &mut rng);
        let (mut loss_sum, mut count, mut clipped, mut steps) = (0.0, 0usize, 0usize, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            if config.max_updates.is_some_and(|m| state.updates >= m) {
                break;
            }
            let refs: Vec<&M::Example> = batch.iter().map(|&i| &train_set[i]).collect();
            let seed = mix(mix(config.seed, epoch as u64), bi as u64 + 1);
            let (l, n, grads) = batch_gradients(model, store, &refs, config.grad_chunks, seed)?;
            if !l.is_finite() {
                return Err(ModelError::NonFiniteLoss { loss: l, epoch, batch: bi });
            }
            loss_sum += l;
            count += n;
            store.zero_grads();
            store.accumulate(&grads);
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                store.grad_mut(id).scale_in_place(1.0 / refs.len() as f64);
            }
            if clip_gradients(store, config.clip) < 1.0 {
                clipped += 1;
            }
            opt.step(config.optimizer, store, lr);
            state.updates += 1;
            steps += 1;
        }
        let train_loss = loss_sum / count.max(1) as f64;
        let val_loss = if valid_set.is_empty() { train_loss } else { evaluate(model, store, valid_set, config.batch_size)? };
        state.epoch = epoch;
        state.history.push(val_loss.exp());
        let ckpt = match &options.checkpoint_dir {
            Some(dir) => {
                let path = dir.join(format!("epoch{epoch:03}.ckpt"));
                save_checkpoint(&path, model.describe(), &state, store, &opt)?;
                Some(path.display().to_string())
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            updates: state.updates,
            train_loss,
            train_ppl: train_loss.exp(),
            val_loss,
            val_ppl: val_loss.exp(),
            clipped: clipped as f64 / steps.max(1) as f64,
            checkpoint: ckpt,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        if options.verbose {
            eprintln!(
                "epoch {epoch}: lr {lr} train loss {train_loss:.4} val ppl {:.4} ({:.1}s)",
                record.val_ppl, record.wall_secs
            );
        }
        if let Some(p) = &manifest_path {
            RunManifest::append_line(p, &record)?;
        }
        manifest.epochs.push(record);
        if config.max_updates.is_some_and(|m| state.updates >= m) {
            break 'epochs;
        }
    }
    Ok(manifest)
}
