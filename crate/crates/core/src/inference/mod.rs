//! Beam-search decoding with additive tag-bias calibration, attention-based
//! unknown replacement, and grid tuning of the tag biases.

mod post;
pub mod toy;
mod tune;

pub use post::{classify_from_decode, decode_corpus, replace_unknowns, Classification, DecodeRecord};
pub use tune::{predict_labels, sweep_table, tune_bias, GridSpec, SweepRow, TuneResult};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::compute::Tensor;
use crate::corpus::vocab::{BOS_ID, EOS_ID, TAG_IDS};
use crate::error::ModelError;
use crate::seq2seq::{DecoderState, EncodedSource, FrozenEncDec};

/// Additive pre-softmax offsets for `<ins>`, `</ins>`, `<del>`, `</del>`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TagBias(pub [f64; 4]);

impl TagBias {
    pub fn uniform(x: f64) -> TagBias {
        TagBias([x; 4])
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    /// Sum of absolute offsets.
    pub fn magnitude(&self) -> f64 {
        self.0.iter().map(|x| x.abs()).sum()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.0.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(ModelError::Config(format!("non-finite tag bias {:?}", self.0)))
        }
    }

    /// Full logit offset vector over a vocabulary of `vocab_size` ids.
    pub fn offsets(&self, vocab_size: usize) -> Vec<f64> {
        let mut v = vec![0.0; vocab_size];
        for (&id, &b) in TAG_IDS.iter().zip(&self.0) {
            if (id as usize) < vocab_size {
                v[id as usize] = b;
            }
        }
        v
    }
}

/// Output of one decoder step for `K` rows.
pub struct Step<S> {
    /// `K × V` log-probabilities.
    pub log_probs: Tensor,
    pub state: S,
    /// `K × I` attention weights in source order.
    pub attention: Tensor,
}

/// A frozen, step-wise scorer that beam search can drive.
pub trait Decoder: Sync {
    type Context: Sync;
    type State: Send;

    fn vocab_size(&self) -> usize;
    fn initial_state(&self, ctx: &Self::Context, rows: usize) -> Self::State;
    fn step(
        &self,
        ctx: &Self::Context,
        prev: &[u32],
        state: &Self::State,
        offset: Option<&[f64]>,
    ) -> Result<Step<Self::State>, ModelError>;
    /// Keeps (and possibly repeats) the given rows.
    fn select(&self, state: &Self::State, rows: &[usize]) -> Self::State;
}

impl Decoder for FrozenEncDec<'_> {
    type Context = EncodedSource;
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        FrozenEncDec::vocab_size(self)
    }

    fn initial_state(&self, ctx: &EncodedSource, rows: usize) -> DecoderState {
        FrozenEncDec::initial_state(self, ctx, rows)
    }

    fn step(
        &self,
        ctx: &EncodedSource,
        prev: &[u32],
        state: &DecoderState,
        offset: Option<&[f64]>,
    ) -> Result<Step<DecoderState>, ModelError> {
        let out = FrozenEncDec::step(self, ctx, prev, state, offset)?;
        Ok(Step { log_probs: out.log_probs, state: out.state, attention: out.attention })
    }

    fn select(&self, state: &DecoderState, rows: &[usize]) -> DecoderState {
        state.select(rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, ending in the end symbol when finished.
    pub tokens: Vec<u32>,
    pub score: f64,
    /// One attention vector per generated id.
    pub attention: Vec<Vec<f64>>,
    pub finished: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Maximum output length beyond the source length.
    pub extra_len: usize,
    pub bias: TagBias,
    /// Rank final hypotheses by mean rather than total log-probability.
    pub length_norm: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { beam: 10, extra_len: 20, bias: TagBias::default(), length_norm: false }
    }
}

impl DecodeOptions {
    pub fn max_len(&self, source_len: usize) -> usize {
        source_len + self.extra_len
    }
}

fn rank_score(h: &Hypothesis, length_norm: bool) -> f64 {
    if length_norm && !h.tokens.is_empty() {
        h.score / h.tokens.len() as f64
    } else {
        h.score
    }
}

/// Final ordering: higher score, then earlier completion, then smaller ids.
fn final_order(a: &Hypothesis, b: &Hypothesis, length_norm: bool) -> Ordering {
    rank_score(b, length_norm)
        .total_cmp(&rank_score(a, length_norm))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// The `k` best ids of a row: highest log-probability, lowest id on ties.
fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Length-synchronous beam search.
///
/// Each step expands every live hypothesis, keeps the `beam` best
/// candidates and retires those ending in the end symbol. Search stops
/// when no live hypothesis can still beat the best finished one, or at
/// `max_len`, in which case the best unfinished hypothesis is returned if
/// nothing finished.
pub fn beam_decode<D: Decoder>(
    model: &D,
    ctx: &D::Context,
    beam: usize,
    bias: &TagBias,
    max_len: usize,
    length_norm: bool,
) -> Result<Hypothesis, ModelError> {
    if beam == 0 {
        return Err(ModelError::Config("beam size must be at least 1".into()));
    }
    bias.validate()?;
    let offsets = (!bias.is_zero()).then(|| bias.offsets(model.vocab_size()));
    let mut state = model.initial_state(ctx, 1);
    let mut live = vec![Hypothesis { tokens: vec![], score: 0.0, attention: vec![], finished: false }];
    let mut prev = vec![BOS_ID];
    let mut done: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len.max(1) {
        let out = model.step(ctx, &prev, &state, offsets.as_deref())?;
        // (score, live row, id)
        let mut cand: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * beam);
        for (r, h) in live.iter().enumerate() {
            let row = out.log_probs.row(r);
            for v in top_k(row, beam) {
                cand.push((h.score + row[v], r, v as u32));
            }
        }
        cand.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens)).then(a.2.cmp(&b.2))
        });
        cand.truncate(beam);

        let mut next = Vec::with_capacity(cand.len());
        let mut rows = Vec::with_capacity(cand.len());
        for &(score, r, v) in &cand {
            let mut h = live[r].clone();
            h.tokens.push(v);
            h.score = score;
            h.attention.push(out.attention.row(r).to_vec());
            if v == EOS_ID {
                h.finished = true;
                done.push(h);
            } else {
                next.push(h);
                rows.push(r);
            }
        }
        if next.is_empty() {
            live = next;
            break;
        }
        state = model.select(&out.state, &rows);
        prev = next.iter().map(|h| *h.tokens.last().expect("non-empty")).collect();
        live = next;
        if !length_norm {
            let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                break;
            }
        }
    }
    let pool = if done.is_empty() { &mut live } else { &mut done };
    pool.sort_by(|a, b| final_order(a, b, length_norm));
    Ok(pool.swap_remove(0))
}

/// Beam search with [`DecodeOptions`] over a source of `source_len` tokens.
pub fn decode_with<D: Decoder>(
    model: &D,
    ctx: &D::Context,
    source_len: usize,
    opts: &DecodeOptions,
) -> Result<Hypothesis, ModelError> {
    beam_decode(model, ctx, opts.beam, &opts.bias, opts.max_len(source_len), opts.length_norm)
}

/// Argmax decoding, lowest id on ties.
pub fn greedy_decode<D: Decoder>(
    model: &D,
    ctx: &D::Context,
    bias: &TagBias,
    max_len: usize,
) -> Result<Hypothesis, ModelError> {
    let offsets = (!bias.is_zero()).then(|| bias.offsets(model.vocab_size()));
    let mut state = model.initial_state(ctx, 1);
    let mut h = Hypothesis { tokens: vec![], score: 0.0, attention: vec![], finished: false };
    let mut prev = BOS_ID;
    for _ in 0..max_len.max(1) {
        let out = model.step(ctx, &[prev], &state, offsets.as_deref())?;
        let row = out.log_probs.row(0);
        let mut best = 0;
        for (v, &lp) in row.iter().enumerate() {
            if lp > row[best] {
                best = v;
            }
        }
        h.tokens.push(best as u32);
        h.score += row[best];
        h.attention.push(out.attention.row(0).to_vec());
        if best as u32 == EOS_ID {
            h.finished = true;
            break;
        }
        state = out.state;
        prev = best as u32;
    }
    Ok(h)
}

#[cfg(test)]
mod tests;
