use crate::compute::ops::log_softmax_rows;
use crate::compute::{NodeId, ParameterStore, Tape, Tensor};
use crate::error::ModelError;

use super::{output_logits, EncDec, Memory, SourceInput};

/// Encoder output for a single sentence, detached from any tape.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    /// `I × n` top-layer states in encoder step order.
    pub states: Tensor,
    pub projected: Tensor,
    pub final_state: Vec<(Tensor, Tensor)>,
    pub len: usize,
    pub reversed: bool,
}

/// Decoder state for `K` rows (hypotheses), detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<(Tensor, Tensor)>,
    /// Previous attentional context, the input-feeding vector.
    pub feed: Tensor,
}

impl DecoderState {
    pub fn rows(&self) -> usize {
        self.feed.rows()
    }

    /// Rows reordered (and possibly repeated) by `rows`.
    pub fn select(&self, rows: &[usize]) -> DecoderState {
        DecoderState {
            layers: self.layers.iter().map(|(h, c)| (h.select_rows(rows), c.select_rows(rows))).collect(),
            feed: self.feed.select_rows(rows),
        }
    }
}

pub struct StepOutput {
    /// `K × |V|` log-probabilities after any logit offsets.
    pub log_probs: Tensor,
    pub state: DecoderState,
    /// `K × I` attention weights indexed by source position.
    pub attention: Tensor,
}

/// Read-only view of a trained encoder-decoder for step-wise decoding.
/// Decoder input vectors for every output id are computed once.
pub struct FrozenEncDec<'a> {
    pub model: &'a EncDec,
    pub store: &'a ParameterStore,
    dec_inputs: Tensor,
}

impl<'a> FrozenEncDec<'a> {
    pub fn new(model: &'a EncDec, store: &'a ParameterStore) -> Result<Self, ModelError> {
        let ids: Vec<u32> = (0..model.vocab_size as u32).collect();
        let mut parts = Vec::new();
        for chunk in ids.chunks(512) {
            let mut tape = Tape::new(store);
            let x = model.decoder_inputs(&mut tape, chunk)?;
            parts.push(tape.value(x).clone());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(FrozenEncDec { model, store, dec_inputs: Tensor::vstack(&refs)? })
    }

    pub fn vocab_size(&self) -> usize {
        self.model.vocab_size
    }

    pub fn encode(&self, source: SourceInput<'_>) -> Result<EncodedSource, ModelError> {
        let mut tape = Tape::new(self.store);
        let enc = self.model.encode(&mut tape, &[source], None)?;
        Ok(EncodedSource {
            states: tape.value(enc.memory.states).clone(),
            projected: tape.value(enc.memory.projected).clone(),
            final_state: enc.final_state.iter().map(|&(h, c)| (tape.value(h).clone(), tape.value(c).clone())).collect(),
            len: enc.lengths[0],
            reversed: self.model.config.reverse_source,
        })
    }

    /// `rows` copies of the encoder's final state with a zero feed vector.
    pub fn initial_state(&self, enc: &EncodedSource, rows: usize) -> DecoderState {
        let r = vec![0; rows];
        DecoderState {
            layers: enc.final_state.iter().map(|(h, c)| (h.select_rows(&r), c.select_rows(&r))).collect(),
            feed: Tensor::zeros(&[rows, self.model.config.hidden]),
        }
    }

    /// Advances every row by one token. `logit_offset`, if given, is added
    /// to the pre-softmax scores of every row.
    pub fn step(
        &self,
        enc: &EncodedSource,
        prev: &[u32],
        state: &DecoderState,
        logit_offset: Option<&[f64]>,
    ) -> Result<StepOutput, ModelError> {
        if prev.len() != state.rows() {
            return Err(ModelError::Config(format!("{} tokens for {} state rows", prev.len(), state.rows())));
        }
        if let Some(&bad) = prev.iter().find(|&&i| i as usize >= self.vocab_size()) {
            return Err(crate::compute::ComputeError::IndexOutOfRange { index: bad as usize, len: self.vocab_size() }.into());
        }
        let mut tape = Tape::new(self.store);
        let idx: Vec<usize> = prev.iter().map(|&i| i as usize).collect();
        let x = tape.constant(self.dec_inputs.select_rows(&idx));
        let layers: Vec<(NodeId, NodeId)> =
            state.layers.iter().map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone()))).collect();
        let feed = tape.constant(state.feed.clone());
        let memory = Memory { states: tape.constant(enc.states.clone()), projected: tape.constant(enc.projected.clone()) };
        let (next, ctx, alpha) = self.model.decoder_step(&mut tape, x, &layers, feed, &memory, None, &mut None)?;
        let logits = output_logits(&mut tape, ctx, &self.model.attention)?;
        let mut scores = tape.value(logits).clone();
        if let Some(off) = logit_offset {
            for r in 0..scores.rows() {
                for (s, o) in scores.row_mut(r).iter_mut().zip(off) {
                    *s += o;
                }
            }
        }
        let mut attention = tape.value(alpha).clone();
        if enc.reversed {
            for r in 0..attention.rows() {
                attention.row_mut(r).reverse();
            }
        }
        Ok(StepOutput {
            log_probs: log_softmax_rows(&scores)?,
            state: DecoderState {
                layers: next.iter().map(|&(h, c)| (tape.value(h).clone(), tape.value(c).clone())).collect(),
                feed: tape.value(ctx).clone(),
            },
            attention,
        })
    }
}
