//! Stacked-LSTM encoder-decoder with multiplicative attention and input
//! feeding, over either word or character-aware inputs.

mod attention;
mod frozen;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{attend, output_logits, AttentionParams, Memory};
pub use frozen::{DecoderState, EncodedSource, FrozenEncDec, StepOutput};

use crate::charword::{
    make_input_sequence, vocab_char_table, CharCnnConfig, FrontEnd, FrontEndConfig, InputMode, Side, SideInput,
    TagEmbedding,
};
use crate::compute::{lstm_cell, LstmParams, NodeId, ParameterStore, Tape, Tensor};
use crate::corpus::vocab::EOS_ID;
use crate::corpus::{CharVocab, EncodedPair, Vocab};
use crate::error::ModelError;
use crate::trainer::{ModelKind, Trainable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncDecConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Dropout between stacked LSTM layers, training only.
    pub dropout: f64,
    pub front: FrontEndConfig,
    pub reverse_source: bool,
    /// Constant added to every forget-gate pre-activation.
    pub forget_bias: f64,
}

impl EncDecConfig {
    pub fn full(mode: InputMode) -> Self {
        EncDecConfig {
            layers: 4,
            hidden: 1000,
            dropout: 0.3,
            front: FrontEndConfig {
                mode,
                word_dim: 1000,
                charcnn: CharCnnConfig::default(),
                tag_embedding: TagEmbedding::CharCnn,
            },
            reverse_source: false,
            forget_bias: 1.0,
        }
    }

    pub fn desk(mode: InputMode) -> Self {
        EncDecConfig {
            layers: 2,
            hidden: 64,
            front: FrontEndConfig {
                mode,
                word_dim: 64,
                charcnn: CharCnnConfig::desk(),
                tag_embedding: TagEmbedding::CharCnn,
            },
            ..Self::full(mode)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(ModelError::Config("layers and hidden size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.front.validate()
    }
}

/// Encoder-side ids of one sentence.
#[derive(Clone, Copy, Debug)]
pub struct SourceInput<'a> {
    pub words: &'a [u32],
    pub chars: &'a [Vec<u32>],
}

impl<'a> From<&'a EncodedPair> for SourceInput<'a> {
    fn from(p: &'a EncodedPair) -> Self {
        SourceInput { words: &p.source_words, chars: &p.source_chars }
    }
}

/// The encoder-decoder's structure: parameter names and sizes. Values live
/// in a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct EncDec {
    pub config: EncDecConfig,
    pub vocab_size: usize,
    pub n_chars: usize,
    pub(crate) enc_front: FrontEnd,
    pub(crate) dec_front: FrontEnd,
    pub(crate) enc_layers: Vec<LstmParams>,
    pub(crate) dec_layers: Vec<LstmParams>,
    pub attention: AttentionParams,
    /// Character ids per output-vocabulary entry (char mode only).
    pub(crate) dec_chars: Vec<Vec<u32>>,
}

/// Encoder output for a batch of `B` sentences padded to `I` steps.
///
/// Memory row `t·B + b` holds the top-layer state of sentence `b` at step
/// `t`; `final_state` holds each layer's `(h, c)` at each sentence's last
/// real step.
pub struct EncoderStates {
    pub memory: Memory,
    pub final_state: Vec<(NodeId, NodeId)>,
    pub lengths: Vec<usize>,
    pub steps: usize,
}

impl EncoderStates {
    /// Attention mask for decoder rows whose sentences are `row_source`.
    pub fn mask(&self, row_source: &[usize]) -> Vec<Vec<bool>> {
        let b = self.lengths.len();
        row_source
            .iter()
            .map(|&s| (0..self.steps * b).map(|col| col % b == s && col / b < self.lengths[s]).collect())
            .collect()
    }
}

impl EncDec {
    pub fn new(config: EncDecConfig, vocab: &Vocab, chars: &CharVocab) -> Result<EncDec, ModelError> {
        let dec_chars = match config.front.mode {
            InputMode::Char => vocab_char_table(vocab, chars, config.front.charcnn.max_word_chars),
            InputMode::Word => Vec::new(),
        };
        EncDec::with_sizes(config, vocab.len(), chars.len(), dec_chars)
    }

    /// Builds the structure from raw sizes; `dec_chars` must have one entry
    /// per output id in char mode.
    pub fn with_sizes(
        config: EncDecConfig,
        vocab_size: usize,
        n_chars: usize,
        dec_chars: Vec<Vec<u32>>,
    ) -> Result<EncDec, ModelError> {
        config.validate()?;
        if config.front.mode == InputMode::Char && dec_chars.len() != vocab_size {
            return Err(ModelError::Config(format!(
                "char table has {} entries for {} output ids",
                dec_chars.len(),
                vocab_size
            )));
        }
        let n = config.hidden;
        let d = config.front.output_dim();
        let enc_layers =
            (0..config.layers).map(|l| LstmParams::new(&format!("enc.lstm{l}"), if l == 0 { d } else { n }, n, config.forget_bias)).collect();
        let dec_layers = (0..config.layers)
            .map(|l| LstmParams::new(&format!("dec.lstm{l}"), if l == 0 { d + n } else { n }, n, config.forget_bias))
            .collect();
        Ok(EncDec {
            enc_front: FrontEnd::new(Side::Encoder, &config.front, vocab_size),
            dec_front: FrontEnd::new(Side::Decoder, &config.front, vocab_size),
            enc_layers,
            dec_layers,
            attention: AttentionParams::new(n, vocab_size),
            config,
            vocab_size,
            n_chars,
            dec_chars,
        })
    }

    /// Inserts every parameter, zero-valued, into `store`.
    pub fn register(&self, store: &mut ParameterStore) -> Result<(), ModelError> {
        self.enc_front.register(store, self.n_chars)?;
        self.dec_front.register(store, self.n_chars)?;
        for l in self.enc_layers.iter().chain(&self.dec_layers) {
            l.register(store)?;
        }
        self.attention.register(store)
    }

    /// A fresh store holding this model's parameters, all zero.
    pub fn new_store(&self) -> Result<ParameterStore, ModelError> {
        let mut store = ParameterStore::new();
        self.register(&mut store)?;
        Ok(store)
    }

    fn dropout(&self, tape: &mut Tape<'_>, x: NodeId, rng: &mut Option<&mut ChaCha8Rng>) -> Result<NodeId, ModelError> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => Ok(tape.dropout(x, self.config.dropout, *r)?),
            _ => Ok(x),
        }
    }

    /// Decoder input vectors for the given output ids, one row each.
    pub(crate) fn decoder_inputs(&self, tape: &mut Tape<'_>, ids: &[u32]) -> Result<NodeId, ModelError> {
        match self.config.front.mode {
            InputMode::Word => make_input_sequence(tape, &self.dec_front, SideInput::Words(ids)),
            InputMode::Char => {
                let chars: Vec<Vec<u32>> = ids.iter().map(|&i| self.dec_chars[i as usize].clone()).collect();
                make_input_sequence(tape, &self.dec_front, SideInput::Chars { ids, chars: &chars })
            }
        }
    }

    /// Runs the encoder over a batch. `rng` enables dropout (training).
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        sources: &[SourceInput<'_>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderStates, ModelError> {
        if sources.is_empty() {
            return Err(ModelError::Empty("source batch"));
        }
        let b = sources.len();
        let n = self.config.hidden;
        let mut words = Vec::new();
        let mut chars = Vec::new();
        let mut offsets = Vec::with_capacity(b);
        let mut lengths = Vec::with_capacity(b);
        for s in sources {
            if s.words.is_empty() {
                return Err(ModelError::Empty("source sentence"));
            }
            offsets.push(words.len());
            lengths.push(s.words.len());
            let order: Vec<usize> = if self.config.reverse_source {
                (0..s.words.len()).rev().collect()
            } else {
                (0..s.words.len()).collect()
            };
            for i in order {
                words.push(s.words[i]);
                if self.config.front.mode == InputMode::Char {
                    chars.push(s.chars.get(i).cloned().ok_or(ModelError::Config("source is missing char ids".into()))?);
                }
            }
        }
        let input = match self.config.front.mode {
            InputMode::Word => SideInput::Words(&words),
            InputMode::Char => SideInput::Chars { ids: &words, chars: &chars },
        };
        let emb = make_input_sequence(tape, &self.enc_front, input)?;
        let steps = *lengths.iter().max().unwrap();
        let zeros = tape.constant(Tensor::zeros(&[b, n]));
        let mut state: Vec<(NodeId, NodeId)> = vec![(zeros, zeros); self.config.layers];
        let mut tops = Vec::with_capacity(steps);
        for t in 0..steps {
            let idx: Vec<usize> = (0..b).map(|k| offsets[k] + t.min(lengths[k] - 1)).collect();
            let live: Vec<f64> = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
            let padded = live.contains(&0.0);
            let mut x = tape.gather(emb, &idx)?;
            for (l, params) in self.enc_layers.iter().enumerate() {
                if l > 0 {
                    x = self.dropout(tape, x, &mut rng)?;
                }
                let (h_prev, c_prev) = state[l];
                let (mut h, mut c) = lstm_cell(tape, x, h_prev, c_prev, params)?;
                if padded {
                    h = tape.blend(h, h_prev, &live)?;
                    c = tape.blend(c, c_prev, &live)?;
                }
                state[l] = (h, c);
                x = h;
            }
            tops.push(x);
        }
        let states = tape.vstack(&tops)?;
        let memory = Memory::new(tape, states, &self.attention)?;
        Ok(EncoderStates { memory, final_state: state, lengths, steps })
    }

    /// One decoder step for a batch of rows: the LSTM stack consumes
    /// `[x; feed]`, attention produces the new context. Returns
    /// `(new state, context, α)`.
    #[allow(clippy::type_complexity)]
    pub(crate) fn decoder_step(
        &self,
        tape: &mut Tape<'_>,
        x: NodeId,
        state: &[(NodeId, NodeId)],
        feed: NodeId,
        memory: &Memory,
        mask: Option<&[Vec<bool>]>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<(NodeId, NodeId)>, NodeId, NodeId), ModelError> {
        let mut input = tape.concat_cols(&[x, feed])?;
        let mut next = Vec::with_capacity(state.len());
        for (l, params) in self.dec_layers.iter().enumerate() {
            if l > 0 {
                input = self.dropout(tape, input, rng)?;
            }
            let (h, c) = lstm_cell(tape, input, state[l].0, state[l].1, params)?;
            next.push((h, c));
            input = h;
        }
        let (ctx, alpha) = attend(tape, input, memory, mask, &self.attention)?;
        Ok((next, ctx, alpha))
    }

    /// Summed teacher-forced negative log-likelihood over a batch and the
    /// number of scored target positions.
    pub fn batch_nll(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&EncodedPair],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, usize), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Empty("batch"));
        }
        let sources: Vec<SourceInput<'_>> = batch.iter().map(|p| SourceInput::from(*p)).collect();
        let enc = self.encode(tape, &sources, rng.as_deref_mut())?;
        let b = batch.len();
        let mask = enc.mask(&(0..b).collect::<Vec<_>>());
        let need_mask = b > 1 || enc.lengths.iter().any(|&l| l < enc.steps);

        let mut uniq: Vec<u32> = batch.iter().flat_map(|p| p.target_in.iter().copied()).collect();
        uniq.sort_unstable();
        uniq.dedup();
        let emb = self.decoder_inputs(tape, &uniq)?;
        let pos = |id: u32| uniq.binary_search(&id).expect("id collected above");

        let steps = batch.iter().map(|p| p.target_out.len()).max().unwrap();
        let tokens: usize = batch.iter().map(|p| p.target_out.len()).sum();
        let mut state = enc.final_state.clone();
        let mut feed = tape.constant(Tensor::zeros(&[b, self.config.hidden]));
        let mut total: Option<NodeId> = None;
        for j in 0..steps {
            let idx: Vec<usize> = batch.iter().map(|p| pos(*p.target_in.get(j).unwrap_or(&p.target_in[0]))).collect();
            let x = tape.gather(emb, &idx)?;
            let m = if need_mask { Some(mask.as_slice()) } else { None };
            let (next, ctx, _) = self.decoder_step(tape, x, &state, feed, &enc.memory, m, &mut rng)?;
            state = next;
            feed = ctx;
            let logits = output_logits(tape, ctx, &self.attention)?;
            let targets: Vec<usize> = batch.iter().map(|p| *p.target_out.get(j).unwrap_or(&EOS_ID) as usize).collect();
            let weights: Vec<f64> = batch.iter().map(|p| if j < p.target_out.len() { 1.0 } else { 0.0 }).collect();
            let ce = tape.cross_entropy(logits, &targets, &weights)?;
            total = Some(match total {
                Some(t) => tape.add(t, ce)?,
                None => ce,
            });
        }
        Ok((total.expect("at least one step"), tokens))
    }
}

impl Trainable for EncDec {
    type Example = EncodedPair;

    fn kind(&self) -> ModelKind {
        match self.config.front.mode {
            InputMode::Word => ModelKind::Word,
            InputMode::Char => ModelKind::Char,
        }
    }

    fn register(&self, store: &mut ParameterStore) -> Result<(), ModelError> {
        EncDec::register(self, store)
    }

    fn example_len(&self, ex: &EncodedPair) -> usize {
        ex.source_words.len() + ex.target_out.len()
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&EncodedPair],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, usize), ModelError> {
        self.batch_nll(tape, batch, rng)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "encdec": self.config, "vocab_size": self.vocab_size, "n_chars": self.n_chars })
    }
}

/// Mean teacher-forced NLL per target position (`ln` perplexity) and the
/// number of positions.
pub fn sequence_loss(
    tape: &mut Tape<'_>,
    model: &EncDec,
    batch: &[&EncodedPair],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(NodeId, usize), ModelError> {
    let (sum, tokens) = model.batch_nll(tape, batch, rng)?;
    Ok((tape.scale(sum, 1.0 / tokens as f64), tokens))
}
