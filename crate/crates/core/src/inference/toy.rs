//! Small enumerable decoders for checking search against brute force.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Decoder, Step};
use crate::compute::ops::log_softmax_rows;
use crate::compute::Tensor;
use crate::corpus::vocab::{EOS_ID, INS_OPEN_ID};
use crate::error::ModelError;
use crate::trainer::mix;

/// A decoder whose next-token distribution is a fixed pseudo-random
/// function of the prefix. The state is the prefix of each row.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub vocab: usize,
    pub seed: u64,
    /// Logits are drawn uniformly from `[-spread, spread]`.
    pub spread: f64,
    /// Length of the fake source, for attention vectors.
    pub source_len: usize,
}

impl ToyModel {
    pub fn new(vocab: usize, seed: u64) -> ToyModel {
        assert!(vocab > EOS_ID as usize, "vocabulary must contain the end symbol");
        ToyModel { vocab, seed, spread: 3.0, source_len: 3 }
    }

    fn prefix_rng(&self, prefix: &[u32]) -> ChaCha8Rng {
        let h = prefix.iter().fold(mix(self.seed, prefix.len() as u64), |h, &t| mix(h, t as u64 + 1));
        ChaCha8Rng::seed_from_u64(h)
    }

    pub fn logits(&self, prefix: &[u32]) -> Vec<f64> {
        let mut rng = self.prefix_rng(prefix);
        (0..self.vocab).map(|_| rng.gen_range(-self.spread..=self.spread)).collect()
    }

    pub fn attention(&self, prefix: &[u32]) -> Vec<f64> {
        let mut rng = self.prefix_rng(prefix);
        let raw: Vec<f64> = (0..self.vocab + self.source_len).map(|_| rng.gen::<f64>()).skip(self.vocab).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / z).collect()
    }

    /// Log-probabilities after `prefix`, with an optional logit offset.
    pub fn log_probs(&self, prefix: &[u32], offset: Option<&[f64]>) -> Vec<f64> {
        let mut l = self.logits(prefix);
        if let Some(off) = offset {
            for (x, o) in l.iter_mut().zip(off) {
                *x += o;
            }
        }
        let n = l.len();
        log_softmax_rows(&Tensor::matrix(1, n, l).expect("shape")).expect("non-empty").into_data()
    }

    /// Total log-probability of a complete sequence.
    pub fn sequence_score(&self, tokens: &[u32]) -> f64 {
        (0..tokens.len()).map(|j| self.log_probs(&tokens[..j], None)[tokens[j] as usize]).sum()
    }
}

/// Per row: the prefix consumed so far, `None` before the start symbol.
pub type ToyState = Vec<Option<Vec<u32>>>;

impl Decoder for ToyModel {
    type Context = ();
    type State = ToyState;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn initial_state(&self, _: &(), rows: usize) -> ToyState {
        vec![None; rows]
    }

    fn step(&self, _: &(), prev: &[u32], state: &ToyState, offset: Option<&[f64]>) -> Result<Step<ToyState>, ModelError> {
        if prev.len() != state.len() {
            return Err(ModelError::Config("row count mismatch".into()));
        }
        let prefixes: Vec<Vec<u32>> = state
            .iter()
            .zip(prev)
            .map(|(p, &t)| match p {
                None => Vec::new(),
                Some(p) => {
                    let mut p = p.clone();
                    p.push(t);
                    p
                }
            })
            .collect();
        let lp: Vec<Vec<f64>> = prefixes.iter().map(|p| self.log_probs(p, offset)).collect();
        let att: Vec<Vec<f64>> = prefixes.iter().map(|p| self.attention(p)).collect();
        Ok(Step {
            log_probs: Tensor::from_rows(&lp)?,
            state: prefixes.into_iter().map(Some).collect(),
            attention: Tensor::from_rows(&att)?,
        })
    }

    fn select(&self, state: &ToyState, rows: &[usize]) -> ToyState {
        rows.iter().map(|&r| state[r].clone()).collect()
    }
}

/// Every sequence of at most `max_len` ids that ends in the end symbol
/// (and contains it nowhere else), with its log-probability.
pub fn enumerate_finished(model: &ToyModel, max_len: usize) -> Vec<(Vec<u32>, f64)> {
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<u32>, f64)> = vec![(vec![], 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        if prefix.len() == max_len {
            continue;
        }
        let lp = model.log_probs(&prefix, None);
        for (v, &l) in lp.iter().enumerate() {
            let mut p = prefix.clone();
            p.push(v as u32);
            if v as u32 == EOS_ID {
                out.push((p, score + l));
            } else {
                stack.push((p, score + l));
            }
        }
    }
    out
}

/// A decoder that either stops immediately or emits one insertion tag,
/// depending on a per-sentence margin: the tag wins iff
/// `margin + bias > 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct MarginStub;

impl MarginStub {
    pub const VOCAB: usize = 7;
}

impl Decoder for MarginStub {
    type Context = f64;
    /// Number of tokens emitted so far, per row.
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        Self::VOCAB
    }

    fn initial_state(&self, _: &f64, rows: usize) -> Vec<usize> {
        vec![0; rows]
    }

    fn step(&self, margin: &f64, _prev: &[u32], state: &Vec<usize>, offset: Option<&[f64]>) -> Result<Step<Vec<usize>>, ModelError> {
        let mut rows = Vec::new();
        for &n in state {
            let mut l = vec![-1e3; Self::VOCAB];
            l[EOS_ID as usize] = 0.0;
            if n == 0 {
                l[INS_OPEN_ID as usize] = *margin;
            }
            if let Some(off) = offset {
                for (x, o) in l.iter_mut().zip(off) {
                    *x += o;
                }
            }
            rows.push(l);
        }
        let log_probs = log_softmax_rows(&Tensor::from_rows(&rows)?)?;
        let next = state.iter().map(|n| n + 1).collect();
        Ok(Step { log_probs, state: next, attention: Tensor::filled(&[state.len(), 1], 1.0) })
    }

    fn select(&self, state: &Vec<usize>, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| state[r]).collect()
    }
}
