use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{decode_with, DecodeOptions, Hypothesis};
use crate::corpus::vocab::{EOS_ID, UNK_ID};
use crate::corpus::{derive_source, encode_source, CharVocab, Tag, TargetItem, Token, Vocab};
use crate::error::ModelError;
use crate::seq2seq::{FrozenEncDec, SourceInput};

/// Index of the largest weight, lowest index on ties.
fn argmax(w: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in w.iter().enumerate() {
        if x > w[best] {
            best = i;
        }
    }
    best
}

/// Maps generated ids to tokens, substituting each unknown with the source
/// token under that step's strongest attention weight. A trailing end
/// symbol is dropped.
pub fn replace_unknowns(ids: &[u32], attention: &[Vec<f64>], source: &[Token], vocab: &Vocab) -> Vec<String> {
    let ids = match ids.last() {
        Some(&EOS_ID) => &ids[..ids.len() - 1],
        _ => ids,
    };
    ids.iter()
        .enumerate()
        .map(|(j, &id)| {
            if id == UNK_ID {
                if let Some(tok) = attention.get(j).and_then(|a| source.get(argmax(a))) {
                    return tok.to_string();
                }
            }
            vocab.token(id).to_string()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    /// The decoded target contains an annotation tag.
    pub label: bool,
    /// Removing the edits from the decoded target does not give back the
    /// source.
    pub drift: bool,
}

pub fn classify_from_decode(source: &[Token], decoded: &[String]) -> Classification {
    let label = decoded.iter().any(|t| Tag::parse(t).is_some());
    let items: Option<Vec<TargetItem>> = decoded
        .iter()
        .map(|t| match Tag::parse(t) {
            Some(tag) => Some(TargetItem::Tag(tag)),
            None => Token::new(t.as_str()).ok().map(TargetItem::Word),
        })
        .collect();
    let drift = items.is_none_or(|items| derive_source(&items) != source);
    Classification { label, drift }
}

/// One decoded sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub label: bool,
    pub decoded: String,
    /// Source position with the largest attention weight, per output step.
    pub attention: Vec<usize>,
    pub drift: bool,
    pub score: f64,
}

impl DecodeRecord {
    pub fn from_hypothesis(id: &str, source: &[Token], h: &Hypothesis, vocab: &Vocab) -> DecodeRecord {
        let words = replace_unknowns(&h.tokens, &h.attention, source, vocab);
        let c = classify_from_decode(source, &words);
        DecodeRecord {
            id: id.to_string(),
            label: c.label,
            decoded: words.join(" "),
            attention: h.attention.iter().map(|a| argmax(a)).collect(),
            drift: c.drift,
            score: h.score,
        }
    }
}

/// Decodes `(id, source)` sentences independently, in parallel, returning
/// records in input order.
pub fn decode_corpus(
    model: &FrozenEncDec<'_>,
    vocab: &Vocab,
    chars: &CharVocab,
    sentences: &[(String, Vec<Token>)],
    opts: &DecodeOptions,
) -> Result<Vec<DecodeRecord>, ModelError> {
    let max_chars = model.model.config.front.charcnn.max_word_chars;
    sentences
        .par_iter()
        .map(|(id, source)| {
            let (words, chs) = encode_source(source, vocab, chars, max_chars);
            let enc = model.encode(SourceInput { words: &words, chars: &chs })?;
            let h = decode_with(model, &enc, source.len(), opts)?;
            Ok(DecodeRecord::from_hypothesis(id, source, &h, vocab))
        })
        .collect()
}
