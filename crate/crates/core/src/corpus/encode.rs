use serde::{Deserialize, Serialize};

use super::annotate::{AnnotatedPair, Token};
use super::vocab::{CharVocab, Vocab, BOS_ID, EOS_ID};

/// Which pairs make up a training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Only pairs with at least one edit.
    EditsOnly,
    /// Every edited pair plus a seeded uniform sample of `n` unedited pairs.
    PlusSample { n: usize, seed: u64 },
    /// Everything.
    PlusAll,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub regime: Regime,
    pub max_sentence_tokens: usize,
    pub max_word_chars: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { regime: Regime::PlusAll, max_sentence_tokens: 50, max_word_chars: 35 }
    }
}

/// Model-ready ids for one pair.
///
/// The encoder side carries both word ids (unknowns substituted) and
/// character ids (no unknown words, only unknown characters); the model
/// picks whichever its input mode needs. The decoder side is always
/// word-level: `target_in` is `<s> t₁ … t_J`, `target_out` is `t₁ … t_J </s>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub source_words: Vec<u32>,
    pub source_chars: Vec<Vec<u32>>,
    pub target_in: Vec<u32>,
    pub target_out: Vec<u32>,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum FilterReason {
    /// Source or corrected sentence exceeds the token cap.
    Length { tokens: usize, cap: usize },
    EmptySource,
}

impl FilterReason {
    pub fn name(&self) -> &'static str {
        match self {
            FilterReason::Length { .. } => "length",
            FilterReason::EmptySource => "empty-source",
        }
    }
}

/// A pair left out of a dataset, kept for the audit log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FilterRecord {
    pub index: usize,
    pub reason: String,
    pub detail: String,
    pub text: String,
}

impl FilterRecord {
    fn new(index: usize, reason: &FilterReason, pair: &AnnotatedPair) -> FilterRecord {
        FilterRecord { index, reason: reason.name().to_string(), detail: format!("{reason:?}"), text: pair.serialize() }
    }
}

/// Encodes one pair, or says why it is filtered.
pub fn encode_pair(
    pair: &AnnotatedPair,
    vocab: &Vocab,
    chars: &CharVocab,
    spec: &DatasetSpec,
) -> Result<EncodedPair, FilterReason> {
    if let Some(reason) = filter_reason(pair, spec) {
        return Err(reason);
    }
    Ok(encode_unchecked(pair, vocab, chars, spec.max_word_chars))
}

/// Why `pair` would be left out of a dataset, if it would.
pub fn filter_reason(pair: &AnnotatedPair, spec: &DatasetSpec) -> Option<FilterReason> {
    if pair.source.is_empty() {
        return Some(FilterReason::EmptySource);
    }
    let longest = pair.source.len().max(pair.corrected().len());
    (longest > spec.max_sentence_tokens).then_some(FilterReason::Length { tokens: longest, cap: spec.max_sentence_tokens })
}

/// Splits `pairs` into those kept and audit records for those filtered.
pub fn filter_pairs(pairs: Vec<AnnotatedPair>, spec: &DatasetSpec) -> (Vec<AnnotatedPair>, Vec<FilterRecord>) {
    let mut kept = Vec::with_capacity(pairs.len());
    let mut dropped = Vec::new();
    for (index, p) in pairs.into_iter().enumerate() {
        match filter_reason(&p, spec) {
            None => kept.push(p),
            Some(reason) => dropped.push(FilterRecord::new(index, &reason, &p)),
        }
    }
    (kept, dropped)
}

pub(crate) fn encode_unchecked(pair: &AnnotatedPair, vocab: &Vocab, chars: &CharVocab, max_word_chars: usize) -> EncodedPair {
    let (source_words, source_chars) = encode_source(&pair.source, vocab, chars, max_word_chars);
    let t: Vec<u32> = pair.target.iter().map(|i| vocab.item_id(i)).collect();
    let mut target_in = Vec::with_capacity(t.len() + 1);
    target_in.push(BOS_ID);
    target_in.extend_from_slice(&t);
    let mut target_out = t;
    target_out.push(EOS_ID);
    EncodedPair { source_words, source_chars, target_in, target_out, label: pair.label }
}

/// Encoder-side ids for a bare sentence (used at decode time).
pub fn encode_source(
    source: &[Token],
    vocab: &Vocab,
    chars: &CharVocab,
    max_word_chars: usize,
) -> (Vec<u32>, Vec<Vec<u32>>) {
    let words = source.iter().map(|w| vocab.id(w)).collect();
    let chs = source.iter().map(|w| chars.encode_word(w, max_word_chars)).collect();
    (words, chs)
}

/// Encodes every pair, logging filtered ones with their reason.
pub fn encode_all(
    pairs: &[AnnotatedPair],
    vocab: &Vocab,
    chars: &CharVocab,
    spec: &DatasetSpec,
) -> (Vec<EncodedPair>, Vec<FilterRecord>) {
    let mut kept = Vec::with_capacity(pairs.len());
    let mut dropped = Vec::new();
    for (index, p) in pairs.iter().enumerate() {
        match encode_pair(p, vocab, chars, spec) {
            Ok(e) => kept.push(e),
            Err(reason) => dropped.push(FilterRecord::new(index, &reason, p)),
        }
    }
    (kept, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{build_vocab, UNK_ID};
    use crate::corpus::parse_annotated;

    #[test]
    fn in_vocab_ids_round_trip() {
        let pair = parse_annotated("We <del> was </del> <ins> were </ins> happy").unwrap();
        let vocab = build_vocab(std::slice::from_ref(&pair), 100);
        let chars = CharVocab::from_pairs(std::slice::from_ref(&pair));
        let e = encode_pair(&pair, &vocab, &chars, &DatasetSpec::default()).unwrap();
        let back: Vec<&str> = e.target_out[..e.target_out.len() - 1].iter().map(|&i| vocab.token(i)).collect();
        assert_eq!(back.join(" "), pair.serialize());
        let src: Vec<&str> = e.source_words.iter().map(|&i| vocab.token(i)).collect();
        assert_eq!(src.join(" "), "We was happy");
        assert_eq!(e.target_in[0], BOS_ID);
        assert_eq!(*e.target_out.last().unwrap(), EOS_ID);
    }

    #[test]
    fn oov_decoder_token_is_unknown_but_chars_are_kept() {
        let train = parse_annotated("a b").unwrap();
        let vocab = build_vocab(std::slice::from_ref(&train), 100);
        let chars = CharVocab::from_pairs(&[train]);
        let pair = parse_annotated("a zzz").unwrap();
        let e = encode_pair(&pair, &vocab, &chars, &DatasetSpec::default()).unwrap();
        assert_eq!(e.target_out[1], UNK_ID);
        assert_eq!(e.source_words[1], UNK_ID);
        // 'z' never seen: unknown char, but the word itself is still encoded
        assert_eq!(e.source_chars[1].len(), 3);
    }

    #[test]
    fn long_sentence_filtered_with_length_reason() {
        let line = vec!["w"; 51].join(" ");
        let pair = parse_annotated(&line).unwrap();
        let vocab = build_vocab(std::slice::from_ref(&pair), 10);
        let chars = CharVocab::from_pairs(std::slice::from_ref(&pair));
        let (kept, dropped) = encode_all(&[pair], &vocab, &chars, &DatasetSpec::default());
        assert!(kept.is_empty());
        assert_eq!(dropped[0].reason, "length");
    }

    #[test]
    fn long_words_truncated() {
        let w: String = "x".repeat(40);
        let pair = parse_annotated(&w).unwrap();
        let vocab = build_vocab(std::slice::from_ref(&pair), 10);
        let chars = CharVocab::from_pairs(std::slice::from_ref(&pair));
        let e = encode_pair(&pair, &vocab, &chars, &DatasetSpec::default()).unwrap();
        assert_eq!(e.source_chars[0].len(), 35);
    }
}
