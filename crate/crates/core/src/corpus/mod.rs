//! Edit-annotated sentence pairs: parsing, tokenization, vocabularies,
//! model encodings, training regimes, and synthetic error injection.

mod annotate;
mod encode;
mod regime;
pub mod synth;
mod tokenize;
pub mod vocab;

pub use annotate::{apply_corrections, derive_source, parse_annotated, validate_tags, AnnotatedPair, Tag, TargetItem, Token};
pub use encode::{encode_all, encode_pair, encode_source, filter_pairs, filter_reason, DatasetSpec, EncodedPair, FilterReason, FilterRecord, Regime};
pub use regime::{assemble_regime, classifier_examples, read_manifest, write_manifest, ManifestRecord, RegimeCounts};
pub use synth::{synthesize_errors, ErrorRule, SentenceGenerator};
pub use tokenize::{tokenize, Tokenizer};
pub use vocab::{build_vocab, CharVocab, Vocab};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed annotation at token {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("ambiguous markup `{token}` at token {offset}")]
    AmbiguousMarkup { offset: usize, token: String },
    #[error("empty line")]
    EmptyLine,
    #[error("invalid token {0:?}")]
    InvalidToken(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("requested {requested} unedited pairs but only {available} exist")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("synthesis: {0}")]
    Synthesis(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<CorpusError>,
    },
}
