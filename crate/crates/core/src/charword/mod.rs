//! Word-representation front ends: a plain embedding table (Word model) or
//! a CharCNN followed by highway layers (Char model), one per side.

mod charcnn;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use charcnn::{charcnn_forward, highway_forward, pad_word, CharCnnConfig, CharCnnParams, HighwayParams};

use crate::compute::{NodeId, ParameterStore, Tape, Tensor};
use crate::corpus::vocab::{is_tag_id, INS_OPEN_ID};
use crate::corpus::{CharVocab, Vocab};
use crate::error::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMode {
    Word,
    Char,
}

impl FromStr for InputMode {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "word" => Ok(InputMode::Word),
            "char" => Ok(InputMode::Char),
            _ => Err(ModelError::Config(format!("unknown input mode `{s}`"))),
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Word => "word",
            InputMode::Char => "char",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn prefix(self) -> &'static str {
        match self {
            Side::Encoder => "enc",
            Side::Decoder => "dec",
        }
    }
}

/// How the four annotation tags enter the decoder in char mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TagEmbedding {
    /// Through the CharCNN like any other word (`<ins>` is spelled out).
    CharCnn,
    /// A dedicated learned vector per tag in place of the CharCNN features.
    Dedicated,
}

impl FromStr for TagEmbedding {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "charcnn" => Ok(TagEmbedding::CharCnn),
            "dedicated" => Ok(TagEmbedding::Dedicated),
            _ => Err(ModelError::Config(format!("unknown tag embedding `{s}`"))),
        }
    }
}

impl fmt::Display for TagEmbedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TagEmbedding::CharCnn => "charcnn",
            TagEmbedding::Dedicated => "dedicated",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontEndConfig {
    pub mode: InputMode,
    /// Word-embedding width `m` (word mode).
    pub word_dim: usize,
    pub charcnn: CharCnnConfig,
    pub tag_embedding: TagEmbedding,
}

impl FrontEndConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self.mode {
            InputMode::Word if self.word_dim == 0 => Err(ModelError::Config("word_dim must be positive".into())),
            InputMode::Word => Ok(()),
            InputMode::Char => self.charcnn.validate(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.mode {
            InputMode::Word => self.word_dim,
            InputMode::Char => self.charcnn.feature_maps,
        }
    }
}

/// A `|V| × m` embedding table, trainable or frozen.
#[derive(Clone, Debug)]
pub struct WordEmbedding {
    pub table: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub frozen: bool,
}

impl WordEmbedding {
    pub fn new(name: &str, vocab_size: usize, dim: usize, frozen: bool) -> Self {
        WordEmbedding { table: name.to_string(), vocab_size, dim, frozen }
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<(), ModelError> {
        store.insert(&self.table, Tensor::zeros(&[self.vocab_size, self.dim]))?;
        Ok(())
    }

    fn node(&self, tape: &mut Tape<'_>) -> Result<NodeId, ModelError> {
        Ok(if self.frozen { tape.frozen_param(&self.table)? } else { tape.param(&self.table)? })
    }
}

/// Embedding rows for `ids`, `ids.len() × m`. Repeated ids accumulate
/// gradient into the same row; a frozen table receives none.
pub fn embed_words(tape: &mut Tape<'_>, ids: &[u32], emb: &WordEmbedding) -> Result<NodeId, ModelError> {
    let table = emb.node(tape)?;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    Ok(tape.gather(table, &idx)?)
}

pub fn embed_word(tape: &mut Tape<'_>, id: u32, emb: &WordEmbedding) -> Result<NodeId, ModelError> {
    embed_words(tape, &[id], emb)
}

/// Per-position input for one side of the model.
#[derive(Clone, Copy, Debug)]
pub enum SideInput<'a> {
    Words(&'a [u32]),
    /// Character ids per position; `ids` are the matching word ids, used to
    /// recognise tags when they have dedicated embeddings.
    Chars { ids: &'a [u32], chars: &'a [Vec<u32>] },
}

/// The input layer of one side (encoder or decoder).
#[derive(Clone, Debug)]
pub struct FrontEnd {
    pub side: Side,
    pub config: FrontEndConfig,
    word: Option<WordEmbedding>,
    cnn: Option<CharCnnParams>,
    tag_table: Option<String>,
}

impl FrontEnd {
    pub fn new(side: Side, config: &FrontEndConfig, vocab_size: usize) -> Self {
        let p = side.prefix();
        let (word, cnn, tag_table) = match config.mode {
            InputMode::Word => (Some(WordEmbedding::new(&format!("{p}.emb"), vocab_size, config.word_dim, false)), None, None),
            InputMode::Char => {
                let tags = (side == Side::Decoder && config.tag_embedding == TagEmbedding::Dedicated)
                    .then(|| format!("{p}.tag_emb"));
                (None, Some(CharCnnParams::new(&format!("{p}.cnn"), config.charcnn.clone())), tags)
            }
        };
        FrontEnd { side, config: config.clone(), word, cnn, tag_table }
    }

    pub fn register(&self, store: &mut ParameterStore, n_chars: usize) -> Result<(), ModelError> {
        if let Some(w) = &self.word {
            w.register(store)?;
        }
        if let Some(c) = &self.cnn {
            c.register(store, n_chars)?;
        }
        if let Some(t) = &self.tag_table {
            store.insert(t, Tensor::zeros(&[4, self.config.charcnn.feature_maps]))?;
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn word_embedding(&self) -> Option<&WordEmbedding> {
        self.word.as_ref()
    }
}

/// Input vectors for a sequence, one row per position: word embeddings in
/// word mode, CharCNN + highway features in char mode.
pub fn make_input_sequence(tape: &mut Tape<'_>, fe: &FrontEnd, input: SideInput<'_>) -> Result<NodeId, ModelError> {
    match (fe.config.mode, input) {
        (InputMode::Word, SideInput::Words(ids)) => {
            if ids.is_empty() {
                return Err(ModelError::Empty("input sequence"));
            }
            embed_words(tape, ids, fe.word.as_ref().expect("word mode has a table"))
        }
        (InputMode::Char, SideInput::Chars { ids, chars }) => {
            if ids.len() != chars.len() {
                return Err(ModelError::Config(format!("{} word ids but {} char sequences", ids.len(), chars.len())));
            }
            let cnn = fe.cnn.as_ref().expect("char mode has a CNN");
            let mut z = charcnn_forward(tape, chars, cnn)?;
            if let Some(name) = &fe.tag_table {
                let mask: Vec<f64> = ids.iter().map(|&i| if is_tag_id(i) { 1.0 } else { 0.0 }).collect();
                if mask.iter().any(|&m| m > 0.0) {
                    let rows: Vec<usize> =
                        ids.iter().map(|&i| if is_tag_id(i) { (i - INS_OPEN_ID) as usize } else { 0 }).collect();
                    let table = tape.param(name)?;
                    let tags = tape.gather(table, &rows)?;
                    z = tape.blend(tags, z, &mask)?;
                }
            }
            highway_forward(tape, z, &cnn.highway)
        }
        (mode, _) => Err(ModelError::Config(format!("{} front end given mismatched input", mode))),
    }
}

/// Character ids of every vocabulary entry, indexed by word id. Used to
/// feed decoder-side words (and tags) through the CharCNN.
pub fn vocab_char_table(vocab: &Vocab, chars: &CharVocab, max_chars: usize) -> Vec<Vec<u32>> {
    vocab.tokens().iter().map(|t| chars.encode_word(t, max_chars)).collect()
}

/// Copies vectors from a whitespace-separated `token v1 … vm` text file
/// into the rows of `table` whose token appears in `vocab`. A leading
/// `count dim` header line is skipped. Returns the number of rows set.
pub fn load_pretrained(text: &str, vocab: &Vocab, table: &mut Tensor) -> Result<usize, ModelError> {
    let (rows, dim) = table.dims();
    if rows != vocab.len() {
        return Err(ModelError::Config(format!("table has {rows} rows, vocabulary {}", vocab.len())));
    }
    let mut seen = vec![false; rows];
    let mut matched = 0;
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if lineno == 0 && values.len() == 1 {
            continue;
        }
        if values.len() != dim {
            return Err(ModelError::Config(format!(
                "pretrained line {}: {} values, expected {dim}",
                lineno + 1,
                values.len()
            )));
        }
        if !vocab.contains(token) {
            continue;
        }
        let id = vocab.id(token) as usize;
        if seen[id] {
            continue;
        }
        let row = table.row_mut(id);
        for (dst, v) in row.iter_mut().zip(&values) {
            *dst = v
                .parse()
                .map_err(|_| ModelError::Config(format!("pretrained line {}: bad number `{v}`", lineno + 1)))?;
        }
        seen[id] = true;
        matched += 1;
    }
    Ok(matched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::UNK_ID;
    use crate::corpus::{build_vocab, parse_annotated};

    fn table_store(frozen: bool) -> (ParameterStore, WordEmbedding) {
        let emb = WordEmbedding::new("emb", 4, 2, frozen);
        let mut store = ParameterStore::new();
        emb.register(&mut store).unwrap();
        *store.value_mut(store.id("emb").unwrap()) =
            Tensor::matrix(4, 2, vec![9.0, 9.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        (store, emb)
    }

    #[test]
    fn unknown_id_gets_the_unknown_row() {
        let (store, emb) = table_store(false);
        let mut tape = Tape::new(&store);
        let x = embed_word(&mut tape, UNK_ID, &emb).unwrap();
        assert_eq!(tape.value(x).data(), &[9.0, 9.5]);
        assert!(embed_word(&mut tape, 4, &emb).is_err());
    }

    #[test]
    fn repeated_ids_accumulate() {
        let (store, emb) = table_store(false);
        let mut tape = Tape::new(&store);
        let x = embed_words(&mut tape, &[1, 1, 2], &emb).unwrap();
        let k = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let prod = tape.mul(x, k).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        let gt = g.get(store.id("emb").unwrap()).unwrap();
        assert_eq!(gt.row(1), &[4.0, 6.0]);
        assert_eq!(gt.row(2), &[5.0, 6.0]);
        assert_eq!(gt.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn static_table_gets_no_gradient() {
        let (store, emb) = table_store(true);
        let mut tape = Tape::new(&store);
        let x = embed_words(&mut tape, &[1, 2], &emb).unwrap();
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(store.id("emb").unwrap()).is_none());
    }

    fn char_config(tags: TagEmbedding) -> FrontEndConfig {
        FrontEndConfig {
            mode: InputMode::Char,
            word_dim: 0,
            charcnn: CharCnnConfig { char_dim: 3, filter_width: 2, feature_maps: 4, highway_layers: 1, max_word_chars: 35 },
            tag_embedding: tags,
        }
    }

    fn fill(store: &mut ParameterStore, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn shapes_per_mode() {
        let word_cfg = FrontEndConfig { mode: InputMode::Word, word_dim: 5, ..char_config(TagEmbedding::CharCnn) };
        let fe = FrontEnd::new(Side::Encoder, &word_cfg, 10);
        let mut store = ParameterStore::new();
        fe.register(&mut store, 8).unwrap();
        let mut tape = Tape::new(&store);
        let x = make_input_sequence(&mut tape, &fe, SideInput::Words(&[1, 2, 3])).unwrap();
        assert_eq!(tape.value(x).dims(), (3, 5));
        let chars = vec![vec![2u32]];
        assert!(matches!(
            make_input_sequence(&mut tape, &fe, SideInput::Chars { ids: &[1], chars: &chars }),
            Err(ModelError::Config(_))
        ));

        let fe = FrontEnd::new(Side::Encoder, &char_config(TagEmbedding::CharCnn), 10);
        let mut store = ParameterStore::new();
        fe.register(&mut store, 8).unwrap();
        let mut tape = Tape::new(&store);
        let chars = vec![vec![2, 3, 4], vec![5]];
        let x = make_input_sequence(&mut tape, &fe, SideInput::Chars { ids: &[7, 8], chars: &chars }).unwrap();
        assert_eq!(tape.value(x).dims(), (2, 4));
    }

    #[test]
    fn encoder_and_decoder_parameters_are_disjoint() {
        let cfg = char_config(TagEmbedding::CharCnn);
        let enc = FrontEnd::new(Side::Encoder, &cfg, 10);
        let dec = FrontEnd::new(Side::Decoder, &cfg, 10);
        let mut store = ParameterStore::new();
        enc.register(&mut store, 8).unwrap();
        dec.register(&mut store, 8).unwrap();
        fill(&mut store, 1);
        let chars = vec![vec![2, 3, 4]];
        let input = SideInput::Chars { ids: &[9], chars: &chars };
        let before = {
            let mut tape = Tape::new(&store);
            let x = make_input_sequence(&mut tape, &dec, input).unwrap();
            tape.value(x).clone()
        };
        let f = store.id("enc.cnn.filters").unwrap();
        store.value_mut(f).data_mut()[0] += 1.0;
        let mut tape = Tape::new(&store);
        let x = make_input_sequence(&mut tape, &dec, input).unwrap();
        assert_eq!(tape.value(x), &before);
    }

    #[test]
    fn dedicated_tags_replace_cnn_features() {
        let cfg = FrontEndConfig {
            charcnn: CharCnnConfig { highway_layers: 0, ..char_config(TagEmbedding::Dedicated).charcnn },
            ..char_config(TagEmbedding::Dedicated)
        };
        let dec = FrontEnd::new(Side::Decoder, &cfg, 10);
        let mut store = ParameterStore::new();
        dec.register(&mut store, 8).unwrap();
        fill(&mut store, 2);
        let chars = vec![vec![2, 3], vec![4, 5]];
        let mut tape = Tape::new(&store);
        let x = make_input_sequence(&mut tape, &dec, SideInput::Chars { ids: &[INS_OPEN_ID + 1, 9], chars: &chars }).unwrap();
        assert_eq!(tape.value(x).row(0), store.get("dec.tag_emb").unwrap().row(1));
    }

    #[test]
    fn pretrained_rows_are_copied() {
        let pair = parse_annotated("the cat").unwrap();
        let vocab = build_vocab(&[pair], 10);
        let mut table = Tensor::zeros(&[vocab.len(), 2]);
        let n = load_pretrained("3 2\nthe 0.5 -1\ndog 1 1\ncat 2 3\n", &vocab, &mut table).unwrap();
        assert_eq!(n, 2);
        assert_eq!(table.row(vocab.id("cat") as usize), &[2.0, 3.0]);
        assert!(load_pretrained("the 1 2 3\n", &vocab, &mut table).is_err());
    }
}
