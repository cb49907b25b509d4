use std::collections::HashMap;

use super::annotate::{AnnotatedPair, Tag, TargetItem};
use super::CorpusError;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Reserved ids, fixed for every vocabulary.
pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const INS_OPEN_ID: u32 = 3;
pub const INS_CLOSE_ID: u32 = 4;
pub const DEL_OPEN_ID: u32 = 5;
pub const DEL_CLOSE_ID: u32 = 6;
pub const TAG_IDS: [u32; 4] = [INS_OPEN_ID, INS_CLOSE_ID, DEL_OPEN_ID, DEL_CLOSE_ID];
pub const RESERVED: [&str; 7] = [UNK, BOS, EOS, "<ins>", "</ins>", "<del>", "</del>"];

pub fn tag_id(tag: Tag) -> u32 {
    match tag {
        Tag::InsOpen => INS_OPEN_ID,
        Tag::InsClose => INS_CLOSE_ID,
        Tag::DelOpen => DEL_OPEN_ID,
        Tag::DelClose => DEL_CLOSE_ID,
    }
}

pub fn is_tag_id(id: u32) -> bool {
    (INS_OPEN_ID..=DEL_CLOSE_ID).contains(&id)
}

/// Capped word vocabulary. Ids `0..7` are the reserved symbols
/// (`<unk> <s> </s> <ins> </ins> <del> </del>`), the rest follow frequency
/// rank with ties broken by first occurrence in the corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, freqs: Vec<u64>) -> Result<Vocab, CorpusError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(CorpusError::Vocab(format!("duplicate entry `{t}`")));
            }
        }
        Ok(Vocab { tokens, freqs, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Corpus frequency per id (0 for reserved symbols and loaded files).
    pub fn freq(&self, id: u32) -> u64 {
        self.freqs[id as usize]
    }

    pub fn item_id(&self, item: &TargetItem) -> u32 {
        match item {
            TargetItem::Word(w) => self.id(w),
            TargetItem::Tag(t) => tag_id(*t),
        }
    }

    /// One token per line in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_str(text: &str) -> Result<Vocab, CorpusError> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(CorpusError::Vocab("file must start with the reserved symbols".into()));
        }
        let freqs = vec![0; tokens.len()];
        Vocab::from_tokens(tokens, freqs)
    }
}

/// Counts word tokens over the annotated targets (which contain every source
/// and every inserted word exactly once) and keeps the `cap` most frequent.
pub fn build_vocab(pairs: &[AnnotatedPair], cap: usize) -> Vocab {
    let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
    let mut order = 0usize;
    for pair in pairs {
        for item in &pair.target {
            if let TargetItem::Word(w) = item {
                if RESERVED.contains(&w.as_str()) {
                    continue;
                }
                let e = counts.entry(w.as_str()).or_insert_with(|| {
                    order += 1;
                    (0, order)
                });
                e.0 += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, u64, usize)> = counts.into_iter().map(|(w, (c, o))| (w, c, o)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(cap);
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut freqs = vec![0; RESERVED.len()];
    for (w, c, _) in ranked {
        tokens.push(w.to_string());
        freqs.push(c);
    }
    Vocab::from_tokens(tokens, freqs).expect("distinct tokens")
}

pub const PAD_CHAR: &str = "<pad>";
pub const UNK_CHAR: &str = "<unkc>";
/// Character id used to pad words shorter than the filter width.
pub const PAD_CHAR_ID: u32 = 0;
pub const UNK_CHAR_ID: u32 = 1;

/// Character vocabulary. Id 0 is the padding symbol, id 1 the unknown
/// character; the remaining ids follow first occurrence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl CharVocab {
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> CharVocab {
        let mut v = CharVocab { chars: Vec::new(), index: HashMap::new() };
        for s in RESERVED {
            v.extend(s);
        }
        for w in words {
            v.extend(w);
        }
        v
    }

    /// Characters of every word in the pairs plus those of the reserved symbols.
    pub fn from_pairs(pairs: &[AnnotatedPair]) -> CharVocab {
        CharVocab::build(pairs.iter().flat_map(|p| p.target.iter().map(TargetItem::as_str)))
    }

    fn extend(&mut self, word: &str) {
        for c in word.chars() {
            if !self.index.contains_key(&c) {
                self.index.insert(c, (self.chars.len() + 2) as u32);
                self.chars.push(c);
            }
        }
    }

    /// Number of ids including padding and unknown.
    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(UNK_CHAR_ID)
    }

    /// Char ids of `word`, head-truncated to `max_chars`.
    pub fn encode_word(&self, word: &str, max_chars: usize) -> Vec<u32> {
        word.chars().take(max_chars).map(|c| self.id(c)).collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!("{PAD_CHAR}\n{UNK_CHAR}\n");
        for c in &self.chars {
            s.push(*c);
            s.push('\n');
        }
        s
    }

    pub fn from_file_str(text: &str) -> Result<CharVocab, CorpusError> {
        let mut lines = text.split('\n');
        if lines.next() != Some(PAD_CHAR) || lines.next() != Some(UNK_CHAR) {
            return Err(CorpusError::Vocab("char vocab must start with <pad> and <unkc>".into()));
        }
        let mut v = CharVocab { chars: Vec::new(), index: HashMap::new() };
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if line.chars().count() != 1 {
                return Err(CorpusError::Vocab(format!("`{line}` is not a single character")));
            }
            v.extend(line);
        }
        Ok(v)
    }
}
