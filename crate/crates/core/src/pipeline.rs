//! End-to-end plumbing shared by the command line, the examples and the
//! acceptance suite: corpus files, prepared datasets, run directories,
//! training with best-epoch selection, and prediction.
//!
//! A prepared dataset directory holds `dataset.jsonl` (one manifest record
//! per pair, splits `train`/`dev`/`test`), `vocab.txt`, `chars.txt`,
//! `filtered.jsonl` and one `<split>.gold.tsv` per split. A run directory
//! holds `config.txt`, copies of the two vocabularies, the trainer's
//! `manifest.jsonl`, per-epoch checkpoints and `best.ckpt`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::charword::load_pretrained;
use crate::cnnclassifier::{cnn_predict, CnnClassifier, CnnExample};
use crate::compute::{checkpoint, ParameterStore};
use crate::config::RunConfig;
use crate::corpus::{
    assemble_regime, classifier_examples, encode_all, filter_pairs, parse_annotated, read_manifest, synthesize_errors,
    write_manifest, AnnotatedPair, CharVocab, CorpusError, DatasetSpec, EncodedPair, ErrorRule, FilterRecord,
    RegimeCounts, SentenceGenerator, Token, Tokenizer, Vocab,
};
use crate::error::ModelError;
use crate::eval::PredictionSet;
use crate::inference::{decode_corpus, tune_bias, DecodeOptions, DecodeRecord, GridSpec, TuneResult};
use crate::seq2seq::{EncDec, FrozenEncDec, SourceInput};
use crate::trainer::{init_params, load_checkpoint, mix, train, ModelKind, RunManifest, TrainOptions};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Stable sentence id: split name and zero-based position.
pub fn sentence_id(split: &str, index: usize) -> String {
    format!("{split}-{index:06}")
}

fn parse_line(line: &str, tokenize: bool) -> Result<AnnotatedPair, CorpusError> {
    if tokenize {
        parse_annotated(&Tokenizer::default_rules().tokenize_annotated(line).join(" "))
    } else {
        parse_annotated(line)
    }
}

/// Parses one annotated pair per line. With `tokenize`, raw text is split
/// by the default tokenizer first (tags pass through). The first malformed
/// line is an error.
pub fn read_annotated(text: &str, tokenize: bool) -> Result<Vec<AnnotatedPair>, CorpusError> {
    text.lines()
        .enumerate()
        .map(|(i, line)| parse_line(line, tokenize).map_err(|e| CorpusError::AtLine { line: i + 1, source: Box::new(e) }))
        .collect()
}

/// A line that failed to parse, kept for the rejection log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RejectedLine {
    pub line: usize,
    pub text: String,
    pub reason: String,
}

/// Like [`read_annotated`], but malformed lines are set aside instead of
/// failing the whole file.
pub fn read_annotated_lenient(text: &str, tokenize: bool) -> (Vec<AnnotatedPair>, Vec<RejectedLine>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match parse_line(line, tokenize) {
            Ok(p) => kept.push(p),
            Err(e) => rejected.push(RejectedLine { line: i + 1, text: line.to_string(), reason: e.to_string() }),
        }
    }
    (kept, rejected)
}

pub fn write_annotated(pairs: &[AnnotatedPair]) -> String {
    pairs.iter().map(|p| p.serialize() + "\n").collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<AnnotatedPair>,
    pub dev: Vec<AnnotatedPair>,
    pub test: Vec<AnnotatedPair>,
}

impl Splits {
    pub fn get(&self, split: &str) -> Option<&[AnnotatedPair]> {
        match split {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn named(&self) -> [(&'static str, &[AnnotatedPair]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }
}

/// A synthetic corpus: clean sentences from the generator, corrupted at
/// `rate` by `rules`, cut into consecutive train/dev/test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub rate: f64,
    pub rules: Vec<ErrorRule>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { train: 5000, dev: 1000, test: 0, rate: 0.5, rules: ErrorRule::ALL.to_vec(), seed: 1 }
    }
}

pub fn synth_splits(spec: &SynthSpec) -> Result<Splits, CorpusError> {
    let clean = SentenceGenerator::new(spec.seed).sentences(spec.train + spec.dev + spec.test);
    let mut pairs = synthesize_errors(&clean, &spec.rules, spec.rate, mix(spec.seed, 1))?;
    let test = pairs.split_off(spec.train + spec.dev);
    let dev = pairs.split_off(spec.train);
    Ok(Splits { train: pairs, dev, test })
}

/// Model-ready splits with their vocabularies. Only the training split is
/// subject to the regime and the length filter; evaluation splits are kept
/// whole so every sentence gets a prediction.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub splits: Splits,
    pub vocab: Vocab,
    pub chars: CharVocab,
    pub filtered: Vec<FilterRecord>,
}

pub fn prepare(raw: Splits, spec: &DatasetSpec, vocab_cap: usize) -> Result<(Dataset, RegimeCounts), CorpusError> {
    let (assembled, counts) = assemble_regime(&raw.train, spec.regime)?;
    let (train, filtered) = filter_pairs(assembled, spec);
    let vocab = crate::corpus::build_vocab(&train, vocab_cap);
    let chars = CharVocab::from_pairs(&train);
    Ok((Dataset { splits: Splits { train, ..raw }, vocab, chars, filtered }, counts))
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |e| ModelError::Config(format!("{}: {e}", path.display()))
}

pub fn read_file(path: &Path) -> Result<String, ModelError> {
    fs::read_to_string(path).map_err(io_at(path))
}

pub fn write_file(path: &Path, text: &str) -> Result<(), ModelError> {
    checkpoint::write_atomic(path, text.as_bytes()).map_err(io_at(path))
}

impl Dataset {
    /// Sentence ids and source tokens of a split, in order.
    pub fn sources(&self, split: &str) -> Vec<(String, Vec<Token>)> {
        let pairs = self.splits.get(split).unwrap_or(&[]);
        pairs.iter().enumerate().map(|(i, p)| (sentence_id(split, i), p.source.clone())).collect()
    }

    pub fn gold(&self, split: &str) -> PredictionSet {
        let pairs = self.splits.get(split).unwrap_or(&[]);
        PredictionSet {
            system: "gold".into(),
            config_hash: String::new(),
            labels: pairs.iter().enumerate().map(|(i, p)| (sentence_id(split, i), p.label)).collect(),
        }
    }

    pub fn labels(&self, split: &str) -> Vec<bool> {
        self.splits.get(split).unwrap_or(&[]).iter().map(|p| p.label).collect()
    }

    pub fn manifest(&self) -> String {
        write_manifest(self.splits.named())
    }

    /// Writes the dataset directory; returns the files written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, ModelError> {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        let mut files = vec![
            (dir.join("dataset.jsonl"), self.manifest()),
            (dir.join("vocab.txt"), self.vocab.to_file_string()),
            (dir.join("chars.txt"), self.chars.to_file_string()),
            (
                dir.join("filtered.jsonl"),
                self.filtered.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect(),
            ),
        ];
        for split in SPLITS {
            files.push((dir.join(format!("{split}.gold.tsv")), self.gold(split).to_tsv()));
        }
        for (path, text) in &files {
            write_file(path, text)?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }

    pub fn load(dir: &Path) -> Result<Dataset, ModelError> {
        let records = read_manifest(&read_file(&dir.join("dataset.jsonl"))?)?;
        let mut splits = Splits::default();
        for r in &records {
            let pair = r.to_pair()?;
            match r.split.as_str() {
                "train" => splits.train.push(pair),
                "dev" => splits.dev.push(pair),
                "test" => splits.test.push(pair),
                other => return Err(CorpusError::Manifest(format!("unknown split `{other}`")).into()),
            }
        }
        Ok(Dataset {
            splits,
            vocab: Vocab::from_file_str(&read_file(&dir.join("vocab.txt"))?)?,
            chars: CharVocab::from_file_str(&read_file(&dir.join("chars.txt"))?)?,
            filtered: Vec::new(),
        })
    }
}

/// Either model family, built from a run configuration.
#[derive(Clone, Debug)]
pub enum Model {
    EncDec(EncDec),
    Cnn(CnnClassifier),
}

impl Model {
    pub fn build(config: &RunConfig, vocab: &Vocab, chars: &CharVocab) -> Result<Model, ModelError> {
        match config.model {
            ModelKind::Cnn => Ok(Model::Cnn(CnnClassifier::new(config.cnn.clone(), vocab.len())?)),
            _ => Ok(Model::EncDec(EncDec::new(config.encdec.clone(), vocab, chars)?)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::EncDec(m) => crate::trainer::Trainable::kind(m),
            Model::Cnn(_) => ModelKind::Cnn,
        }
    }

    fn new_store(&self) -> Result<ParameterStore, ModelError> {
        match self {
            Model::EncDec(m) => m.new_store(),
            Model::Cnn(m) => m.new_store(),
        }
    }

    /// Names of word-embedding tables that pretrained vectors can fill.
    pub fn word_tables(&self) -> Vec<String> {
        match self {
            Model::EncDec(m) => [m.enc_front.word_embedding(), m.dec_front.word_embedding()]
                .into_iter()
                .flatten()
                .map(|e| e.table.clone())
                .collect(),
            Model::Cnn(_) => vec![crate::cnnclassifier::EMBEDDING.to_string()],
        }
    }
}

/// Sentence-classifier examples: word ids of each source, unknowns mapped.
pub fn cnn_examples(pairs: &[AnnotatedPair], vocab: &Vocab, with_corrections: bool) -> Vec<CnnExample> {
    classifier_examples(pairs, with_corrections)
        .into_iter()
        .filter(|(s, _)| !s.is_empty())
        .map(|(s, label)| CnnExample { ids: s.iter().map(|t| vocab.id(t)).collect(), label })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainRunOptions {
    /// Run directory for checkpoints and the manifest.
    pub out_dir: Option<PathBuf>,
    /// Continue from the newest checkpoint in `out_dir`.
    pub resume: bool,
    pub verbose: bool,
    /// Whitespace-separated `token v1 … vm` vectors for the word tables.
    pub pretrained: Option<String>,
    /// Classifier only: add corrected sentences as error-free examples.
    pub cnn_corrections: bool,
    /// Cap on validation sentences (the dev split is used in order).
    pub valid_limit: Option<usize>,
}

pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub store: ParameterStore,
    /// Epoch whose parameters `store` holds.
    pub epoch: usize,
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch") && n.ends_with(".ckpt"))
        })
        .collect();
    found.sort();
    found.pop()
}

/// Epoch with the lowest validation perplexity; earliest on ties.
pub fn best_epoch(manifest: &RunManifest) -> Option<usize> {
    manifest
        .epochs
        .iter()
        .min_by(|a, b| a.val_ppl.total_cmp(&b.val_ppl).then(a.epoch.cmp(&b.epoch)))
        .map(|e| e.epoch)
}

/// Trains `model` on the dataset's training split, validating on dev.
///
/// With an output directory, the checkpoint of the best validation epoch
/// is copied to `best.ckpt` and its parameters are returned; otherwise the
/// final parameters are.
pub fn train_model(model: &Model, config: &RunConfig, data: &Dataset, opts: &TrainRunOptions) -> Result<TrainOutcome, ModelError> {
    let mut resume = None;
    let mut store = ParameterStore::new();
    if let (true, Some(dir)) = (opts.resume, &opts.out_dir) {
        if let Some(path) = latest_checkpoint(dir) {
            let ck = load_checkpoint(&path)?;
            store = ck.params;
            resume = Some((ck.state, ck.optimizer));
        }
    }
    if resume.is_none() {
        match model {
            Model::EncDec(m) => init_params(&mut store, m, &config.train)?,
            Model::Cnn(m) => init_params(&mut store, m, &config.train)?,
        }
        if let Some(text) = &opts.pretrained {
            for name in model.word_tables() {
                let id = store.id(&name)?;
                load_pretrained(text, &data.vocab, store.value_mut(id))?;
            }
        }
    }
    let dev = &data.splits.dev[..opts.valid_limit.unwrap_or(usize::MAX).min(data.splits.dev.len())];
    let topts = TrainOptions { checkpoint_dir: opts.out_dir.clone(), resume, verbose: opts.verbose };
    let manifest = match model {
        Model::EncDec(m) => {
            let (tr, _) = encode_all(&data.splits.train, &data.vocab, &data.chars, &config.data);
            let (dv, _) = encode_all(dev, &data.vocab, &data.chars, &config.data);
            train::<EncDec>(m, &mut store, &tr, &dv, &config.train, topts)?
        }
        Model::Cnn(m) => {
            let tr = cnn_examples(&data.splits.train, &data.vocab, opts.cnn_corrections);
            let dv = cnn_examples(dev, &data.vocab, false);
            train(m, &mut store, &tr, &dv, &config.train, topts)?
        }
    };
    let mut epoch = manifest.epochs.last().map_or(0, |e| e.epoch);
    if let Some(dir) = &opts.out_dir {
        let full = RunManifest::from_jsonl(&read_file(&dir.join("manifest.jsonl"))?)?;
        if let Some(best) = best_epoch(&full) {
            let path = dir.join(format!("epoch{best:03}.ckpt"));
            let bytes = fs::read(&path).map_err(io_at(&path))?;
            checkpoint::write_atomic(&dir.join("best.ckpt"), &bytes)?;
            store = load_checkpoint(&path)?.params;
            epoch = best;
        }
    }
    Ok(TrainOutcome { manifest, store, epoch })
}

/// Files making up a run directory.
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn new(dir: impl Into<PathBuf>) -> RunDir {
        RunDir { dir: dir.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    /// Writes the configuration and vocabularies a run needs to be reloaded.
    pub fn init(&self, config: &RunConfig, data: &Dataset) -> Result<(), ModelError> {
        fs::create_dir_all(&self.dir).map_err(io_at(&self.dir))?;
        write_file(&self.config(), &config.to_text())?;
        write_file(&self.dir.join("vocab.txt"), &data.vocab.to_file_string())?;
        write_file(&self.dir.join("chars.txt"), &data.chars.to_file_string())
    }

    /// Reloads a trained run from `checkpoint` (default `best.ckpt`).
    pub fn load(&self, checkpoint: Option<&Path>) -> Result<LoadedRun, ModelError> {
        let config = RunConfig::parse(&read_file(&self.config())?)?;
        let vocab = Vocab::from_file_str(&read_file(&self.dir.join("vocab.txt"))?)?;
        let chars = CharVocab::from_file_str(&read_file(&self.dir.join("chars.txt"))?)?;
        let model = Model::build(&config, &vocab, &chars)?;
        let path = checkpoint.map_or_else(|| self.best(), Path::to_path_buf);
        let store = load_checkpoint(&path)?.params;
        // fail early on a checkpoint from a different model
        let expected = model.new_store()?;
        for id in expected.ids() {
            let name = expected.name(id);
            if store.get(name)?.shape() != expected.value(id).shape() {
                return Err(ModelError::Config(format!("checkpoint parameter `{name}` has the wrong shape")));
            }
        }
        Ok(LoadedRun { config, vocab, chars, model, store })
    }
}

pub struct LoadedRun {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub chars: CharVocab,
    pub model: Model,
    pub store: ParameterStore,
}

impl LoadedRun {
    pub fn predictor(&self) -> Predictor<'_> {
        Predictor { model: &self.model, store: &self.store, vocab: &self.vocab, chars: &self.chars }
    }
}

/// A trained model bound to its parameters and vocabularies.
pub struct Predictor<'a> {
    pub model: &'a Model,
    pub store: &'a ParameterStore,
    pub vocab: &'a Vocab,
    pub chars: &'a CharVocab,
}

fn wrong_kind(what: &str) -> ModelError {
    ModelError::Config(format!("{what} needs an encoder-decoder model"))
}

impl Predictor<'_> {
    pub fn decode(&self, sentences: &[(String, Vec<Token>)], opts: &DecodeOptions) -> Result<Vec<DecodeRecord>, ModelError> {
        let Model::EncDec(m) = self.model else { return Err(wrong_kind("decoding")) };
        let frozen = FrozenEncDec::new(m, self.store)?;
        decode_corpus(&frozen, self.vocab, self.chars, sentences, opts)
    }

    /// Classifier error probabilities, in input order.
    pub fn probabilities(&self, sentences: &[(String, Vec<Token>)]) -> Result<Vec<f64>, ModelError> {
        let Model::Cnn(m) = self.model else {
            return Err(ModelError::Config("probabilities need the sentence classifier".into()));
        };
        let ids: Vec<Vec<u32>> = sentences.iter().map(|(_, s)| s.iter().map(|t| self.vocab.id(t)).collect()).collect();
        let chunks: Vec<Vec<f64>> = ids
            .par_chunks(64)
            .map(|c| {
                let refs: Vec<&[u32]> = c.iter().map(Vec::as_slice).collect();
                m.probabilities(self.store, &refs)
            })
            .collect::<Result<_, _>>()?;
        Ok(chunks.concat())
    }

    /// Labels for every sentence: decoded tags for encoder-decoders, the
    /// thresholded probability for the classifier.
    pub fn predict(&self, sentences: &[(String, Vec<Token>)], opts: &DecodeOptions, threshold: f64) -> Result<PredictionSet, ModelError> {
        let labels: Vec<bool> = match self.model {
            Model::EncDec(_) => self.decode(sentences, opts)?.iter().map(|r| r.label).collect(),
            Model::Cnn(_) => self.probabilities(sentences)?.iter().map(|&p| cnn_predict(p, threshold)).collect(),
        };
        PredictionSet::from_pairs(self.model.kind().name(), sentences.iter().map(|(id, _)| id.clone()).zip(labels))
            .map_err(|e| ModelError::Config(e.to_string()))
    }

    /// Tag-bias grid search on labeled sentences.
    pub fn tune(&self, sentences: &[(String, Vec<Token>)], gold: &[bool], grid: &GridSpec, opts: &DecodeOptions) -> Result<TuneResult, ModelError> {
        let Model::EncDec(m) = self.model else { return Err(wrong_kind("tag-bias tuning")) };
        let frozen = FrozenEncDec::new(m, self.store)?;
        let max_chars = m.config.front.charcnn.max_word_chars;
        let sources = sentences
            .par_iter()
            .map(|(_, s)| {
                let (words, chs) = crate::corpus::encode_source(s, self.vocab, self.chars, max_chars);
                Ok((frozen.encode(SourceInput { words: &words, chars: &chs })?, s.len()))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        tune_bias(&frozen, &sources, gold, grid, opts)
    }
}

/// Teacher-forced pairs of a split, encoded for the run's vocabularies.
pub fn encoded_split(data: &Dataset, split: &str, spec: &DatasetSpec) -> Vec<EncodedPair> {
    encode_all(data.splits.get(split).unwrap_or(&[]), &data.vocab, &data.chars, spec).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Regime;

    fn tiny() -> Splits {
        synth_splits(&SynthSpec { train: 40, dev: 10, test: 5, ..Default::default() }).unwrap()
    }

    #[test]
    fn synth_is_seeded_and_split_in_order() {
        let a = tiny();
        assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (40, 10, 5));
        assert_eq!(a, tiny());
        let other = synth_splits(&SynthSpec { train: 40, dev: 10, test: 5, seed: 2, ..Default::default() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn annotated_text_round_trips_and_reports_lines() {
        let s = tiny();
        assert_eq!(read_annotated(&write_annotated(&s.train), false).unwrap(), s.train);
        let err = read_annotated("a b\nc </ins>\n", false).unwrap_err();
        assert!(err.to_string().starts_with("line 2:"), "{err}");
        let t = read_annotated("Hello, <ins> the </ins> world.", true).unwrap();
        assert_eq!(t[0].serialize(), "Hello , <ins> the </ins> world .");
    }

    #[test]
    fn prepare_filters_only_train_and_dataset_reloads() {
        let mut raw = tiny();
        let long = parse_annotated(&vec!["w"; 60].join(" ")).unwrap();
        raw.train.push(long.clone());
        raw.dev.push(long);
        let spec = DatasetSpec { regime: Regime::PlusAll, ..Default::default() };
        let (data, counts) = prepare(raw, &spec, 1000).unwrap();
        assert_eq!(data.splits.train.len(), 40);
        assert_eq!(data.splits.dev.len(), 11);
        assert_eq!(data.filtered.len(), 1);
        assert_eq!(counts.with_edits + counts.without_edits, 41);
        let dir = tempfile::tempdir().unwrap();
        data.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.splits, data.splits);
        assert_eq!(back.vocab.tokens(), data.vocab.tokens());
        assert_eq!(back.gold("dev"), data.gold("dev"));
    }

    #[test]
    fn best_epoch_prefers_lowest_then_earliest() {
        let mut m = RunManifest {
            header: crate::trainer::ManifestHeader {
                kind: "word".into(),
                optimizer: "sgd".into(),
                model: serde_json::Value::Null,
                train: serde_json::Value::Null,
                train_examples: 0,
                valid_examples: 0,
            },
            epochs: vec![],
        };
        assert_eq!(best_epoch(&m), None);
        for (e, p) in [(1, 3.0), (2, 1.5), (3, 1.5), (4, 2.0)] {
            m.epochs.push(crate::trainer::EpochRecord {
                epoch: e,
                lr: 1.0,
                updates: e,
                train_loss: 0.0,
                train_ppl: 1.0,
                val_loss: 0.0,
                val_ppl: p,
                clipped: 0.0,
                checkpoint: None,
                wall_secs: 0.0,
            });
        }
        assert_eq!(best_epoch(&m), Some(2));
    }

    #[test]
    fn lenient_reading_sets_bad_lines_aside() {
        let text = "Fine line .\nbroken <ins> line .\n\nA <del> b </del> c .\n";
        assert!(matches!(read_annotated(text, false), Err(CorpusError::AtLine { line: 2, .. })));
        let (kept, rejected) = read_annotated_lenient(text, false);
        assert_eq!(kept.len(), 2);
        assert_eq!(rejected.iter().map(|r| r.line).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(rejected[0].text, "broken <ins> line .");
    }
}
