use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::toy::{enumerate_finished, MarginStub, ToyModel};
use super::*;
use crate::charword::InputMode;
use crate::compute::ParameterStore;
use crate::corpus::vocab::{CharVocab, Vocab, UNK_ID};
use crate::corpus::Token;
use crate::eval::Metrics;
use crate::seq2seq::{EncDec, EncDecConfig, SourceInput};

/// Explicit next-token probabilities per prefix; unlisted prefixes stop.
struct TableModel {
    vocab: usize,
    probs: HashMap<Vec<u32>, Vec<f64>>,
}

impl TableModel {
    fn lp(&self, prefix: &[u32]) -> Vec<f64> {
        match self.probs.get(prefix) {
            Some(p) => p.iter().map(|x| x.ln()).collect(),
            None => (0..self.vocab).map(|v| if v as u32 == EOS_ID { 0.0 } else { f64::NEG_INFINITY }).collect(),
        }
    }
}

/// Drives a `TableModel`, carrying each row's prefix as its state.
struct Growing<'a>(&'a TableModel);

impl Decoder for Growing<'_> {
    type Context = ();
    type State = Vec<Option<Vec<u32>>>;

    fn vocab_size(&self) -> usize {
        self.0.vocab
    }
    fn initial_state(&self, _: &(), rows: usize) -> Self::State {
        vec![None; rows]
    }
    fn step(&self, _: &(), prev: &[u32], state: &Self::State, _: Option<&[f64]>) -> Result<Step<Self::State>, ModelError> {
        let prefixes: Vec<Vec<u32>> = state
            .iter()
            .zip(prev)
            .map(|(p, &t)| p.as_ref().map_or(vec![], |p| [p.as_slice(), &[t]].concat()))
            .collect();
        let lp: Vec<Vec<f64>> = prefixes.iter().map(|p| self.0.lp(p)).collect();
        let n = prefixes.len();
        Ok(Step {
            log_probs: Tensor::from_rows(&lp)?,
            state: prefixes.into_iter().map(Some).collect(),
            attention: Tensor::filled(&[n, 1], 1.0),
        })
    }
    fn select(&self, state: &Self::State, rows: &[usize]) -> Self::State {
        rows.iter().map(|&r| state[r].clone()).collect()
    }
}

#[test]
fn beam_two_beats_greedy_on_constructed_model() {
    // ids 0, 1 and the end symbol 2
    let mut probs = HashMap::new();
    probs.insert(vec![], vec![0.5, 0.4, 0.1]);
    probs.insert(vec![0], vec![0.3, 0.3, 0.4]);
    probs.insert(vec![1], vec![0.05, 0.05, 0.9]);
    let table = TableModel { vocab: 3, probs };
    let m = Growing(&table);

    // every sequence of length ≤ 2 ending in the end symbol
    let seqs: [&[u32]; 3] = [&[2], &[0, 2], &[1, 2]];
    let score = |s: &[u32]| -> f64 { (0..s.len()).map(|j| table.lp(&s[..j])[s[j] as usize]).sum() };
    let best = seqs.iter().copied().max_by(|a, b| score(a).total_cmp(&score(b))).unwrap();
    assert_eq!(best, &[1, 2]);

    let greedy = greedy_decode(&m, &(), &TagBias::default(), 2).unwrap();
    assert_eq!(greedy.tokens, vec![0, 2]);
    let beam = beam_decode(&m, &(), 2, &TagBias::default(), 2, false).unwrap();
    assert_eq!(beam.tokens, best);
    assert!((beam.score - 0.36f64.ln()).abs() < 1e-12);
    assert!(beam.finished);
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..100 {
        let m = ToyModel::new(5, seed);
        let g = greedy_decode(&m, &(), &TagBias::default(), 6).unwrap();
        let b = beam_decode(&m, &(), 1, &TagBias::default(), 6, false).unwrap();
        assert_eq!(g, b, "seed {seed}");
    }
}

fn brute_force_best(m: &ToyModel, max_len: usize) -> Vec<u32> {
    let mut all = enumerate_finished(m, max_len);
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.len().cmp(&b.0.len())).then_with(|| a.0.cmp(&b.0)));
    all.swap_remove(0).0
}

#[test]
fn exhaustive_beam_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let vocab = rng.gen_range(3..=4);
        let max_len = rng.gen_range(1..=3);
        let m = ToyModel::new(vocab, rng.gen());
        let beam = vocab.pow(max_len as u32);
        let h = beam_decode(&m, &(), beam, &TagBias::default(), max_len, false).unwrap();
        assert_eq!(h.tokens, brute_force_best(&m, max_len));
        assert!((h.score - m.sequence_score(&h.tokens)).abs() < 1e-12);
    }
}

#[test]
fn wider_beams_find_no_worse_sequences_on_toy_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut inversions = 0;
    for _ in 0..200 {
        let m = ToyModel::new(4, rng.gen());
        let runs: Vec<Hypothesis> = (1..=6).map(|b| beam_decode(&m, &(), b, &TagBias::default(), 4, false).unwrap()).collect();
        let exhaustive = beam_decode(&m, &(), 256, &TagBias::default(), 4, false).unwrap();
        assert!(exhaustive.finished);
        for h in runs.iter().filter(|h| h.finished) {
            assert!(h.score <= exhaustive.score + 1e-12);
        }
        for w in runs.windows(2) {
            if w[0].finished && w[1].finished && w[1].score < w[0].score - 1e-12 {
                inversions += 1;
            }
        }
    }
    assert_eq!(inversions, 0);
}

#[test]
fn hypothesis_invariants() {
    for seed in 0..30 {
        let m = ToyModel::new(6, seed);
        let h = beam_decode(&m, &(), 3, &TagBias::default(), 5, false).unwrap();
        assert!(h.score <= 0.0);
        assert_eq!(h.finished, h.tokens.last() == Some(&EOS_ID));
        assert_eq!(h.attention.len(), h.tokens.len());
    }
    // unfinished fallback at the length limit
    let mut probs = HashMap::new();
    probs.insert(vec![], vec![0.9, 0.1, 0.0]);
    let table = TableModel { vocab: 3, probs };
    let h = beam_decode(&Growing(&table), &(), 2, &TagBias::default(), 1, false).unwrap();
    assert_eq!((h.tokens.as_slice(), h.finished), ([0u32].as_slice(), false));
    assert!(beam_decode(&Growing(&table), &(), 0, &TagBias::default(), 1, false).is_err());
}

#[test]
fn tag_bias_offsets_and_validation() {
    let b = TagBias([1.0, 2.0, 3.0, 4.0]);
    assert_eq!(b.offsets(8), vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 0.0]);
    assert_eq!(b.magnitude(), 10.0);
    assert!(TagBias::default().is_zero());
    assert!(TagBias([f64::NAN, 0.0, 0.0, 0.0]).validate().is_err());
}

fn tiny_frozen_setup() -> (EncDec, ParameterStore) {
    let mut c = EncDecConfig::desk(InputMode::Word);
    c.layers = 1;
    c.hidden = 6;
    c.front.word_dim = 4;
    let model = EncDec::with_sizes(c, 12, 4, vec![]).unwrap();
    let mut store = model.new_store().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    (model, store)
}

#[test]
fn zero_bias_matches_unbiased_and_bias_keeps_distributions_normalized() {
    let (model, store) = tiny_frozen_setup();
    let frozen = FrozenEncDec::new(&model, &store).unwrap();
    let words = [7u32, 8, 9];
    let enc = frozen.encode(SourceInput { words: &words, chars: &[] }).unwrap();
    let state = frozen.initial_state(&enc, 2);
    let zeros = vec![0.0; 12];
    let plain = frozen.step(&enc, &[BOS_ID, 5], &state, None).unwrap();
    let zero = frozen.step(&enc, &[BOS_ID, 5], &state, Some(&zeros)).unwrap();
    assert_eq!(plain.log_probs, zero.log_probs);
    let biased = frozen.step(&enc, &[BOS_ID, 5], &state, Some(&TagBias([3.0, -2.0, 7.5, 0.5]).offsets(12))).unwrap();
    for r in 0..2 {
        let z: f64 = biased.log_probs.row(r).iter().map(|x| x.exp()).sum();
        assert!((z - 1.0).abs() < 1e-12);
    }
    let a = beam_decode(&frozen, &enc, 4, &TagBias::default(), 23, false).unwrap();
    let b = beam_decode(&frozen, &enc, 4, &TagBias([0.0, -0.0, 0.0, 0.0]), 23, false).unwrap();
    assert_eq!(a, b);
}

fn test_vocab() -> Vocab {
    let mut text = crate::corpus::vocab::RESERVED.join("\n");
    text.push_str("\nthe\ncat\nsat\n");
    Vocab::from_file_str(&text).unwrap()
}

fn toks(s: &str) -> Vec<Token> {
    s.split_whitespace().map(|w| Token::new(w).unwrap()).collect()
}

#[test]
fn unknown_replacement_examples() {
    let v = test_vocab();
    let src = toks("the Zorp sat");
    let the = v.id("the");
    let sat = v.id("sat");
    let att = vec![vec![1.0, 0.0, 0.0], vec![0.1, 0.7, 0.2], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
    assert_eq!(replace_unknowns(&[the, UNK_ID, sat, EOS_ID], &att, &src, &v), ["the", "Zorp", "sat"]);
    assert_eq!(replace_unknowns(&[the, sat], &att, &src, &v), ["the", "sat"]);
    let tie = vec![vec![0.4, 0.4, 0.2]];
    assert_eq!(replace_unknowns(&[UNK_ID], &tie, &src, &v), ["the"]);
}

#[test]
fn classification_examples() {
    let src = toks("the cat sat");
    let s = |x: &str| x.split_whitespace().map(String::from).collect::<Vec<_>>();
    assert_eq!(classify_from_decode(&src, &s("the cat sat")), Classification { label: false, drift: false });
    assert_eq!(
        classify_from_decode(&src, &s("the <del> cat </del> <ins> cats </ins> sat")),
        Classification { label: true, drift: false }
    );
    // the decoder rewrote a word without marking it
    assert_eq!(classify_from_decode(&src, &s("the dog sat")), Classification { label: false, drift: true });
    assert_eq!(classify_from_decode(&src, &s("the <ins> big </ins> dog sat")), Classification { label: true, drift: true });
}

#[test]
fn decode_corpus_keeps_input_order() {
    let (model, store) = tiny_frozen_setup();
    let frozen = FrozenEncDec::new(&model, &store).unwrap();
    let mut text = crate::corpus::vocab::RESERVED.join("\n");
    for w in ["a", "b", "c", "d", "e"] {
        text.push('\n');
        text.push_str(w);
    }
    let vocab = Vocab::from_file_str(&text).unwrap();
    let chars = CharVocab::build(["a"]);
    let sents: Vec<(String, Vec<Token>)> = (0..6).map(|i| (format!("s{i}"), toks(&"a b c d e x"[..(i % 5 + 1) * 2 - 1]))).collect();
    let opts = DecodeOptions { beam: 3, ..Default::default() };
    let recs = decode_corpus(&frozen, &vocab, &chars, &sents, &opts).unwrap();
    assert_eq!(recs.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["s0", "s1", "s2", "s3", "s4", "s5"]);
    for (r, (_, src)) in recs.iter().zip(&sents) {
        assert!(r.attention.iter().all(|&i| i < src.len()));
        let c = classify_from_decode(src, &r.decoded.split_whitespace().map(String::from).collect::<Vec<_>>());
        assert_eq!(c.label, r.label);
    }
    assert_eq!(recs, decode_corpus(&frozen, &vocab, &chars, &sents, &opts).unwrap());
}

fn stub_set() -> (Vec<(f64, usize)>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    (0..60)
        .map(|_| {
            let margin: f64 = rng.gen_range(-4.0..4.0);
            // gold positives lean towards higher margins
            let gold = margin + rng.gen_range(-2.0..2.0) > -1.0;
            ((margin, 1), gold)
        })
        .unzip()
}

#[test]
fn singleton_grid_returns_zero_bias() {
    let (src, gold) = stub_set();
    let grid = GridSpec { uniform: vec![0.0], refine: vec![] };
    let r = tune_bias(&MarginStub, &src, &gold, &grid, &DecodeOptions::default()).unwrap();
    assert!(r.best.is_zero());
    assert_eq!(r.sweep.len(), 1);
    let pred: Vec<bool> = src.iter().map(|(m, _)| *m > 0.0).collect();
    assert_eq!(r.best_metrics, Metrics::from_labels(&pred, &gold));
    assert!(matches!(tune_bias(&MarginStub, &[], &[], &grid, &DecodeOptions::default()), Err(ModelError::Empty(_))));
}

#[test]
fn stub_grid_matches_independent_metrics_and_positives_are_monotone() {
    let (src, gold) = stub_set();
    let grid = GridSpec::range(-3.0, 3.0, 0.5).unwrap();
    let r = tune_bias(&MarginStub, &src, &gold, &grid, &DecodeOptions::default()).unwrap();
    assert_eq!(r.sweep.len(), 13);
    let mut last_pos = 0;
    for row in &r.sweep {
        let x = row.bias.0[0];
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for ((m, _), &g) in src.iter().zip(&gold) {
            match (m + x > 0.0, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        assert_eq!((row.metrics.tp, row.metrics.fp, row.metrics.fn_, row.metrics.tn), (tp, fp, fn_, tn), "bias {x}");
        assert!(row.positives >= last_pos);
        last_pos = row.positives;
    }
    let best_f1 = r.sweep.iter().map(|s| s.metrics.f1).fold(0.0, f64::max);
    assert_eq!(r.best_metrics.f1, best_f1);
    let table = sweep_table(&r.sweep);
    assert_eq!(table.lines().count(), 14);
    assert!(table.starts_with("ins_open\t"));
}

#[test]
fn refinement_only_moves_to_strictly_better_points() {
    let (src, gold) = stub_set();
    let grid = GridSpec { uniform: vec![0.0, 1.0], refine: vec![-0.5, 0.5] };
    let r = tune_bias(&MarginStub, &src, &gold, &grid, &DecodeOptions::default()).unwrap();
    assert_eq!(r.sweep.len(), 2 + 4 * 2);
    let uniform_best = r.sweep[..2].iter().map(|s| s.metrics.f1).fold(0.0, f64::max);
    assert!(r.best_metrics.f1 >= uniform_best);
}
