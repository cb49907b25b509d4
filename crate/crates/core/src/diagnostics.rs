//! Finite-difference checks of every differentiable tape operation and of
//! the composed models at toy size.
//!
//! Each operation is checked through a fixed random readout
//! `sum(op(...) ⊙ R)`, so every output coordinate contributes to the loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::charword::{CharCnnConfig, InputMode};
use crate::cnnclassifier::{CnnClassifier, CnnConfig, CnnExample, EmbeddingMode};
use crate::compute::{grad_check, lstm_cell, ComputeError, GradCheckOptions, GradCheckReport, LstmParams, NodeId, ParameterStore, Tape, Tensor};
use crate::corpus::vocab::{BOS_ID, EOS_ID};
use crate::corpus::EncodedPair;
use crate::error::ModelError;
use crate::seq2seq::{sequence_loss, EncDec, EncDecConfig};
use crate::trainer::Trainable;

/// One named check and its report.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        let r = &self.report;
        format!(
            "{:<16} {} checked {:>4} failures {} nudged {} max rel err {:.2e}",
            self.name,
            if r.passed() { "ok  " } else { "FAIL" },
            r.checked,
            r.failures,
            r.nudged,
            r.max_rel_error
        )
    }
}

type OpFn = fn(&mut Tape<'_>) -> Result<NodeId, ComputeError>;

fn p(t: &mut Tape<'_>, name: &str) -> Result<NodeId, ComputeError> {
    t.param(name)
}

/// `(name, parameter shapes, forward)` for every differentiable operation.
fn op_cases() -> Vec<(&'static str, Vec<(&'static str, Vec<usize>)>, OpFn)> {
    fn two(a: [usize; 2], b: [usize; 2]) -> Vec<(&'static str, Vec<usize>)> {
        vec![("a", a.to_vec()), ("b", b.to_vec())]
    }
    fn one(a: [usize; 2]) -> Vec<(&'static str, Vec<usize>)> {
        vec![("a", a.to_vec())]
    }
    vec![
        ("matmul", two([3, 4], [4, 2]), |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.matmul(a, b)
        }),
        ("matmul_tn", two([4, 3], [4, 2]), |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.matmul_t(a, b, true, false)
        }),
        ("matmul_nt", two([3, 4], [2, 4]), |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.matmul_t(a, b, false, true)
        }),
        ("matmul_tt", two([4, 3], [2, 4]), |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.matmul_t(a, b, true, true)
        }),
        ("affine", vec![("x", vec![3, 4]), ("w", vec![2, 4]), ("b", vec![2])], |t| {
            let (x, w, b) = (p(t, "x")?, p(t, "w")?, p(t, "b")?);
            t.affine(x, w, b)
        }),
        ("linear", two([3, 4], [2, 4]), |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.linear(a, b)
        }),
        ("add_bias", vec![("a", vec![3, 2]), ("b", vec![2])], |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.add_bias(a, b)
        }),
        ("add", two([3, 2], [3, 2]), |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.add(a, b)
        }),
        ("sub", two([3, 2], [3, 2]), |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.sub(a, b)
        }),
        ("mul", two([3, 2], [3, 2]), |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.mul(a, b)
        }),
        ("mul_col", two([3, 1], [3, 2]), |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.mul_col(a, b)
        }),
        ("one_minus", one([3, 2]), |t| {
            let a = p(t, "a")?;
            Ok(t.one_minus(a))
        }),
        ("scale", one([3, 2]), |t| {
            let a = p(t, "a")?;
            Ok(t.scale(a, -1.7))
        }),
        ("tanh", one([3, 2]), |t| {
            let a = p(t, "a")?;
            Ok(t.tanh(a))
        }),
        ("sigmoid", one([3, 2]), |t| {
            let a = p(t, "a")?;
            Ok(t.sigmoid(a))
        }),
        ("relu", one([3, 2]), |t| {
            let a = p(t, "a")?;
            Ok(t.relu(a))
        }),
        ("concat_cols", two([3, 2], [3, 3]), |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.concat_cols(&[a, b])
        }),
        ("vstack", two([2, 3], [1, 3]), |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.vstack(&[a, b])
        }),
        ("slice_cols", one([3, 5]), |t| {
            let a = p(t, "a")?;
            t.slice_cols(a, 1, 3)
        }),
        ("gather", one([5, 3]), |t| {
            let a = p(t, "a")?;
            t.gather(a, &[4, 0, 4, 2])
        }),
        ("unfold", one([7, 2]), |t| {
            let a = p(t, "a")?;
            t.unfold(a, &[(0, 4), (4, 3)], 2)
        }),
        ("segment_max", one([5, 3]), |t| {
            let a = p(t, "a")?;
            t.segment_max(a, &[2, 3])
        }),
        ("row_dot", two([3, 4], [3, 4]), |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.row_dot(a, b)
        }),
        ("softmax", one([3, 4]), |t| {
            let a = p(t, "a")?;
            t.softmax(a)
        }),
        ("masked_softmax", one([2, 3]), |t| {
            let a = p(t, "a")?;
            t.masked_softmax(a, &[vec![true, false, true], vec![true, true, false]])
        }),
        ("cross_entropy", one([3, 4]), |t| {
            let a = p(t, "a")?;
            t.cross_entropy(a, &[0, 3, 1], &[1.0, 0.5, 2.0])
        }),
        ("bce_with_logits", one([3, 1]), |t| {
            let a = p(t, "a")?;
            t.bce_with_logits(a, &[1.0, 0.0, 1.0], &[1.0, 1.0, 0.5])
        }),
        ("sum", one([3, 2]), |t| {
            let a = p(t, "a")?;
            Ok(t.sum(a))
        }),
        ("blend", two([3, 2], [3, 2]), |t| {
            let (a, b) = (p(t, "a")?, p(t, "b")?);
            t.blend(a, b, &[1.0, 0.0, 1.0])
        }),
        ("dropout", one([3, 4]), |t| {
            let a = p(t, "a")?;
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            t.dropout(a, 0.5, &mut rng)
        }),
        ("lstm_cell", vec![("x", vec![2, 3]), ("h", vec![2, 4]), ("c", vec![2, 4])], |t| {
            let (x, h, c) = (p(t, "x")?, p(t, "h")?, p(t, "c")?);
            let (h2, c2) = lstm_cell(t, x, h, c, &LstmParams::new("cell", 3, 4, 1.0))?;
            t.concat_cols(&[h2, c2])
        }),
    ]
}

fn fill(store: &mut ParameterStore, seed: u64, range: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids_by_name().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-range..range);
        }
    }
}

/// `sum(y ⊙ R)` for a fixed pseudo-random `R` of `y`'s shape.
fn readout(t: &mut Tape<'_>, y: NodeId) -> Result<NodeId, ComputeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = t.value(y).map(|_| rng.gen_range(-1.0..1.0));
    let r = t.constant(r);
    let m = t.mul(y, r)?;
    Ok(t.sum(m))
}

/// Checks every differentiable operation at random points.
pub fn check_ops(seed: u64, opts: &GradCheckOptions) -> Result<Vec<CheckOutcome>, ModelError> {
    let mut out = Vec::new();
    for (i, (name, shapes, f)) in op_cases().into_iter().enumerate() {
        let mut store = ParameterStore::new();
        for (pname, shape) in &shapes {
            store.insert(pname, Tensor::zeros(shape))?;
        }
        if name == "lstm_cell" {
            LstmParams::new("cell", 3, 4, 1.0).register(&mut store)?;
        }
        fill(&mut store, seed.wrapping_add(i as u64), 1.0);
        let report = grad_check(
            &mut store,
            |t| {
                let y = f(t)?;
                readout(t, y)
            },
            opts,
        )?;
        out.push(CheckOutcome { name: name.to_string(), report });
    }
    Ok(out)
}

/// Character ids for a toy vocabulary, one to three per word.
pub fn toy_char_table(vocab: usize, n_chars: usize) -> Vec<Vec<u32>> {
    (0..vocab as u32).map(|i| (0..1 + i % 3).map(|k| 2 + (i + k) % (n_chars as u32 - 2)).collect()).collect()
}

fn toy_pair(src: &[u32], tgt: &[u32], table: &[Vec<u32>]) -> EncodedPair {
    let mut target_in = vec![BOS_ID];
    target_in.extend_from_slice(tgt);
    let mut target_out = tgt.to_vec();
    target_out.push(EOS_ID);
    EncodedPair {
        source_words: src.to_vec(),
        source_chars: src.iter().map(|&w| table[w as usize].clone()).collect(),
        target_in,
        target_out,
        label: tgt.iter().any(|&t| (3..7).contains(&t)),
    }
}

/// A toy encoder-decoder: 2 layers, `hidden` units, 16 output ids.
pub fn toy_encdec(mode: InputMode, hidden: usize) -> Result<EncDec, ModelError> {
    let mut c = EncDecConfig::desk(mode);
    c.layers = 2;
    c.hidden = hidden;
    c.front.word_dim = 6;
    c.front.charcnn = CharCnnConfig { char_dim: 3, filter_width: 2, feature_maps: 5, highway_layers: 2, max_word_chars: 35 };
    let table = match mode {
        InputMode::Char => toy_char_table(16, 8),
        InputMode::Word => Vec::new(),
    };
    EncDec::with_sizes(c, 16, 8, table)
}

/// Composed encoder-decoder loss on two short sentences (≤ 6 tokens).
pub fn check_encdec(mode: InputMode, hidden: usize, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport, ModelError> {
    let model = toy_encdec(mode, hidden)?;
    let mut store = model.new_store()?;
    fill(&mut store, seed, 0.3);
    let table = toy_char_table(16, 8);
    let pairs = [toy_pair(&[7, 8, 9, 10, 11], &[7, 3, 8, 4, 9, 10], &table), toy_pair(&[12, 13], &[12, 13], &table)];
    let refs: Vec<&EncodedPair> = pairs.iter().collect();
    grad_check(&mut store, |t: &mut Tape<'_>| -> Result<NodeId, ModelError> { Ok(sequence_loss(t, &model, &refs, None)?.0) }, opts)
}

/// Composed sentence-classifier loss on three short sentences.
pub fn check_cnn(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport, ModelError> {
    let config = CnnConfig {
        widths: vec![2, 3],
        feature_maps: 4,
        word_dim: 5,
        embedding: EmbeddingMode::Nonstatic,
        dropout: 0.0,
        threshold: 0.5,
    };
    let model = CnnClassifier::new(config, 12)?;
    let mut store = model.new_store()?;
    fill(&mut store, seed, 0.5);
    let examples = [
        CnnExample { ids: vec![3, 4, 5, 6], label: true },
        CnnExample { ids: vec![7, 8], label: false },
        CnnExample { ids: vec![9, 10, 11, 2, 4, 6], label: true },
    ];
    let refs: Vec<&CnnExample> = examples.iter().collect();
    grad_check(&mut store, |t: &mut Tape<'_>| -> Result<NodeId, ModelError> { Ok(model.batch_loss(t, &refs, None)?.0) }, opts)
}

/// Which composed models to check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckTarget {
    Ops,
    Word,
    Char,
    Cnn,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 4] = [CheckTarget::Ops, CheckTarget::Word, CheckTarget::Char, CheckTarget::Cnn];
}

/// Runs the selected checks in order.
pub fn run_checks(targets: &[CheckTarget], seed: u64, opts: &GradCheckOptions) -> Result<Vec<CheckOutcome>, ModelError> {
    let mut out = Vec::new();
    for &t in targets {
        match t {
            CheckTarget::Ops => out.extend(check_ops(seed, opts)?),
            CheckTarget::Word => {
                out.push(CheckOutcome { name: "model:word".into(), report: check_encdec(InputMode::Word, 8, seed, opts)? })
            }
            CheckTarget::Char => {
                out.push(CheckOutcome { name: "model:char".into(), report: check_encdec(InputMode::Char, 8, seed, opts)? })
            }
            CheckTarget::Cnn => out.push(CheckOutcome { name: "model:cnn".into(), report: check_cnn(seed, opts)? }),
        }
    }
    Ok(out)
}
