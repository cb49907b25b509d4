//! One-layer convolutional sentence classifier over word embeddings.
//!
//! Each filter width convolves over the sentence's embedding matrix,
//! applies relu and max-over-time pooling; the pooled features of all
//! widths are concatenated and mapped to a single error logit.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{NodeId, ParameterStore, Tape, Tensor};
use crate::error::ModelError;
use crate::eval::Metrics;
use crate::trainer::{ModelKind, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingMode {
    /// The embedding table is never updated.
    Static,
    Nonstatic,
}

impl FromStr for EmbeddingMode {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "static" => Ok(EmbeddingMode::Static),
            "nonstatic" => Ok(EmbeddingMode::Nonstatic),
            _ => Err(ModelError::Config(format!("unknown embedding mode `{s}`"))),
        }
    }
}

impl fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingMode::Static => "static",
            EmbeddingMode::Nonstatic => "nonstatic",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub widths: Vec<usize>,
    pub feature_maps: usize,
    pub word_dim: usize,
    pub embedding: EmbeddingMode,
    /// Dropout on the pooled features, training only.
    pub dropout: f64,
    /// Decision threshold on the error probability.
    pub threshold: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            widths: vec![3, 4, 5],
            feature_maps: 1000,
            word_dim: 300,
            embedding: EmbeddingMode::Nonstatic,
            dropout: 0.5,
            threshold: 0.5,
        }
    }
}

impl CnnConfig {
    pub fn desk() -> Self {
        CnnConfig { feature_maps: 50, word_dim: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut w = self.widths.clone();
        w.sort_unstable();
        w.dedup();
        if self.widths.is_empty() || w.len() != self.widths.len() || w[0] == 0 {
            return Err(ModelError::Config(format!("filter widths must be distinct and positive: {:?}", self.widths)));
        }
        if self.feature_maps == 0 || self.word_dim == 0 {
            return Err(ModelError::Config("feature maps and word dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(ModelError::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(1)
    }
}

/// A labeled sentence for the classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CnnExample {
    pub ids: Vec<u32>,
    pub label: bool,
}

/// Parameter names and sizes of a classifier.
#[derive(Clone, Debug)]
pub struct CnnClassifier {
    pub config: CnnConfig,
    pub vocab_size: usize,
}

pub const EMBEDDING: &str = "cnn.emb";
pub const OUT_W: &str = "cnn.out.w";
pub const OUT_B: &str = "cnn.out.b";

fn conv_name(w: usize) -> String {
    format!("cnn.conv{w}")
}

fn conv_bias_name(w: usize) -> String {
    format!("cnn.conv{w}.b")
}

impl CnnClassifier {
    pub fn new(config: CnnConfig, vocab_size: usize) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(ModelError::Empty("vocabulary"));
        }
        Ok(CnnClassifier { config, vocab_size })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_maps * self.config.widths.len()
    }

    pub fn new_store(&self) -> Result<ParameterStore, ModelError> {
        let mut s = ParameterStore::new();
        Trainable::register(self, &mut s)?;
        Ok(s)
    }

    /// Pooled features, `batch.len() × (maps · widths)`.
    ///
    /// Sentences shorter than the widest filter are padded with zero
    /// vectors, which carry no gradient.
    pub fn features(&self, tape: &mut Tape<'_>, batch: &[&[u32]]) -> Result<NodeId, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Empty("sentence batch"));
        }
        let c = &self.config;
        let table = match c.embedding {
            EmbeddingMode::Static => tape.frozen_param(EMBEDDING)?,
            EmbeddingMode::Nonstatic => tape.param(EMBEDDING)?,
        };
        let min_len = c.max_width();
        let mut parts = Vec::with_capacity(batch.len());
        let mut segments = Vec::with_capacity(batch.len());
        let mut start = 0;
        for ids in batch {
            if ids.is_empty() {
                return Err(ModelError::Empty("sentence"));
            }
            let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
            let rows = tape.gather(table, &idx)?;
            parts.push(rows);
            let len = ids.len().max(min_len);
            if ids.len() < min_len {
                parts.push(tape.constant(Tensor::zeros(&[min_len - ids.len(), c.word_dim])));
            }
            segments.push((start, len));
            start += len;
        }
        let x = tape.vstack(&parts)?;
        let mut pooled = Vec::with_capacity(c.widths.len());
        for &w in &c.widths {
            let windows: Vec<usize> = segments.iter().map(|&(_, len)| len - w + 1).collect();
            let u = tape.unfold(x, &segments, w)?;
            let filt = tape.param(&conv_name(w))?;
            let b = tape.param(&conv_bias_name(w))?;
            let pre = tape.affine(u, filt, b)?;
            let act = tape.relu(pre);
            pooled.push(tape.segment_max(act, &windows)?);
        }
        Ok(tape.concat_cols(&pooled)?)
    }

    /// Error logits, `batch.len() × 1`. Dropout is applied when `rng` is given.
    pub fn logits(&self, tape: &mut Tape<'_>, batch: &[&[u32]], rng: Option<&mut ChaCha8Rng>) -> Result<NodeId, ModelError> {
        let mut z = self.features(tape, batch)?;
        if let Some(rng) = rng {
            if self.config.dropout > 0.0 {
                z = tape.dropout(z, self.config.dropout, rng)?;
            }
        }
        let w = tape.param(OUT_W)?;
        let b = tape.param(OUT_B)?;
        Ok(tape.affine(z, w, b)?)
    }

    /// Error probability per sentence.
    pub fn probabilities(&self, store: &ParameterStore, batch: &[&[u32]]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new(store);
        let l = self.logits(&mut tape, batch, None)?;
        let p = tape.sigmoid(l);
        Ok(tape.value(p).data().to_vec())
    }

    /// Summed binary cross-entropy over a batch.
    pub fn loss(&self, tape: &mut Tape<'_>, batch: &[&CnnExample], rng: Option<&mut ChaCha8Rng>) -> Result<NodeId, ModelError> {
        let ids: Vec<&[u32]> = batch.iter().map(|e| e.ids.as_slice()).collect();
        let logits = self.logits(tape, &ids, rng)?;
        let labels: Vec<f64> = batch.iter().map(|e| if e.label { 1.0 } else { 0.0 }).collect();
        Ok(tape.bce_with_logits(logits, &labels, &vec![1.0; labels.len()])?)
    }
}

impl Trainable for CnnClassifier {
    type Example = CnnExample;

    fn kind(&self) -> ModelKind {
        ModelKind::Cnn
    }

    fn register(&self, store: &mut ParameterStore) -> Result<(), ModelError> {
        let c = &self.config;
        store.insert(EMBEDDING, Tensor::zeros(&[self.vocab_size, c.word_dim]))?;
        for &w in &c.widths {
            store.insert(&conv_name(w), Tensor::zeros(&[c.feature_maps, w * c.word_dim]))?;
            store.insert(&conv_bias_name(w), Tensor::zeros(&[c.feature_maps]))?;
        }
        store.insert(OUT_W, Tensor::zeros(&[1, self.feature_dim()]))?;
        store.insert(OUT_B, Tensor::zeros(&[1]))?;
        Ok(())
    }

    fn example_len(&self, ex: &CnnExample) -> usize {
        ex.ids.len()
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&CnnExample],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, usize), ModelError> {
        Ok((self.loss(tape, batch, rng)?, batch.len()))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "cnn": self.config, "vocab_size": self.vocab_size })
    }
}

/// `p ≥ τ`; a probability exactly at the threshold counts as an error.
pub fn cnn_predict(probability: f64, threshold: f64) -> bool {
    probability >= threshold
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub metrics: Metrics,
    pub positives: usize,
}

/// Picks the threshold maximizing F1; ties go to the threshold closest to 0.5.
pub fn tune_threshold(probs: &[f64], gold: &[bool], grid: &[f64]) -> Result<(f64, Vec<ThresholdRow>), ModelError> {
    if probs.is_empty() {
        return Err(ModelError::Empty("tuning set"));
    }
    if probs.len() != gold.len() {
        return Err(ModelError::Config(format!("{} probabilities but {} labels", probs.len(), gold.len())));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &t in grid {
        if !(t > 0.0 && t < 1.0) {
            return Err(ModelError::Config(format!("threshold {t} outside (0, 1)")));
        }
        let pred: Vec<bool> = probs.iter().map(|&p| cnn_predict(p, t)).collect();
        rows.push(ThresholdRow {
            threshold: t,
            metrics: Metrics::from_labels(&pred, gold),
            positives: pred.iter().filter(|&&x| x).count(),
        });
    }
    let best = rows
        .iter()
        .max_by(|a, b| {
            a.metrics
                .f1
                .total_cmp(&b.metrics.f1)
                .then((b.threshold - 0.5).abs().total_cmp(&(a.threshold - 0.5).abs()))
        })
        .ok_or(ModelError::Empty("threshold grid"))?;
    Ok((best.threshold, rows))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::compute::{grad_check, GradCheckOptions};
    use crate::trainer::{Optimizer, OptimizerState};

    fn tiny(mode: EmbeddingMode) -> CnnClassifier {
        let c = CnnConfig { widths: vec![2, 3], feature_maps: 3, word_dim: 4, embedding: mode, dropout: 0.0, threshold: 0.5 };
        CnnClassifier::new(c, 9).unwrap()
    }

    fn random_store(m: &CnnClassifier, seed: u64) -> ParameterStore {
        let mut s = m.new_store().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = s.ids().collect();
        for id in ids {
            for v in s.value_mut(id).data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        s
    }

    #[test]
    fn zero_output_layer_gives_one_half_and_outputs_are_probabilities() {
        let m = tiny(EmbeddingMode::Nonstatic);
        let mut s = random_store(&m, 1);
        let p = m.probabilities(&s, &[&[1, 2, 3], &[4]]).unwrap();
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
        for name in [OUT_W, OUT_B] {
            let id = s.id(name).unwrap();
            s.value_mut(id).fill(0.0);
        }
        assert_eq!(m.probabilities(&s, &[&[1, 2, 3], &[4]]).unwrap(), vec![0.5, 0.5]);
        assert!(m.probabilities(&s, &[&[]]).is_err());
    }

    #[test]
    fn hand_convolution() {
        // one width-2 filter over 1-d embeddings e = [1, 2, 3] for ids 0..3
        let c = CnnConfig { widths: vec![2], feature_maps: 1, word_dim: 1, embedding: EmbeddingMode::Static, dropout: 0.0, threshold: 0.5 };
        let m = CnnClassifier::new(c, 3).unwrap();
        let mut s = m.new_store().unwrap();
        let set = |s: &mut ParameterStore, n: &str, v: &[f64]| {
            let id = s.id(n).unwrap();
            s.value_mut(id).data_mut().copy_from_slice(v);
        };
        set(&mut s, EMBEDDING, &[1.0, 2.0, 3.0]);
        set(&mut s, "cnn.conv2", &[1.0, -1.0]);
        set(&mut s, "cnn.conv2.b", &[0.5]);
        // windows: (1,2) → 1−2+0.5 = −0.5, (2,3) → −0.5, (3,1) → 2.5
        let mut tape = Tape::new(&s);
        let f = m.features(&mut tape, &[&[0, 1, 2, 0]]).unwrap();
        assert_eq!(tape.value(f).data(), &[2.5]);
        // single word is zero-padded to the filter width: 3·1 − 0 + 0.5
        let mut tape = Tape::new(&s);
        let f = m.features(&mut tape, &[&[2]]).unwrap();
        assert_eq!(tape.value(f).data(), &[3.5]);
    }

    #[test]
    fn dominated_token_leaves_pooled_features_unchanged() {
        let c = CnnConfig { widths: vec![1], feature_maps: 2, word_dim: 2, embedding: EmbeddingMode::Static, dropout: 0.0, threshold: 0.5 };
        let m = CnnClassifier::new(c, 4).unwrap();
        let mut s = m.new_store().unwrap();
        let id = s.id(EMBEDDING).unwrap();
        s.value_mut(id).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.1, 0.1]);
        let id = s.id("cnn.conv1").unwrap();
        s.value_mut(id).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let feats = |ids: &[u32]| {
            let mut tape = Tape::new(&s);
            let f = m.features(&mut tape, &[ids]).unwrap();
            tape.value(f).data().to_vec()
        };
        assert_eq!(feats(&[0, 1]), feats(&[0, 3, 1]));
        assert_eq!(feats(&[0, 1]), feats(&[0, 1, 2]));
    }

    #[test]
    fn confident_correct_predictions_have_zero_loss() {
        let m = tiny(EmbeddingMode::Nonstatic);
        let mut s = random_store(&m, 2);
        let w = s.id(OUT_W).unwrap();
        s.value_mut(w).fill(0.0);
        let b = s.id(OUT_B).unwrap();
        s.value_mut(b).data_mut()[0] = 1e3;
        let ex = CnnExample { ids: vec![1, 2], label: true };
        let mut tape = Tape::new(&s);
        let l = m.loss(&mut tape, &[&ex], None).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn static_mode_only_freezes_the_table() {
        let batch = [CnnExample { ids: vec![1, 2, 3, 4], label: true }, CnnExample { ids: vec![5, 6], label: false }];
        let refs: Vec<&CnnExample> = batch.iter().collect();
        let mut after = Vec::new();
        for mode in [EmbeddingMode::Static, EmbeddingMode::Nonstatic] {
            let m = tiny(mode);
            let mut s = random_store(&m, 3);
            let mut tape = Tape::new(&s);
            let l = m.loss(&mut tape, &refs, None).unwrap();
            let g = tape.backward(l).unwrap();
            let emb = s.id(EMBEDDING).unwrap();
            assert_eq!(g.get(emb).is_some(), mode == EmbeddingMode::Nonstatic);
            s.accumulate(&g);
            OptimizerState::default().step(Optimizer::Sgd, &mut s, 0.5);
            after.push(s);
        }
        let (a, b) = (&after[0], &after[1]);
        for id in a.ids() {
            let same = a.value(id) == b.value(id);
            assert_eq!(same, a.name(id) != EMBEDDING, "{}", a.name(id));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = tiny(EmbeddingMode::Nonstatic);
        let mut store = random_store(&m, 4);
        let batch = [CnnExample { ids: vec![1, 2, 3, 4, 5], label: true }, CnnExample { ids: vec![6], label: false }];
        let refs: Vec<&CnnExample> = batch.iter().collect();
        let opts = GradCheckOptions { max_coords_per_param: Some(8), ..Default::default() };
        let report = grad_check(&mut store, |t| m.loss(t, &refs, None), &opts).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn predict_and_threshold_sweep() {
        assert!(cnn_predict(0.7, 0.5));
        assert!(cnn_predict(0.5, 0.5));
        assert!(!cnn_predict(0.49, 0.5));
        let probs = [0.1, 0.35, 0.4, 0.6, 0.8, 0.95];
        let gold = [false, true, false, true, true, true];
        let grid: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();
        let (best, rows) = tune_threshold(&probs, &gold, &grid).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].positives <= w[0].positives);
        }
        // τ = 0.2 or 0.3 catch every error with one false alarm: F1 = 8/9
        assert!((rows[1].metrics.f1 - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(best, 0.3);
        assert!(tune_threshold(&[], &[], &grid).is_err());
        assert!(tune_threshold(&probs, &gold, &[1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CnnConfig::default().validate().is_ok());
        assert!(CnnConfig { widths: vec![3, 3], ..CnnConfig::desk() }.validate().is_err());
        assert!(CnnConfig { widths: vec![0, 3], ..CnnConfig::desk() }.validate().is_err());
        assert!(CnnConfig { threshold: 1.0, ..CnnConfig::desk() }.validate().is_err());
        assert_eq!("static".parse::<EmbeddingMode>().unwrap(), EmbeddingMode::Static);
    }
}
