use serde::{Deserialize, Serialize};

use crate::compute::{NodeId, ParameterStore, Tape, Tensor};
use crate::corpus::vocab::PAD_CHAR_ID;
use crate::error::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharCnnConfig {
    pub char_dim: usize,
    pub filter_width: usize,
    pub feature_maps: usize,
    pub highway_layers: usize,
    pub max_word_chars: usize,
}

impl Default for CharCnnConfig {
    fn default() -> Self {
        CharCnnConfig { char_dim: 25, filter_width: 6, feature_maps: 1000, highway_layers: 2, max_word_chars: 35 }
    }
}

impl CharCnnConfig {
    pub fn desk() -> Self {
        CharCnnConfig { char_dim: 15, feature_maps: 50, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.char_dim == 0 || self.filter_width == 0 || self.feature_maps == 0 || self.max_word_chars == 0 {
            return Err(ModelError::Config(format!("char CNN dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// One highway layer over `dim`-wide rows.
#[derive(Clone, Debug)]
pub struct HighwayParams {
    pub w: String,
    pub b: String,
    pub gate_w: String,
    pub gate_b: String,
    pub dim: usize,
}

impl HighwayParams {
    pub fn new(prefix: &str, dim: usize) -> Self {
        HighwayParams {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            gate_w: format!("{prefix}.gate_w"),
            gate_b: format!("{prefix}.gate_b"),
            dim,
        }
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<(), ModelError> {
        let d = self.dim;
        store.insert(&self.w, Tensor::zeros(&[d, d]))?;
        store.insert(&self.b, Tensor::zeros(&[d]))?;
        store.insert(&self.gate_w, Tensor::zeros(&[d, d]))?;
        store.insert(&self.gate_b, Tensor::zeros(&[d]))?;
        Ok(())
    }
}

/// Parameter names of one CharCNN plus its highway stack.
#[derive(Clone, Debug)]
pub struct CharCnnParams {
    pub embedding: String,
    /// `h × (w·c)`: row `k` is filter `H_k` flattened position-major.
    pub filters: String,
    pub filter_bias: String,
    pub highway: Vec<HighwayParams>,
    pub config: CharCnnConfig,
}

impl CharCnnParams {
    pub fn new(prefix: &str, config: CharCnnConfig) -> Self {
        let highway = (0..config.highway_layers)
            .map(|k| HighwayParams::new(&format!("{prefix}.hw{k}"), config.feature_maps))
            .collect();
        CharCnnParams {
            embedding: format!("{prefix}.char_emb"),
            filters: format!("{prefix}.filters"),
            filter_bias: format!("{prefix}.filter_b"),
            highway,
            config,
        }
    }

    pub fn register(&self, store: &mut ParameterStore, n_chars: usize) -> Result<(), ModelError> {
        let c = &self.config;
        store.insert(&self.embedding, Tensor::zeros(&[n_chars, c.char_dim]))?;
        store.insert(&self.filters, Tensor::zeros(&[c.feature_maps, c.filter_width * c.char_dim]))?;
        store.insert(&self.filter_bias, Tensor::zeros(&[c.feature_maps]))?;
        for h in &self.highway {
            h.register(store)?;
        }
        Ok(())
    }
}

/// Pads a word to at least `width` characters and truncates to `max_chars`.
pub fn pad_word(word: &[u32], width: usize, max_chars: usize) -> Vec<u32> {
    let mut w: Vec<u32> = word.iter().copied().take(max_chars.max(width)).collect();
    while w.len() < width {
        w.push(PAD_CHAR_ID);
    }
    w
}

/// Max-over-time CharCNN features for a batch of words, `words.len() × h`.
///
/// `z[k] = max_j tanh(⟨P[:, j..j+w], H_k⟩ + b_k)`; words shorter than the
/// filter width are padded with the padding character up to the width.
pub fn charcnn_forward(tape: &mut Tape<'_>, words: &[Vec<u32>], p: &CharCnnParams) -> Result<NodeId, ModelError> {
    if words.is_empty() {
        return Err(ModelError::Empty("word batch"));
    }
    let w = p.config.filter_width;
    let mut ids = Vec::new();
    let mut segments = Vec::with_capacity(words.len());
    let mut windows = Vec::with_capacity(words.len());
    for word in words {
        if word.is_empty() {
            return Err(ModelError::Empty("word"));
        }
        let padded = pad_word(word, w, p.config.max_word_chars);
        segments.push((ids.len(), padded.len()));
        windows.push(padded.len() - w + 1);
        ids.extend(padded.into_iter().map(|c| c as usize));
    }
    let table = tape.param(&p.embedding)?;
    let chars = tape.gather(table, &ids)?;
    let unfolded = tape.unfold(chars, &segments, w)?;
    let filters = tape.param(&p.filters)?;
    let bias = tape.param(&p.filter_bias)?;
    let pre = tape.affine(unfolded, filters, bias)?;
    let act = tape.tanh(pre);
    Ok(tape.segment_max(act, &windows)?)
}

/// `ẑ = r ⊙ relu(W z + b) + (1 − r) ⊙ z`, `r = σ(W_r z + b_r)`, per layer.
pub fn highway_forward(tape: &mut Tape<'_>, z: NodeId, layers: &[HighwayParams]) -> Result<NodeId, ModelError> {
    let mut z = z;
    for layer in layers {
        let cols = tape.value(z).cols();
        if cols != layer.dim {
            return Err(ModelError::Config(format!("highway layer expects width {}, got {}", layer.dim, cols)));
        }
        let (w, b) = (tape.param(&layer.w)?, tape.param(&layer.b)?);
        let (gw, gb) = (tape.param(&layer.gate_w)?, tape.param(&layer.gate_b)?);
        let t = tape.affine(z, w, b)?;
        let t = tape.relu(t);
        let r = tape.affine(z, gw, gb)?;
        let r = tape.sigmoid(r);
        let carry = tape.one_minus(r);
        let a = tape.mul(r, t)?;
        let c = tape.mul(carry, z)?;
        z = tape.add(a, c)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cnn(c: usize, w: usize, h: usize, n_chars: usize) -> (ParameterStore, CharCnnParams) {
        let cfg = CharCnnConfig { char_dim: c, filter_width: w, feature_maps: h, highway_layers: 0, max_word_chars: 35 };
        let p = CharCnnParams::new("cnn", cfg);
        let mut store = ParameterStore::new();
        p.register(&mut store, n_chars).unwrap();
        (store, p)
    }

    #[test]
    fn zero_filter_gives_zero_feature() {
        let (store, p) = cnn(3, 2, 4, 5);
        let mut tape = Tape::new(&store);
        let z = charcnn_forward(&mut tape, &[vec![2, 3, 4]], &p).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0; 4]);
    }

    #[test]
    fn hand_convolution() {
        // c=1, w=2, H=[1,1], embeddings of chars 2,3,4 are 1,2,3
        let (mut store, p) = cnn(1, 2, 1, 5);
        *store.value_mut(store.id(&p.embedding).unwrap()) = Tensor::matrix(5, 1, vec![0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        *store.value_mut(store.id(&p.filters).unwrap()) = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let mut tape = Tape::new(&store);
        let z = charcnn_forward(&mut tape, &[vec![2, 3, 4]], &p).unwrap();
        assert!((tape.value(z).data()[0] - 0.9999092042625951).abs() < 1e-12);
        // a word of exactly width w has one window
        let z = charcnn_forward(&mut tape, &[vec![2, 3]], &p).unwrap();
        assert!((tape.value(z).data()[0] - 0.9950547536867305).abs() < 1e-12);
    }

    #[test]
    fn short_words_are_padded() {
        assert_eq!(pad_word(&[7], 3, 35), vec![7, PAD_CHAR_ID, PAD_CHAR_ID]);
        assert_eq!(pad_word(&[1, 2, 3, 4], 2, 3), vec![1, 2, 3]);
        let (store, p) = cnn(2, 6, 3, 5);
        let mut tape = Tape::new(&store);
        assert!(charcnn_forward(&mut tape, &[vec![2]], &p).is_ok());
        assert!(charcnn_forward(&mut tape, &[vec![]], &p).is_err());
    }

    fn highway_store(r_bias: f64) -> (ParameterStore, HighwayParams) {
        let hp = HighwayParams::new("hw", 2);
        let mut store = ParameterStore::new();
        hp.register(&mut store).unwrap();
        *store.value_mut(store.id(&hp.w).unwrap()) = Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        *store.value_mut(store.id(&hp.gate_b).unwrap()) = Tensor::filled(&[2], r_bias);
        (store, hp)
    }

    #[test]
    fn highway_saturation() {
        let z0 = Tensor::matrix(1, 2, vec![0.7, 0.2]).unwrap();
        let (store, hp) = highway_store(-1e9);
        let mut tape = Tape::new(&store);
        let z = tape.constant(z0.clone());
        let out = highway_forward(&mut tape, z, std::slice::from_ref(&hp)).unwrap();
        assert_eq!(tape.value(out), &z0);

        let (store, hp) = highway_store(1e9);
        let mut tape = Tape::new(&store);
        let z = tape.constant(z0);
        let out = highway_forward(&mut tape, z, &[hp]).unwrap();
        // relu([0.7+0.4, -2.1+0.1])
        let v = tape.value(out).data();
        assert!((v[0] - 1.1).abs() < 1e-12 && v[1] == 0.0);
    }

    #[test]
    fn highway_hand_case() {
        let hp = HighwayParams::new("hw", 1);
        let mut store = ParameterStore::new();
        hp.register(&mut store).unwrap();
        *store.value_mut(store.id(&hp.w).unwrap()) = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let mut tape = Tape::new(&store);
        let z = tape.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let out = highway_forward(&mut tape, z, &[hp]).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0]);
    }

    #[test]
    fn highway_width_mismatch() {
        let (store, hp) = highway_store(0.0);
        let mut tape = Tape::new(&store);
        let z = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        assert!(matches!(highway_forward(&mut tape, z, &[hp]), Err(ModelError::Config(_))));
    }
}
