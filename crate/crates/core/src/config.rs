//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. The
//! optional `preset` (`desk` or `full`) and `model` (`word`, `char`, `cnn`)
//! keys choose the starting point; every other key overrides one field.
//! Unknown or repeated keys are errors.

use std::collections::BTreeMap;

use crate::charword::{InputMode, TagEmbedding};
use crate::cnnclassifier::{CnnConfig, EmbeddingMode};
use crate::corpus::{DatasetSpec, Regime};
use crate::error::ModelError;
use crate::inference::{DecodeOptions, TagBias};
use crate::seq2seq::EncDecConfig;
use crate::trainer::{ModelKind, Optimizer, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelKind,
    pub encdec: EncDecConfig,
    pub cnn: CnnConfig,
    pub train: TrainConfig,
    pub decode: DecodeOptions,
    pub data: DatasetSpec,
    pub vocab_cap: usize,
}

pub fn parse_model_kind(s: &str) -> Result<ModelKind, ModelError> {
    match s {
        "word" => Ok(ModelKind::Word),
        "char" => Ok(ModelKind::Char),
        "cnn" => Ok(ModelKind::Cnn),
        _ => Err(ModelError::Config(format!("unknown model `{s}` (word, char, cnn)"))),
    }
}

fn input_mode(kind: ModelKind) -> InputMode {
    match kind {
        ModelKind::Word => InputMode::Word,
        _ => InputMode::Char,
    }
}

impl RunConfig {
    pub fn preset(preset: Preset, model: ModelKind) -> RunConfig {
        let mode = input_mode(model);
        let (encdec, cnn, mut train, vocab_cap) = match preset {
            Preset::Desk => (EncDecConfig::desk(mode), CnnConfig::desk(), TrainConfig::desk(), 50_000),
            Preset::Full => (EncDecConfig::full(mode), CnnConfig::default(), TrainConfig::default(), 50_000),
        };
        if model == ModelKind::Cnn {
            train = TrainConfig { seed: train.seed, ..TrainConfig::cnn() };
        }
        RunConfig { preset, model, encdec, cnn, train, decode: DecodeOptions::default(), data: DatasetSpec::default(), vocab_cap }
    }

    pub fn desk(model: ModelKind) -> RunConfig {
        Self::preset(Preset::Desk, model)
    }

    pub fn full(model: ModelKind) -> RunConfig {
        Self::preset(Preset::Full, model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encdec.validate()?;
        self.cnn.validate()?;
        self.train.validate()?;
        self.decode.bias.validate()?;
        if self.decode.beam == 0 {
            return Err(ModelError::Config("beam must be at least 1".into()));
        }
        if self.encdec.front.mode != input_mode(self.model) && self.model != ModelKind::Cnn {
            return Err(ModelError::Config("input mode does not match model".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig, ModelError> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if let Some(prev) = seen.insert(k.clone(), i + 1) {
                return Err(ModelError::Config(format!("line {}: `{k}` already set on line {prev}", i + 1)));
            }
            entries.push((i + 1, k, v));
        }
        let get = |key: &str| entries.iter().find(|e| e.1 == key).map(|e| e.2.as_str());
        let preset = match get("preset").unwrap_or("desk") {
            "desk" => Preset::Desk,
            "full" => Preset::Full,
            other => return Err(ModelError::Config(format!("unknown preset `{other}`"))),
        };
        let model = parse_model_kind(get("model").unwrap_or("char"))?;
        let mut c = RunConfig::preset(preset, model);
        for (line, k, v) in &entries {
            if k != "preset" && k != "model" {
                c.set(k, v).map_err(|e| ModelError::Config(format!("line {line}: {e}")))?;
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies `key = value` overrides in order and revalidates. The base
    /// keys `preset` and `model` cannot be overridden.
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<(), ModelError> {
        for (k, v) in overrides {
            if k == "preset" || k == "model" {
                return Err(ModelError::Config(format!("`{k}` cannot be overridden")));
            }
            self.set(k, v).map_err(ModelError::Config)?;
        }
        self.validate()
    }

    /// FNV-1a of [`RunConfig::to_text`], as 16 hex digits.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
        }
        fn flag(key: &str, v: &str) -> Result<bool, String> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(format!("`{key}`: expected true or false, got `{v}`")),
            }
        }
        let e = &mut self.encdec;
        let t = &mut self.train;
        match key {
            "layers" => e.layers = num(key, v)?,
            "hidden" => e.hidden = num(key, v)?,
            "dropout" => e.dropout = num(key, v)?,
            "reverse_source" => e.reverse_source = flag(key, v)?,
            "forget_bias" => e.forget_bias = num(key, v)?,
            "word_dim" => e.front.word_dim = num(key, v)?,
            "tag_embedding" => e.front.tag_embedding = v.parse::<TagEmbedding>().map_err(|x| x.to_string())?,
            "char_dim" => e.front.charcnn.char_dim = num(key, v)?,
            "filter_width" => e.front.charcnn.filter_width = num(key, v)?,
            "feature_maps" => e.front.charcnn.feature_maps = num(key, v)?,
            "highway_layers" => e.front.charcnn.highway_layers = num(key, v)?,
            "max_word_chars" => {
                e.front.charcnn.max_word_chars = num(key, v)?;
                self.data.max_word_chars = e.front.charcnn.max_word_chars;
            }
            "cnn_widths" => {
                self.cnn.widths = v.split(',').map(|w| num(key, w.trim())).collect::<Result<_, _>>()?;
            }
            "cnn_feature_maps" => self.cnn.feature_maps = num(key, v)?,
            "cnn_word_dim" => self.cnn.word_dim = num(key, v)?,
            "cnn_embedding" => self.cnn.embedding = v.parse::<EmbeddingMode>().map_err(|x| x.to_string())?,
            "cnn_dropout" => self.cnn.dropout = num(key, v)?,
            "cnn_threshold" => self.cnn.threshold = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "halving_start" => t.halving_start = if v == "never" { usize::MAX } else { num(key, v)? },
            "stall_halving" => t.stall_halving = flag(key, v)?,
            "stall_tolerance" => t.stall_tolerance = num(key, v)?,
            "clip" => t.clip = num(key, v)?,
            "init_range_word" => t.init_range_word = num(key, v)?,
            "init_range_char" => t.init_range_char = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "optimizer" => t.optimizer = Optimizer::parse(v).map_err(|x| x.to_string())?,
            "max_updates" => t.max_updates = if v == "none" { None } else { Some(num(key, v)?) },
            "grad_chunks" => t.grad_chunks = num(key, v)?,
            "beam" => self.decode.beam = num(key, v)?,
            "extra_len" => self.decode.extra_len = num(key, v)?,
            "length_norm" => self.decode.length_norm = flag(key, v)?,
            "tag_bias" => {
                let xs: Vec<f64> = v.split(',').map(|x| num(key, x.trim())).collect::<Result<_, _>>()?;
                self.decode.bias = match xs.as_slice() {
                    [x] => TagBias::uniform(*x),
                    [a, b, c, d] => TagBias([*a, *b, *c, *d]),
                    _ => return Err("`tag_bias` takes one or four numbers".into()),
                };
            }
            "regime" => self.data.regime = parse_regime(v)?,
            "max_sentence_tokens" => self.data.max_sentence_tokens = num(key, v)?,
            "vocab_cap" => self.vocab_cap = num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every field, in a form [`RunConfig::parse`] reads back exactly.
    pub fn to_text(&self) -> String {
        let e = &self.encdec;
        let cc = &e.front.charcnn;
        let t = &self.train;
        let b = self.decode.bias.0;
        let join = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let lines = [
            format!("preset = {}", if self.preset == Preset::Desk { "desk" } else { "full" }),
            format!("model = {}", self.model.name()),
            format!("layers = {}", e.layers),
            format!("hidden = {}", e.hidden),
            format!("dropout = {}", e.dropout),
            format!("reverse_source = {}", e.reverse_source),
            format!("forget_bias = {}", e.forget_bias),
            format!("word_dim = {}", e.front.word_dim),
            format!("tag_embedding = {}", e.front.tag_embedding),
            format!("char_dim = {}", cc.char_dim),
            format!("filter_width = {}", cc.filter_width),
            format!("feature_maps = {}", cc.feature_maps),
            format!("highway_layers = {}", cc.highway_layers),
            format!("max_word_chars = {}", cc.max_word_chars),
            format!("cnn_widths = {}", join(&self.cnn.widths)),
            format!("cnn_feature_maps = {}", self.cnn.feature_maps),
            format!("cnn_word_dim = {}", self.cnn.word_dim),
            format!("cnn_embedding = {}", self.cnn.embedding),
            format!("cnn_dropout = {}", self.cnn.dropout),
            format!("cnn_threshold = {}", self.cnn.threshold),
            format!("epochs = {}", t.epochs),
            format!("batch_size = {}", t.batch_size),
            format!("lr = {}", t.lr),
            format!(
                "halving_start = {}",
                if t.halving_start == usize::MAX { "never".to_string() } else { t.halving_start.to_string() }
            ),
            format!("stall_halving = {}", t.stall_halving),
            format!("stall_tolerance = {}", t.stall_tolerance),
            format!("clip = {}", t.clip),
            format!("init_range_word = {}", t.init_range_word),
            format!("init_range_char = {}", t.init_range_char),
            format!("seed = {}", t.seed),
            format!("optimizer = {}", t.optimizer.name()),
            format!("max_updates = {}", t.max_updates.map_or("none".to_string(), |m| m.to_string())),
            format!("grad_chunks = {}", t.grad_chunks),
            format!("beam = {}", self.decode.beam),
            format!("extra_len = {}", self.decode.extra_len),
            format!("length_norm = {}", self.decode.length_norm),
            format!("tag_bias = {},{},{},{}", b[0], b[1], b[2], b[3]),
            format!("regime = {}", regime_text(&self.data.regime)),
            format!("max_sentence_tokens = {}", self.data.max_sentence_tokens),
            format!("vocab_cap = {}", self.vocab_cap),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}

/// `plus-all`, `edits-only` or `plus-sample:N[:SEED]`.
pub fn parse_regime(v: &str) -> Result<Regime, String> {
    match v {
        "plus-all" => Ok(Regime::PlusAll),
        "edits-only" => Ok(Regime::EditsOnly),
        _ => {
            let rest = v.strip_prefix("plus-sample:").ok_or_else(|| format!("unknown regime `{v}`"))?;
            let mut it = rest.split(':');
            let n = it.next().and_then(|x| x.parse().ok()).ok_or_else(|| format!("bad sample size in `{v}`"))?;
            let seed = match it.next() {
                Some(s) => s.parse().map_err(|_| format!("bad seed in `{v}`"))?,
                None => 1,
            };
            Ok(Regime::PlusSample { n, seed })
        }
    }
}

pub fn regime_text(r: &Regime) -> String {
    match r {
        Regime::PlusAll => "plus-all".into(),
        Regime::EditsOnly => "edits-only".into(),
        Regime::PlusSample { n, seed } => format!("plus-sample:{n}:{seed}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for p in [Preset::Desk, Preset::Full] {
            for m in [ModelKind::Word, ModelKind::Char, ModelKind::Cnn] {
                let c = RunConfig::preset(p, m);
                assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
            }
        }
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let c = RunConfig::parse("model = word\n# comment\nhidden = 32\ntag_bias = 1.5\nregime = plus-sample:100:7\n").unwrap();
        assert_eq!(c.encdec.hidden, 32);
        assert_eq!(c.encdec.front.mode, InputMode::Word);
        assert_eq!(c.decode.bias, TagBias::uniform(1.5));
        assert_eq!(c.data.regime, Regime::PlusSample { n: 100, seed: 7 });
        let err = RunConfig::parse("hiden = 3\n").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("hiden"), "{err}");
        assert!(RunConfig::parse("hidden = 3\nhidden = 4\n").is_err());
        assert!(RunConfig::parse("hidden = x\n").is_err());
        assert!(RunConfig::parse("dropout = 1.5\n").is_err());
        assert!(RunConfig::parse("just words\n").is_err());
    }

    #[test]
    fn overrides_and_hash() {
        let mut c = RunConfig::desk(ModelKind::Word);
        let h = c.hash();
        c.apply_overrides(&[("beam".into(), "3".into()), ("tag_bias".into(), "1,0,0,0".into())]).unwrap();
        assert_eq!(c.decode.beam, 3);
        assert_eq!(c.decode.bias, TagBias([1.0, 0.0, 0.0, 0.0]));
        assert_ne!(c.hash(), h);
        assert!(c.apply_overrides(&[("model".into(), "char".into())]).is_err());
        assert!(c.apply_overrides(&[("beam".into(), "0".into())]).is_err());
    }

    #[test]
    fn cnn_preset_uses_its_recipe() {
        let c = RunConfig::desk(ModelKind::Cnn);
        assert_eq!(c.train.optimizer.name(), "adadelta");
        assert_eq!(c.train.epochs, 10);
        assert_eq!(c.cnn.feature_maps, 50);
        assert_eq!(RunConfig::full(ModelKind::Cnn).cnn.feature_maps, 1000);
    }
}
