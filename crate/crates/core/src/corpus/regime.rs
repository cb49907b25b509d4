use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotate::{parse_annotated, AnnotatedPair, Token};
use super::encode::Regime;
use super::CorpusError;

/// Counts reported alongside an assembled training set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RegimeCounts {
    pub with_edits: usize,
    pub without_edits: usize,
    pub available_without_edits: usize,
}

/// Selects the training pairs for a regime. Selected pairs keep their
/// corpus order; the unedited sample depends only on `(n, seed)`.
pub fn assemble_regime(
    pairs: &[AnnotatedPair],
    regime: Regime,
) -> Result<(Vec<AnnotatedPair>, RegimeCounts), CorpusError> {
    let clean: Vec<usize> = (0..pairs.len()).filter(|&i| !pairs[i].label).collect();
    let mut keep = vec![false; pairs.len()];
    for (i, p) in pairs.iter().enumerate() {
        keep[i] = p.label;
    }
    match regime {
        Regime::EditsOnly => {}
        Regime::PlusAll => clean.iter().for_each(|&i| keep[i] = true),
        Regime::PlusSample { n, seed } => {
            if n > clean.len() {
                return Err(CorpusError::SampleTooLarge { requested: n, available: clean.len() });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for k in sample(&mut rng, clean.len(), n) {
                keep[clean[k]] = true;
            }
        }
    }
    let out: Vec<AnnotatedPair> = pairs.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| p.clone()).collect();
    let with_edits = out.iter().filter(|p| p.label).count();
    let counts = RegimeCounts {
        with_edits,
        without_edits: out.len() - with_edits,
        available_without_edits: clean.len(),
    };
    Ok((out, counts))
}

/// Sentence-level classifier examples: unedited pairs give their source as
/// an error-free example, edited pairs give their source as an error
/// example and, when `with_corrections` is set, their corrected sentence as
/// an additional error-free example.
pub fn classifier_examples(pairs: &[AnnotatedPair], with_corrections: bool) -> Vec<(Vec<Token>, bool)> {
    let mut out = Vec::new();
    for p in pairs {
        out.push((p.source.clone(), p.label));
        if p.label && with_corrections {
            out.push((p.corrected(), false));
        }
    }
    out
}

/// One line of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source: String,
    pub target: String,
    pub label: bool,
    pub split: String,
}

impl ManifestRecord {
    pub fn from_pair(pair: &AnnotatedPair, split: &str) -> ManifestRecord {
        ManifestRecord {
            source: pair.source_text(),
            target: pair.serialize(),
            label: pair.label,
            split: split.to_string(),
        }
    }

    pub fn to_pair(&self) -> Result<AnnotatedPair, CorpusError> {
        let pair = parse_annotated(&self.target)?;
        if pair.source_text() != self.source || pair.label != self.label {
            return Err(CorpusError::Manifest(format!("record inconsistent with its target: {}", self.target)));
        }
        Ok(pair)
    }
}

/// JSON-lines dataset manifest, one record per pair in the given order.
pub fn write_manifest<'a>(splits: impl IntoIterator<Item = (&'a str, &'a [AnnotatedPair])>) -> String {
    let mut out = String::new();
    for (split, pairs) in splits {
        for p in pairs {
            out.push_str(&serde_json::to_string(&ManifestRecord::from_pair(p, split)).expect("serializable"));
            out.push('\n');
        }
    }
    out
}

pub fn read_manifest(text: &str) -> Result<Vec<ManifestRecord>, CorpusError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CorpusError::Manifest(format!("line {}: {}", i + 1, e))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<AnnotatedPair> {
        ["a <ins> b </ins>", "c d", "<del> e </del> f", "g h", "i <del> j </del> <ins> k </ins>"]
            .iter()
            .map(|l| parse_annotated(l).unwrap())
            .collect()
    }

    #[test]
    fn edits_only_and_plus_all() {
        let (e, c) = assemble_regime(&corpus(), Regime::EditsOnly).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(c.without_edits, 0);
        let (all, _) = assemble_regime(&corpus(), Regime::PlusAll).unwrap();
        assert_eq!(all.len(), 5);
    }

    #[test]
    fn sample_is_seed_reproducible() {
        let a = assemble_regime(&corpus(), Regime::PlusSample { n: 1, seed: 1 }).unwrap().0;
        let b = assemble_regime(&corpus(), Regime::PlusSample { n: 1, seed: 1 }).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(matches!(
            assemble_regime(&corpus(), Regime::PlusSample { n: 3, seed: 1 }),
            Err(CorpusError::SampleTooLarge { requested: 3, available: 2 })
        ));
    }

    #[test]
    fn classifier_examples_with_corrections() {
        let ex = classifier_examples(&corpus(), true);
        assert_eq!(ex.len(), 8);
        assert_eq!(ex.iter().filter(|e| e.1).count(), 3);
        let ex = classifier_examples(&corpus(), false);
        assert_eq!(ex.len(), 5);
    }

    #[test]
    fn manifest_round_trip() {
        let pairs = corpus();
        let text = write_manifest([("train", &pairs[..3]), ("dev", &pairs[3..])]);
        let recs = read_manifest(&text).unwrap();
        assert_eq!(recs.len(), 5);
        assert_eq!(recs[4].split, "dev");
        for (r, p) in recs.iter().zip(&pairs) {
            assert_eq!(&r.to_pair().unwrap(), p);
        }
    }
}
