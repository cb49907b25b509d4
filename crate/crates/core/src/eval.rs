//! Binary error-detection metrics, baselines and system ensembling.
//!
//! The positive class is "sentence contains an error". Precision, recall
//! and F1 are 0 whenever their denominator is 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("id sets differ; only in predictions: {only_pred:?}; only in gold: {only_gold:?}")]
    IdMismatch { only_pred: Vec<String>, only_gold: Vec<String> },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no systems to ensemble")]
    NoSystems,
}

/// Sentence id → predicted (or gold) label, with provenance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub system: String,
    pub config_hash: String,
    pub labels: BTreeMap<String, bool>,
}

impl PredictionSet {
    pub fn new(system: &str) -> Self {
        PredictionSet { system: system.to_string(), ..Default::default() }
    }

    pub fn from_pairs<I, S>(system: &str, pairs: I) -> Result<PredictionSet, EvalError>
    where
        I: IntoIterator<Item = (S, bool)>,
        S: Into<String>,
    {
        let mut p = PredictionSet::new(system);
        for (id, label) in pairs {
            let id = id.into();
            if p.labels.insert(id.clone(), label).is_some() {
                return Err(EvalError::DuplicateId(id));
            }
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One `id<TAB>label` line per sentence, labels as `0`/`1`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (id, &l) in &self.labels {
            s.push_str(id);
            s.push('\t');
            s.push(if l { '1' } else { '0' });
            s.push('\n');
        }
        s
    }

    /// Parses `id<TAB>label` lines; labels may be `0/1` or `false/true`.
    pub fn from_tsv(system: &str, text: &str) -> Result<PredictionSet, EvalError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |reason: &str| EvalError::Parse { line: i + 1, reason: reason.to_string() };
            let (id, label) = line.split_once('\t').ok_or_else(|| parse_err("expected id<TAB>label"))?;
            let label = match label.trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(parse_err(&format!("bad label `{other}`"))),
            };
            pairs.push((id.to_string(), label));
        }
        PredictionSet::from_pairs(system, pairs)
    }

    fn check_ids(&self, other: &PredictionSet) -> Result<(), EvalError> {
        if self.labels.len() == other.labels.len() && self.labels.keys().eq(other.labels.keys()) {
            return Ok(());
        }
        let a: BTreeSet<&String> = self.labels.keys().collect();
        let b: BTreeSet<&String> = other.labels.keys().collect();
        Err(EvalError::IdMismatch {
            only_pred: a.difference(&b).map(|s| s.to_string()).collect(),
            only_gold: b.difference(&a).map(|s| s.to_string()).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `2PR / (P + R)`, 0 when `P + R = 0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Metrics {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Metrics { tp, fp, fn_, tn, precision, recall, f1: f1_score(precision, recall) }
    }

    /// Counts from aligned prediction and gold vectors.
    pub fn from_labels(predicted: &[bool], gold: &[bool]) -> Metrics {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&p, &g) in predicted.iter().zip(gold) {
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Metrics::from_counts(tp, fp, fn_, tn)
    }

    /// Fixed-precision report, one `key value` per line.
    pub fn report(&self) -> String {
        format!(
            "tp {}\nfp {}\nfn {}\ntn {}\nprecision {:.4}\nrecall {:.4}\nf1 {:.4}\n",
            self.tp, self.fp, self.fn_, self.tn, self.precision, self.recall, self.f1
        )
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P {:.4} R {:.4} F1 {:.4}", self.precision, self.recall, self.f1)
    }
}

/// Scores predictions against gold labels over identical id sets.
pub fn score(predictions: &PredictionSet, gold: &PredictionSet) -> Result<Metrics, EvalError> {
    predictions.check_ids(gold)?;
    let p: Vec<bool> = predictions.labels.values().copied().collect();
    let g: Vec<bool> = gold.labels.values().copied().collect();
    Ok(Metrics::from_labels(&p, &g))
}

/// A fair coin per sentence, in id order.
pub fn random_baseline(gold: &PredictionSet, seed: u64) -> PredictionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PredictionSet {
        system: "random".into(),
        config_hash: format!("seed={seed}"),
        labels: gold.labels.keys().map(|id| (id.clone(), rng.gen_bool(0.5))).collect(),
    }
}

/// Per-sentence majority vote. With an even number of systems a tie is
/// resolved to `tie_positive`.
pub fn ensemble_vote_with(systems: &[PredictionSet], tie_positive: bool) -> Result<PredictionSet, EvalError> {
    let first = systems.first().ok_or(EvalError::NoSystems)?;
    for s in &systems[1..] {
        s.check_ids(first)?;
    }
    let n = systems.len();
    let labels = first
        .labels
        .keys()
        .map(|id| {
            let yes = systems.iter().filter(|s| s.labels[id]).count();
            let label = if 2 * yes == n { tie_positive } else { 2 * yes > n };
            (id.clone(), label)
        })
        .collect();
    let names: Vec<&str> = systems.iter().map(|s| s.system.as_str()).collect();
    Ok(PredictionSet { system: format!("vote({})", names.join(",")), config_hash: String::new(), labels })
}

/// Majority vote with ties counted as errors.
pub fn ensemble_vote(systems: &[PredictionSet]) -> Result<PredictionSet, EvalError> {
    ensemble_vote_with(systems, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(labels: &[bool]) -> PredictionSet {
        PredictionSet::from_pairs("s", labels.iter().enumerate().map(|(i, &l)| (format!("{i:03}"), l))).unwrap()
    }

    #[test]
    fn published_precision_recall_give_published_f1() {
        // from the rounded inputs the result can only be pinned to the
        // propagated rounding error
        assert!((f1_score(0.5526, 0.8126) - 0.6579).abs() <= 1e-4);
        let m = Metrics::from_counts(399, 323, 92, 186);
        let r = m.report();
        assert!(r.contains("precision 0.5526\n") && r.contains("recall 0.8126\n") && r.contains("f1 0.6579\n"), "{r}");
    }

    #[test]
    fn hand_counts() {
        let m = Metrics::from_counts(1, 1, 3, 0);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.25);
        assert!((m.f1 - 1.0 / 3.0).abs() < 1e-15);
        let perfect = score(&set(&[true, false, true]), &set(&[true, false, true])).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let none = Metrics::from_counts(0, 0, 4, 2);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn id_mismatch_lists_both_sides() {
        let a = PredictionSet::from_pairs("a", [("x", true), ("y", false)]).unwrap();
        let b = PredictionSet::from_pairs("b", [("x", true), ("z", false)]).unwrap();
        assert_eq!(
            score(&a, &b),
            Err(EvalError::IdMismatch { only_pred: vec!["y".into()], only_gold: vec!["z".into()] })
        );
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let s = set(&[true, false, false]);
        assert_eq!(PredictionSet::from_tsv("s", &s.to_tsv()).unwrap(), s);
        assert!(matches!(PredictionSet::from_tsv("s", "a\t1\na\t0\n"), Err(EvalError::DuplicateId(_))));
        assert!(matches!(PredictionSet::from_tsv("s", "a 1\n"), Err(EvalError::Parse { line: 1, .. })));
    }

    #[test]
    fn vote_examples() {
        let t = set(&[true]);
        let f = set(&[false]);
        let v = ensemble_vote(&[t.clone(), t.clone(), t.clone(), f.clone(), f.clone()]).unwrap();
        assert!(v.labels["000"]);
        assert_eq!(ensemble_vote(std::slice::from_ref(&f)).unwrap().labels, f.labels);
        assert!(ensemble_vote(&[t.clone(), t, f.clone(), f.clone()]).unwrap().labels["000"]);
        assert!(ensemble_vote(&[]).is_err());
    }

    #[test]
    fn random_baseline_is_seeded() {
        let g = set(&[true; 50]);
        assert_eq!(random_baseline(&g, 3), random_baseline(&g, 3));
        assert_ne!(random_baseline(&g, 3).labels, random_baseline(&g, 4).labels);
    }

    #[test]
    fn report_has_four_decimals() {
        let r = Metrics::from_counts(1, 1, 3, 0).report();
        assert!(r.contains("precision 0.5000\n") && r.contains("f1 0.3333\n"));
    }
}
