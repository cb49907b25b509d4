//! Synthetic corpora for experiments without the original edited data.
//!
//! [`SentenceGenerator`] produces clean academic-register sentences from a
//! small grammar in which every noun phrase carries a determiner, verbs agree
//! with their subject, `a`/`an` follow the next word's initial sound, and
//! prepositions are fixed by the governing verb or adjective. Each
//! corruption rule therefore produces a sentence the grammar never emits.
//!
//! [`synthesize_errors`] corrupts at most one site per sentence and records
//! the inverse edit in the annotated target:
//!
//! | rule | source | annotated target |
//! |---|---|---|
//! | determiner deletion | `cat sat` | `<ins> the </ins> cat sat` |
//! | agreement swap | `it are` | `it <del> are </del> <ins> is </ins>` |
//! | preposition substitution | `depends in` | `depends <del> in </del> <ins> on </ins>` |
//! | article substitution | `an model` | `<del> an </del> <ins> a </ins> model` |

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotate::{AnnotatedPair, Tag, TargetItem, Token};
use super::CorpusError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorRule {
    DeterminerDeletion,
    AgreementSwap,
    PrepositionSubstitution,
    ArticleSubstitution,
}

impl ErrorRule {
    pub const ALL: [ErrorRule; 4] = [
        ErrorRule::DeterminerDeletion,
        ErrorRule::AgreementSwap,
        ErrorRule::PrepositionSubstitution,
        ErrorRule::ArticleSubstitution,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorRule::DeterminerDeletion => "determiner-deletion",
            ErrorRule::AgreementSwap => "agreement-swap",
            ErrorRule::PrepositionSubstitution => "preposition-substitution",
            ErrorRule::ArticleSubstitution => "article-substitution",
        }
    }

    pub fn parse(s: &str) -> Option<ErrorRule> {
        ErrorRule::ALL.into_iter().find(|r| r.name() == s)
    }
}

const DETERMINERS: [&str; 3] = ["the", "a", "an"];
const PREPOSITIONS: [&str; 7] = ["on", "of", "from", "in", "to", "with", "for"];

/// (singular, plural) verb forms that agree with the subject.
const AGREEMENT: &[(&str, &str)] = &[
    ("is", "are"),
    ("was", "were"),
    ("has", "have"),
    ("shows", "show"),
    ("improves", "improve"),
    ("requires", "require"),
    ("describes", "describe"),
    ("reduces", "reduce"),
    ("provides", "provide"),
    ("yields", "yield"),
    ("predicts", "predict"),
    ("supports", "support"),
    ("confirms", "confirm"),
    ("uses", "use"),
    ("produces", "produce"),
    ("depends", "depend"),
    ("relies", "rely"),
    ("consists", "consist"),
    ("differs", "differ"),
    ("results", "result"),
    ("contributes", "contribute"),
    ("focuses", "focus"),
    ("deals", "deal"),
    ("refers", "refer"),
    ("benefits", "benefit"),
    ("suggests", "suggest"),
    ("indicates", "indicate"),
    ("demonstrates", "demonstrate"),
];

const NOUNS: &[(&str, &str)] = &[
    ("method", "methods"),
    ("model", "models"),
    ("algorithm", "algorithms"),
    ("experiment", "experiments"),
    ("analysis", "analyses"),
    ("approach", "approaches"),
    ("system", "systems"),
    ("network", "networks"),
    ("parameter", "parameters"),
    ("dataset", "datasets"),
    ("estimate", "estimates"),
    ("sample", "samples"),
    ("equation", "equations"),
    ("theorem", "theorems"),
    ("function", "functions"),
    ("property", "properties"),
    ("structure", "structures"),
    ("process", "processes"),
    ("measurement", "measurements"),
    ("value", "values"),
    ("error", "errors"),
    ("observation", "observations"),
    ("author", "authors"),
    ("study", "studies"),
    ("framework", "frameworks"),
    ("simulation", "simulations"),
    ("effect", "effects"),
    ("element", "elements"),
    ("image", "images"),
    ("operator", "operators"),
];

const ADJECTIVES: &[&str] = &[
    "new", "simple", "large", "small", "robust", "efficient", "novel", "accurate", "important", "optimal",
    "analytical", "empirical", "unknown", "exact", "general", "linear", "stable", "detailed", "interesting",
    "useful",
];

const TRANSITIVE: &[usize] = &[2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 27];
/// (verb index into AGREEMENT, required preposition)
const PREP_VERBS: &[(usize, &str)] = &[
    (15, "on"),
    (16, "on"),
    (17, "of"),
    (18, "from"),
    (19, "in"),
    (20, "to"),
    (21, "on"),
    (22, "with"),
    (23, "to"),
    (24, "from"),
];
const THAT_VERBS: &[usize] = &[3, 25, 26, 13, 27];
const ADJ_PREPS: &[(&str, &str)] = &[
    ("consistent", "with"),
    ("similar", "to"),
    ("different", "from"),
    ("responsible", "for"),
    ("capable", "of"),
    ("sensitive", "to"),
    ("independent", "of"),
    ("equivalent", "to"),
    ("based", "on"),
    ("related", "to"),
];
const INTROS: &[&[&str]] = &[
    &["In", "this", "paper", ","],
    &["In", "practice", ","],
    &["However", ","],
    &["Moreover", ","],
    &["In", "addition", ","],
];

fn starts_with_vowel_sound(w: &str) -> bool {
    matches!(w.chars().next(), Some('a' | 'e' | 'i' | 'o' | 'u'))
}

/// Seeded generator of grammatical sentences.
pub struct SentenceGenerator {
    rng: ChaCha8Rng,
}

impl SentenceGenerator {
    pub fn new(seed: u64) -> Self {
        SentenceGenerator { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn noun_phrase(&mut self, out: &mut Vec<String>) -> bool {
        let plural = self.rng.gen_bool(0.5);
        let (sg, pl) = *NOUNS.choose(&mut self.rng).unwrap();
        let noun = if plural { pl } else { sg };
        let adj = if self.rng.gen_bool(0.4) { Some(*ADJECTIVES.choose(&mut self.rng).unwrap()) } else { None };
        let next = adj.unwrap_or(noun);
        let r: f64 = self.rng.gen();
        let det = if plural {
            if r < 0.6 {
                "the"
            } else if r < 0.8 {
                "these"
            } else {
                "our"
            }
        } else if r < 0.5 {
            "the"
        } else if r < 0.8 {
            if starts_with_vowel_sound(next) {
                "an"
            } else {
                "a"
            }
        } else if r < 0.9 {
            "this"
        } else {
            "our"
        };
        out.push(det.to_string());
        if let Some(a) = adj {
            out.push(a.to_string());
        }
        out.push(noun.to_string());
        plural
    }

    fn verb(&mut self, idx: usize, plural: bool, out: &mut Vec<String>) {
        let (sg, pl) = AGREEMENT[idx];
        out.push(if plural { pl } else { sg }.to_string());
    }

    fn clause(&mut self, out: &mut Vec<String>, allow_that: bool) {
        let plural = self.noun_phrase(out);
        let kind = self.rng.gen_range(0..if allow_that { 4 } else { 3 });
        match kind {
            0 => {
                let v = *TRANSITIVE.choose(&mut self.rng).unwrap();
                self.verb(v, plural, out);
                self.noun_phrase(out);
            }
            1 => {
                let (v, p) = *PREP_VERBS.choose(&mut self.rng).unwrap();
                self.verb(v, plural, out);
                out.push(p.to_string());
                self.noun_phrase(out);
            }
            2 => {
                self.verb(0, plural, out);
                let (a, p) = *ADJ_PREPS.choose(&mut self.rng).unwrap();
                out.push(a.to_string());
                out.push(p.to_string());
                self.noun_phrase(out);
            }
            _ => {
                let v = *THAT_VERBS.choose(&mut self.rng).unwrap();
                self.verb(v, plural, out);
                out.push("that".to_string());
                self.clause(out, false);
            }
        }
    }

    /// One tokenized sentence, first letter capitalized, ending in ".".
    pub fn sentence(&mut self) -> Vec<Token> {
        let mut words = Vec::new();
        if self.rng.gen_bool(0.25) {
            let intro = *INTROS.choose(&mut self.rng).unwrap();
            words.extend(intro.iter().map(|s| s.to_string()));
        }
        self.clause(&mut words, true);
        words.push(".".to_string());
        let first = &mut words[0];
        let mut cs = first.chars();
        let cap: String = cs.next().map(|c| c.to_uppercase().collect::<String>()).unwrap_or_default() + cs.as_str();
        *first = cap;
        words.into_iter().map(|w| Token::new(w).expect("grammar words are tokens")).collect()
    }

    pub fn sentences(&mut self, n: usize) -> Vec<Vec<Token>> {
        (0..n).map(|_| self.sentence()).collect()
    }
}

fn lower(w: &str) -> String {
    w.to_lowercase()
}

fn with_case_of(template: &str, word: &str) -> String {
    if template.chars().next().is_some_and(char::is_uppercase) {
        let mut cs = word.chars();
        cs.next().map(|c| c.to_uppercase().collect::<String>()).unwrap_or_default() + cs.as_str()
    } else {
        word.to_string()
    }
}

/// Positions in `words` where `rule` can inject an error.
pub fn sites(words: &[Token], rule: ErrorRule) -> Vec<usize> {
    (0..words.len())
        .filter(|&i| {
            let w = lower(&words[i]);
            match rule {
                ErrorRule::DeterminerDeletion => DETERMINERS.contains(&w.as_str()),
                ErrorRule::AgreementSwap => AGREEMENT.iter().any(|(s, p)| *s == w || *p == w),
                ErrorRule::PrepositionSubstitution => words[i].as_str() == w && PREPOSITIONS.contains(&w.as_str()),
                ErrorRule::ArticleSubstitution => w == "a" || w == "an",
            }
        })
        .collect()
}

fn word(s: &str) -> TargetItem {
    TargetItem::Word(Token::new(s).expect("lexicon word"))
}

fn replacement(words: &[Token], i: usize, wrong: String) -> Vec<TargetItem> {
    let mut t: Vec<TargetItem> = words[..i].iter().cloned().map(TargetItem::Word).collect();
    t.push(TargetItem::Tag(Tag::DelOpen));
    t.push(word(&wrong));
    t.push(TargetItem::Tag(Tag::DelClose));
    t.push(TargetItem::Tag(Tag::InsOpen));
    t.push(TargetItem::Word(words[i].clone()));
    t.push(TargetItem::Tag(Tag::InsClose));
    t.extend(words[i + 1..].iter().cloned().map(TargetItem::Word));
    t
}

/// Applies `rule` at position `i` of a clean sentence, returning the
/// annotated target whose source is the corrupted sentence.
pub fn corrupt_at<R: Rng>(words: &[Token], rule: ErrorRule, i: usize, rng: &mut R) -> Vec<TargetItem> {
    let w = words[i].as_str();
    match rule {
        ErrorRule::DeterminerDeletion => {
            let mut t: Vec<TargetItem> = words[..i].iter().cloned().map(TargetItem::Word).collect();
            t.push(TargetItem::Tag(Tag::InsOpen));
            t.push(TargetItem::Word(words[i].clone()));
            t.push(TargetItem::Tag(Tag::InsClose));
            t.extend(words[i + 1..].iter().cloned().map(TargetItem::Word));
            t
        }
        ErrorRule::AgreementSwap => {
            let l = lower(w);
            let (s, p) = AGREEMENT.iter().find(|(s, p)| *s == l || *p == l).unwrap();
            let other = if *s == l { p } else { s };
            replacement(words, i, with_case_of(w, other))
        }
        ErrorRule::PrepositionSubstitution => {
            let others: Vec<&str> = PREPOSITIONS.iter().copied().filter(|p| *p != w).collect();
            replacement(words, i, others.choose(rng).unwrap().to_string())
        }
        ErrorRule::ArticleSubstitution => {
            let other = if lower(w) == "a" { "an" } else { "a" };
            replacement(words, i, with_case_of(w, other))
        }
    }
}

/// Corrupts each sentence with probability `rate` (if any rule applies),
/// choosing a rule uniformly among those with a site, then a site uniformly.
pub fn synthesize_errors(
    clean: &[Vec<Token>],
    rules: &[ErrorRule],
    rate: f64,
    seed: u64,
) -> Result<Vec<AnnotatedPair>, CorpusError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(CorpusError::Synthesis(format!("rate {rate} outside [0, 1]")));
    }
    if rules.is_empty() && rate > 0.0 {
        return Err(CorpusError::Synthesis("empty rule set with positive rate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(clean.len());
    for words in clean {
        let draw: f64 = rng.gen();
        let applicable: Vec<(ErrorRule, Vec<usize>)> =
            rules.iter().map(|&r| (r, sites(words, r))).filter(|(_, s)| !s.is_empty()).collect();
        if draw < rate && !applicable.is_empty() {
            let (rule, positions) = applicable.choose(&mut rng).unwrap();
            let i = *positions.choose(&mut rng).unwrap();
            let target = corrupt_at(words, *rule, i, &mut rng);
            out.push(AnnotatedPair::from_target(target)?);
        } else {
            out.push(AnnotatedPair::clean(words.clone()));
        }
    }
    Ok(out)
}
