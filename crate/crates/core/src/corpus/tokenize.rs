//! Deterministic Treebank-style tokenizer driven by a versioned rule file.
//!
//! The shipped rules live in `fixtures/tokenizer_rules.txt`; see that file
//! for the exact procedure.

use std::collections::HashSet;

use once_cell::sync::Lazy;

use super::annotate::Tag;

const DEFAULT_RULES: &str = include_str!("../../fixtures/tokenizer_rules.txt");

static DEFAULT: Lazy<Tokenizer> =
    Lazy::new(|| Tokenizer::from_rules(DEFAULT_RULES).expect("shipped tokenizer rules parse"));

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub version: u32,
    leading: HashSet<char>,
    trailing: HashSet<char>,
    clitics: Vec<String>,
    abbreviations: HashSet<String>,
}

impl Tokenizer {
    pub fn from_rules(text: &str) -> Result<Tokenizer, String> {
        let mut version = None;
        let mut section = String::new();
        let mut t = Tokenizer {
            version: 0,
            leading: HashSet::new(),
            trailing: HashSet::new(),
            clitics: Vec::new(),
            abbreviations: HashSet::new(),
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(v) = line.strip_prefix("version ") {
                version = Some(v.trim().parse::<u32>().map_err(|e| e.to_string())?);
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') && line.len() > 2 {
                section = line[1..line.len() - 1].to_string();
                continue;
            }
            for item in line.split_whitespace() {
                match section.as_str() {
                    "leading" | "trailing" => {
                        let mut chars = item.chars();
                        let c = chars.next().unwrap();
                        if chars.next().is_some() {
                            return Err(format!("`{item}` is not a single character"));
                        }
                        if section == "leading" {
                            t.leading.insert(c);
                        } else {
                            t.trailing.insert(c);
                        }
                    }
                    "clitics" => t.clitics.push(item.to_lowercase()),
                    "abbreviations" => {
                        t.abbreviations.insert(item.to_string());
                    }
                    other => return Err(format!("entry outside a known section: [{other}]")),
                }
            }
        }
        t.version = version.ok_or("missing version line")?;
        // longest suffix first so "n't" wins over "'t"-like overlaps
        t.clitics.sort_by_key(|c| std::cmp::Reverse(c.chars().count()));
        Ok(t)
    }

    /// The tokenizer built from the shipped rule file.
    pub fn default_rules() -> &'static Tokenizer {
        &DEFAULT
    }

    pub fn tokenize(&self, sentence: &str) -> Vec<String> {
        sentence.split_whitespace().flat_map(|c| self.tokenize_chunk(c)).collect()
    }

    /// Tokenizes an annotated line, passing the four tags through untouched.
    pub fn tokenize_annotated(&self, line: &str) -> Vec<String> {
        line.split_whitespace()
            .flat_map(|c| if Tag::parse(c).is_some() { vec![c.to_string()] } else { self.tokenize_chunk(c) })
            .collect()
    }

    fn tokenize_chunk(&self, chunk: &str) -> Vec<String> {
        let mut chars: Vec<char> = chunk.chars().collect();
        let mut head = Vec::new();
        while chars.len() > 1 && self.leading.contains(&chars[0]) {
            head.push(chars.remove(0).to_string());
        }
        let mut tail = Vec::new();
        loop {
            let Some(&last) = chars.last() else { break };
            if chars.len() == 1 || !self.trailing.contains(&last) {
                break;
            }
            let word: String = chars.iter().collect();
            if word.ends_with("...") {
                if word == "..." {
                    break;
                }
                chars.truncate(chars.len() - 3);
                tail.push("...".to_string());
                continue;
            }
            if last == '.' && self.abbreviations.contains(&word) {
                break;
            }
            tail.push(chars.pop().unwrap().to_string());
        }
        tail.reverse();
        let core: String = chars.into_iter().collect();
        let mut out = head;
        out.extend(self.split_clitic(&core));
        out.extend(tail);
        out
    }

    fn split_clitic(&self, word: &str) -> Vec<String> {
        let lower = word.to_lowercase();
        for c in &self.clitics {
            if lower.ends_with(c.as_str()) && lower.len() > c.len() {
                let cut = word.len() - word_suffix_bytes(word, c.chars().count());
                return vec![word[..cut].to_string(), word[cut..].to_string()];
            }
        }
        vec![word.to_string()]
    }
}

fn word_suffix_bytes(word: &str, n_chars: usize) -> usize {
    word.chars().rev().take(n_chars).map(char::len_utf8).sum()
}

/// Tokenizes with the shipped rules.
pub fn tokenize(sentence: &str) -> Vec<String> {
    Tokenizer::default_rules().tokenize(sentence)
}
