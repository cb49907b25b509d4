use std::fmt;
use std::ops::Deref;

use super::CorpusError;

/// The four annotation tags. Deletion spans hold source-only tokens,
/// insertion spans hold target-only tokens; a replacement is a deletion
/// span followed by an insertion span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    InsOpen,
    InsClose,
    DelOpen,
    DelClose,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::InsOpen, Tag::InsClose, Tag::DelOpen, Tag::DelClose];

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::InsOpen => "<ins>",
            Tag::InsClose => "</ins>",
            Tag::DelOpen => "<del>",
            Tag::DelClose => "</del>",
        }
    }

    pub fn parse(s: &str) -> Option<Tag> {
        Tag::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A non-empty, whitespace-free surface token. Case and digits are kept.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(String);

impl Token {
    pub fn new(s: impl Into<String>) -> Result<Token, CorpusError> {
        let s = s.into();
        if s.is_empty() || s.chars().any(char::is_whitespace) {
            return Err(CorpusError::InvalidToken(s));
        }
        Ok(Token(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Deref for Token {
    type Target = str;
    fn deref(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TargetItem {
    Word(Token),
    Tag(Tag),
}

impl TargetItem {
    pub fn as_str(&self) -> &str {
        match self {
            TargetItem::Word(t) => t.as_str(),
            TargetItem::Tag(t) => t.as_str(),
        }
    }

    pub fn is_tag(&self) -> bool {
        matches!(self, TargetItem::Tag(_))
    }
}

/// Source sentence, tag-annotated target, and the sentence-level error label.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AnnotatedPair {
    pub source: Vec<Token>,
    pub target: Vec<TargetItem>,
    pub label: bool,
}

impl AnnotatedPair {
    /// Builds a pair from an annotated target, checking tag structure and
    /// deriving the source.
    pub fn from_target(target: Vec<TargetItem>) -> Result<AnnotatedPair, CorpusError> {
        validate_tags(&target)?;
        let source = derive_source(&target);
        let label = target.iter().any(TargetItem::is_tag);
        Ok(AnnotatedPair { source, target, label })
    }

    /// Error-free pair whose target equals the source.
    pub fn clean(source: Vec<Token>) -> AnnotatedPair {
        let target = source.iter().cloned().map(TargetItem::Word).collect();
        AnnotatedPair { source, target, label: false }
    }

    /// Canonical serialization: target items joined by single spaces.
    pub fn serialize(&self) -> String {
        join(self.target.iter().map(TargetItem::as_str))
    }

    pub fn source_text(&self) -> String {
        join(self.source.iter().map(Token::as_str))
    }

    /// The corrected sentence: deletion spans dropped, insertion contents kept.
    pub fn corrected(&self) -> Vec<Token> {
        apply_corrections(&self.target)
    }
}

fn join<'a>(it: impl Iterator<Item = &'a str>) -> String {
    it.collect::<Vec<_>>().join(" ")
}

/// Source side of an annotated target: insertion spans (with their tags)
/// removed, deletion markers removed with their contents kept.
pub fn derive_source(target: &[TargetItem]) -> Vec<Token> {
    let mut out = Vec::new();
    let mut in_ins = false;
    for item in target {
        match item {
            TargetItem::Tag(Tag::InsOpen) => in_ins = true,
            TargetItem::Tag(Tag::InsClose) => in_ins = false,
            TargetItem::Tag(_) => {}
            TargetItem::Word(w) if !in_ins => out.push(w.clone()),
            TargetItem::Word(_) => {}
        }
    }
    out
}

/// Target side with edits applied: deletion spans removed, insertion
/// markers removed with their contents kept.
pub fn apply_corrections(target: &[TargetItem]) -> Vec<Token> {
    let mut out = Vec::new();
    let mut in_del = false;
    for item in target {
        match item {
            TargetItem::Tag(Tag::DelOpen) => in_del = true,
            TargetItem::Tag(Tag::DelClose) => in_del = false,
            TargetItem::Tag(_) => {}
            TargetItem::Word(w) if !in_del => out.push(w.clone()),
            TargetItem::Word(_) => {}
        }
    }
    out
}

/// Checks that tags are balanced, non-nested, and that no span is empty.
pub fn validate_tags(target: &[TargetItem]) -> Result<(), CorpusError> {
    let mut open: Option<(Tag, usize)> = None;
    for (offset, item) in target.iter().enumerate() {
        let TargetItem::Tag(tag) = item else { continue };
        match (open, tag) {
            (None, Tag::InsOpen | Tag::DelOpen) => open = Some((*tag, offset)),
            (None, _) => {
                return Err(CorpusError::Malformed { offset, reason: format!("`{tag}` without opening tag") })
            }
            (Some((o, _)), Tag::InsOpen | Tag::DelOpen) => {
                return Err(CorpusError::Malformed { offset, reason: format!("`{tag}` nested inside `{o}`") })
            }
            (Some((o, start)), close) => {
                let expected = if o == Tag::InsOpen { Tag::InsClose } else { Tag::DelClose };
                if *close != expected {
                    return Err(CorpusError::Malformed {
                        offset,
                        reason: format!("`{close}` closes `{o}` opened at {start}"),
                    });
                }
                if offset == start + 1 {
                    return Err(CorpusError::Malformed { offset, reason: format!("empty `{o}` span") });
                }
                open = None;
            }
        }
    }
    if let Some((o, start)) = open {
        return Err(CorpusError::Malformed { offset: start, reason: format!("`{o}` never closed") });
    }
    Ok(())
}

/// True for tokens shaped like markup (`<...>`) that are not one of the four
/// annotation tags; such lines are rejected rather than guessed at.
pub(crate) fn looks_like_markup(s: &str) -> bool {
    s.len() > 2 && s.starts_with('<') && s.ends_with('>') && Tag::parse(s).is_none()
}

/// Parses a whitespace-tokenized annotated sentence.
pub fn parse_annotated(line: &str) -> Result<AnnotatedPair, CorpusError> {
    let mut target = Vec::new();
    for (offset, raw) in line.split_whitespace().enumerate() {
        if let Some(tag) = Tag::parse(raw) {
            target.push(TargetItem::Tag(tag));
        } else if looks_like_markup(raw) {
            return Err(CorpusError::AmbiguousMarkup { offset, token: raw.to_string() });
        } else {
            target.push(TargetItem::Word(Token::new(raw)?));
        }
    }
    if target.is_empty() {
        return Err(CorpusError::EmptyLine);
    }
    AnnotatedPair::from_target(target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(p: &[Token]) -> String {
        p.iter().map(Token::as_str).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn replacement_pair() {
        let p = parse_annotated("We <del> was </del> <ins> were </ins> happy").unwrap();
        assert_eq!(words(&p.source), "We was happy");
        assert_eq!(p.serialize(), "We <del> was </del> <ins> were </ins> happy");
        assert_eq!(words(&p.corrected()), "We were happy");
        assert!(p.label);
    }

    #[test]
    fn identity_pair() {
        let p = parse_annotated("Hello .").unwrap();
        assert_eq!(words(&p.source), "Hello .");
        assert_eq!(p.serialize(), "Hello .");
        assert!(!p.label);
    }

    #[test]
    fn leading_insertion() {
        let p = parse_annotated("<ins> The </ins> results hold").unwrap();
        assert_eq!(words(&p.source), "results hold");
        assert!(p.label);
    }

    #[test]
    fn malformed_tags_name_offset() {
        let cases = [
            ("a <ins> b", 1),
            ("a </del> b", 1),
            ("a <ins> b </del> c", 3),
            ("a <del> <ins> b </ins> </del>", 2),
            ("a <ins> </ins> b", 2),
        ];
        for (line, off) in cases {
            match parse_annotated(line) {
                Err(CorpusError::Malformed { offset, .. }) => assert_eq!(offset, off, "{line}"),
                other => panic!("{line}: {:?}", other),
            }
        }
    }

    #[test]
    fn stray_markup_rejected() {
        assert!(matches!(
            parse_annotated("see <b> here"),
            Err(CorpusError::AmbiguousMarkup { offset: 1, .. })
        ));
        // a lone angle bracket is ordinary text
        assert!(parse_annotated("x < y").is_ok());
    }

    #[test]
    fn empty_line_rejected() {
        assert!(matches!(parse_annotated("   "), Err(CorpusError::EmptyLine)));
    }

    #[test]
    fn token_rejects_whitespace() {
        assert!(Token::new("a b").is_err());
        assert!(Token::new("").is_err());
        assert_eq!(Token::new("2.5").unwrap().as_str(), "2.5");
    }
}
