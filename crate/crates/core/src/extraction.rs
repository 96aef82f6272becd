//! Turning model replies into class predictions.
//!
//! VQA replies are parsed by option letter first and class label second.
//! Captions are classified by nearest class-label embedding and, separately,
//! by asking an extraction LLM to list every class the caption mentions.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Embedder};
use crate::dataset::ClassLabel;
use crate::prompts::{option_lines, OptionStyle};

const DEFAULT_REFUSALS: &str = include_str!("../resources/refusal_phrases.txt");
pub const EXTRACTION_PREAMBLE: &str = "Your task is to extract all objects that are described in the given message. \
Only answer with all letters from the given choices that apply. If none apply, reply with X. \
Do not explain. These are the possible objects:";

#[derive(Debug, Error, PartialEq)]
pub enum ExtractionError {
    #[error("no analyses to summarize")]
    EmptyInput,
}

/// Lower-cased refusal phrases matched as substrings; an empty list disables detection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefusalPhrases(Vec<String>);

impl RefusalPhrases {
    /// One phrase per line; blank lines and `#` comments skipped.
    pub fn from_text(text: &str) -> Self {
        Self(
            text.lines()
                .map(|l| l.trim())
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|l| l.to_lowercase())
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self::from_text(&std::fs::read_to_string(path)?))
    }

    pub fn none() -> Self {
        Self(Vec::new())
    }

    pub fn phrases(&self) -> &[String] {
        &self.0
    }

    pub fn matches(&self, text: &str) -> bool {
        let lower = normalize_apostrophes(&text.to_lowercase());
        self.0.iter().any(|p| lower.contains(p.as_str()))
    }
}

impl Default for RefusalPhrases {
    fn default() -> Self {
        Self::from_text(DEFAULT_REFUSALS)
    }
}

fn normalize_apostrophes(s: &str) -> String {
    s.replace(['\u{2019}', '\u{2018}'], "'")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    FromLetter,
    FromLabel,
    Unrecoverable,
    Refusal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaParse {
    pub letter: Option<char>,
    /// First class label found in the reply, even when the letter overrides it.
    pub label: Option<ClassLabel>,
    pub resolution: Resolution,
    pub raw: String,
}

impl VqaParse {
    pub fn predicted(&self) -> Option<ClassLabel> {
        match self.resolution {
            Resolution::FromLetter => self.letter.and_then(ClassLabel::from_letter),
            Resolution::FromLabel => self.label,
            Resolution::Unrecoverable | Resolution::Refusal => None,
        }
    }
}

fn is_option_letter(c: char) -> bool {
    ClassLabel::from_letter(c).is_some()
}

/// Punctuation that may close a bare option letter: `H.`, `h)`, `H:`, `**H**`.
fn is_letter_closer(c: char) -> bool {
    matches!(c, '.' | ')' | ']' | ':' | '*')
}

fn is_letter_opener(c: char) -> bool {
    matches!(c, '(' | '[' | '*' | '"' | '`' | '\u{201C}')
}

/// After `H.`: the letter stands alone if nothing alphanumeric follows directly.
fn closes_cleanly(rest: &[char]) -> bool {
    rest.first().is_none_or(|c| !c.is_alphanumeric())
}

/// Letter at the very start of the reply, possibly wrapped in openers.
fn leading_letter(chars: &[char]) -> Option<char> {
    let mut i = 0;
    while i < chars.len() && (chars[i].is_whitespace() || is_letter_opener(chars[i])) {
        i += 1;
    }
    let c = *chars.get(i)?;
    if !c.is_ascii_alphabetic() || !is_option_letter(c) {
        return None;
    }
    match chars.get(i + 1) {
        None => Some(c),
        Some(&n) if is_letter_closer(n) => closes_cleanly(&chars[i + 2..]).then_some(c),
        Some(&n) if n.is_whitespace() => {
            // "A cat" is an article, "H cat" is ambiguous; only an uppercase letter
            // not followed by a lowercase word counts.
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            (c.is_ascii_uppercase() && next.is_none_or(|n| !n.is_lowercase())).then_some(c)
        }
        _ => None,
    }
}

/// An uppercase letter inside an explanation, written as `H.`, `H)`, `(H)` or trailing `H`.
fn embedded_letter(chars: &[char]) -> Option<char> {
    for i in 1..chars.len() {
        let c = chars[i];
        if !c.is_ascii_uppercase() || !is_option_letter(c) {
            continue;
        }
        let prev = chars[i - 1];
        if !(prev.is_whitespace() || is_letter_opener(prev)) {
            continue;
        }
        match chars.get(i + 1) {
            None => return Some(c),
            Some(&n) if is_letter_closer(n) && closes_cleanly(&chars[i + 2..]) => return Some(c),
            Some(&n) if prev == '(' && n == ')' => return Some(c),
            _ => {}
        }
    }
    None
}

/// Word-boundary search; a trailing plural `s` is tolerated.
fn find_word(haystack: &str, word: &str) -> Option<usize> {
    let bytes = haystack.as_bytes();
    let is_word = |b: u8| b.is_ascii_alphanumeric();
    let mut start = 0;
    while let Some(off) = haystack[start..].find(word) {
        let pos = start + off;
        let end = pos + word.len();
        let before_ok = pos == 0 || !is_word(bytes[pos - 1]);
        let after = if end < bytes.len() && bytes[end] == b's' { end + 1 } else { end };
        let after_ok = after >= bytes.len() || !is_word(bytes[after]);
        let plain_ok = end >= bytes.len() || !is_word(bytes[end]);
        if before_ok && (plain_ok || after_ok) {
            return Some(pos);
        }
        start = pos + 1;
    }
    None
}

/// All class labels mentioned in `text`, by first-occurrence position.
pub fn mentioned_labels(text: &str) -> Vec<ClassLabel> {
    let lower = text.to_lowercase();
    let mut hits: Vec<(usize, ClassLabel)> = ClassLabel::ALL
        .iter()
        .filter_map(|c| find_word(&lower, c.name()).map(|p| (p, *c)))
        .collect();
    hits.sort();
    hits.into_iter().map(|(_, c)| c).collect()
}

pub fn parse_vqa_response(raw: &str, refusals: &RefusalPhrases) -> VqaParse {
    let chars: Vec<char> = raw.trim().chars().collect();
    let letter = leading_letter(&chars)
        .or_else(|| embedded_letter(&chars))
        .map(|c| c.to_ascii_uppercase());
    let label = mentioned_labels(raw).first().copied();
    let resolution = match (letter, label) {
        (Some(_), _) => Resolution::FromLetter,
        (None, Some(_)) => Resolution::FromLabel,
        (None, None) if refusals.matches(raw) => Resolution::Refusal,
        (None, None) => Resolution::Unrecoverable,
    };
    VqaParse {
        letter,
        label,
        resolution,
        raw: raw.to_string(),
    }
}

/// Embeddings of the 16 raw class names, unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVectors(Vec<Vec<f32>>);

impl ClassVectors {
    pub fn new(vectors: Vec<Vec<f32>>) -> Self {
        assert_eq!(vectors.len(), ClassLabel::COUNT, "need one vector per class");
        Self(vectors.into_iter().map(|v| unit(&v)).collect())
    }

    pub fn build(embedder: &dyn Embedder) -> Result<Self, BackendError> {
        let names: Vec<String> = ClassLabel::ALL.iter().map(|c| c.name().to_string()).collect();
        Ok(Self::new(embedder.embed(&names)?))
    }

    pub fn get(&self, class: ClassLabel) -> &[f32] {
        &self.0[class.index()]
    }
}

fn unit(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| (f64::from(*x) / norm) as f32).collect()
}

pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Nearest class by cosine distance; ties go to the lower class index.
pub fn classify_embedding(vector: &[f32], classes: &ClassVectors) -> ClassLabel {
    let mut best = (ClassLabel::ALL[0], f64::INFINITY);
    for c in ClassLabel::ALL {
        let d = cosine_distance(vector, classes.get(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

pub fn embed_classify(
    caption: &str,
    classes: &ClassVectors,
    embedder: &dyn Embedder,
) -> Result<ClassLabel, BackendError> {
    let v = embedder.embed(&[caption.to_string()])?;
    let v = v.first().ok_or_else(|| BackendError::Protocol("empty embedding batch".into()))?;
    Ok(classify_embedding(v, classes))
}

pub fn build_extraction_prompt(caption: &str) -> String {
    let mut lines = vec![EXTRACTION_PREAMBLE.to_string()];
    lines.extend(option_lines(OptionStyle::LetterLabel));
    lines.push(format!("Message: {caption}"));
    lines.join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionResult {
    Labels(BTreeSet<ClassLabel>),
    Generic,
}

impl ExtractionResult {
    pub fn labels(&self) -> BTreeSet<ClassLabel> {
        match self {
            ExtractionResult::Labels(s) => s.clone(),
            ExtractionResult::Generic => BTreeSet::new(),
        }
    }
}

/// Split on whitespace, commas and periods; keep single-letter tokens.
pub fn parse_extraction_reply(raw: &str) -> ExtractionResult {
    let mut labels = BTreeSet::new();
    for tok in raw.split(|c: char| c.is_whitespace() || c == ',' || c == '.') {
        let mut chars = tok.chars();
        let (Some(c), None) = (chars.next(), chars.next()) else {
            continue;
        };
        if c.eq_ignore_ascii_case(&'x') {
            return ExtractionResult::Generic;
        }
        if let Some(l) = ClassLabel::from_letter(c) {
            labels.insert(l);
        }
    }
    if labels.is_empty() {
        ExtractionResult::Generic
    } else {
        ExtractionResult::Labels(labels)
    }
}

/// Counts generated tokens of a reply.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Runs of alphanumerics count as one token each; every other visible character
/// counts on its own. Comparative only: not any model's real tokenizer.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleTokenCounter;

impl TokenCounter for SimpleTokenCounter {
    fn count(&self, text: &str) -> usize {
        let mut n = 0;
        let mut in_word = false;
        for c in text.chars() {
            if c.is_alphanumeric() {
                if !in_word {
                    n += 1;
                }
                in_word = true;
            } else {
                in_word = false;
                if !c.is_whitespace() {
                    n += 1;
                }
            }
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionAnalysis {
    pub embedding_label: ClassLabel,
    pub llm_labels: BTreeSet<ClassLabel>,
    pub generic: bool,
    pub token_count: usize,
}

impl CaptionAnalysis {
    pub fn new(embedding_label: ClassLabel, extraction: &ExtractionResult, token_count: usize) -> Self {
        let llm_labels = extraction.labels();
        Self {
            embedding_label,
            generic: llm_labels.is_empty(),
            llm_labels,
            token_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    pub n: usize,
    pub avg_tokens: f64,
    pub single_class_ratio: f64,
    pub generic_ratio: f64,
}

pub fn caption_stats(analyses: &[CaptionAnalysis]) -> Result<CaptionStats, ExtractionError> {
    if analyses.is_empty() {
        return Err(ExtractionError::EmptyInput);
    }
    let n = analyses.len();
    let tokens: usize = analyses.iter().map(|a| a.token_count).sum();
    let single = analyses.iter().filter(|a| a.llm_labels.len() == 1).count();
    let generic = analyses.iter().filter(|a| a.generic).count();
    Ok(CaptionStats {
        n,
        avg_tokens: tokens as f64 / n as f64,
        single_class_ratio: single as f64 / n as f64,
        generic_ratio: generic as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::*;

    fn parse(s: &str) -> VqaParse {
        parse_vqa_response(s, &RefusalPhrases::default())
    }

    #[test]
    fn paper_response_styles() {
        let p = parse("H. cat.");
        assert_eq!((p.letter, p.resolution), (Some('H'), Resolution::FromLetter));
        assert_eq!(p.predicted(), Some(Cat));
        let p = parse("cat.");
        assert_eq!((p.label, p.resolution), (Some(Cat), Resolution::FromLabel));
        let p = parse("The image features a black and white image of a cat.");
        assert_eq!((p.label, p.resolution), (Some(Cat), Resolution::FromLabel));
        let p = parse("h)");
        assert_eq!((p.letter, p.resolution), (Some('H'), Resolution::FromLetter));
        assert_eq!(parse("H").letter, Some('H'));
        assert_eq!(parse("I cannot assist with that.").resolution, Resolution::Refusal);
    }

    #[test]
    fn letters_inside_words_do_not_count() {
        assert_eq!(parse("THE END").resolution, Resolution::Unrecoverable);
        assert_eq!(parse("A cat on a mat").resolution, Resolution::FromLabel);
        assert_eq!(parse("E.g. a dog").predicted(), Some(Dog));
        assert_eq!(parse("category").resolution, Resolution::Unrecoverable);
    }

    #[test]
    fn letter_wins_over_label() {
        let p = parse("K. cat");
        assert_eq!(p.predicted(), Some(Dog));
        assert_eq!(p.label, Some(Cat));
        assert_eq!(parse("The answer is K. It looks like a cat.").predicted(), Some(Dog));
    }

    #[test]
    fn refusal_detection_can_be_disabled() {
        let p = parse_vqa_response("I cannot assist with that.", &RefusalPhrases::none());
        assert_eq!(p.resolution, Resolution::Unrecoverable);
        // A recoverable answer beats a refusal phrase.
        assert_eq!(parse("I'm sorry, but it is a dog.").resolution, Resolution::FromLabel);
    }

    #[test]
    fn word_search_boundaries() {
        assert_eq!(find_word("a category", "cat"), None);
        assert_eq!(find_word("two cats", "cat"), Some(4));
        assert_eq!(find_word("scat", "cat"), None);
        assert_eq!(mentioned_labels("a dog chasing a cat"), vec![Dog, Cat]);
    }

    #[test]
    fn extraction_prompt_template() {
        let p = build_extraction_prompt("a cat on a chair");
        assert!(p.contains("If none apply, reply with X."));
        assert!(p.ends_with("Message: a cat on a chair"));
        assert!(build_extraction_prompt("").ends_with("Message: "));
        assert!(build_extraction_prompt("a\nb").ends_with("Message: a\nb"));
    }

    #[test]
    fn extraction_replies() {
        assert_eq!(parse_extraction_reply("H, K"), ExtractionResult::Labels([Cat, Dog].into()));
        assert_eq!(parse_extraction_reply("X"), ExtractionResult::Generic);
        assert_eq!(parse_extraction_reply("h. H."), ExtractionResult::Labels([Cat].into()));
        assert_eq!(parse_extraction_reply("nothing here"), ExtractionResult::Generic);
        assert_eq!(parse_extraction_reply("H, X"), ExtractionResult::Generic);
    }

    #[test]
    fn cosine_tie_breaks_low() {
        let mut vs = vec![vec![0.0f32; 16]; 16];
        for (i, v) in vs.iter_mut().enumerate() {
            v[i] = 1.0;
        }
        let cv = ClassVectors::new(vs);
        let mut e = vec![0.0f32; 16];
        e[Cat.index()] = 1.0;
        assert_eq!(classify_embedding(&e, &cv), Cat);
        e[Dog.index()] = 1.0;
        assert_eq!(classify_embedding(&e, &cv), Cat);
    }

    #[test]
    fn token_counter() {
        assert_eq!(SimpleTokenCounter.count("A cat."), 3);
        assert_eq!(SimpleTokenCounter.count(""), 0);
        assert_eq!(SimpleTokenCounter.count("a photo of a dog's fur"), 8);
    }

    #[test]
    fn stats_basic() {
        let one = CaptionAnalysis::new(Cat, &ExtractionResult::Labels([Cat].into()), 4);
        let gen = CaptionAnalysis::new(Dog, &ExtractionResult::Generic, 10);
        let s = caption_stats(&[one.clone(), one.clone()]).unwrap();
        assert_eq!(s.single_class_ratio, 1.0);
        let s = caption_stats(&[gen.clone(), gen]).unwrap();
        assert_eq!(s.generic_ratio, 1.0);
        assert_eq!(s.avg_tokens, 10.0);
        assert_eq!(caption_stats(&[]), Err(ExtractionError::EmptyInput));
    }
}
