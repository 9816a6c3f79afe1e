//! Word-level pre-tokenization and a greedy longest-match WordPiece tokenizer
//! that keeps track of which subword pieces belong to which source word.
//!
//! The same tokenizer is used for summary length accounting, keyword candidate
//! generation and the masking collators, so a "word" means the same thing in
//! every stage.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::masking::TokenizedExample;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

const CONTINUATION: &str = "##";
const MAX_CHARS_PER_WORD: usize = 100;

/// One word of the source text with its byte range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word<'a> {
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

impl Word<'_> {
    pub fn lowercase(&self) -> String {
        self.text.to_lowercase()
    }
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Splits on whitespace and turns every punctuation or symbol character into
/// its own word. Control characters are dropped.
pub fn pre_tokenize(text: &str) -> Vec<Word<'_>> {
    let mut words = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || c.is_control() || is_punctuation(c) {
            if let Some(s) = start.take() {
                words.push(Word { text: &text[s..i], start: s, end: i });
            }
            if is_punctuation(c) && !c.is_control() {
                let end = i + c.len_utf8();
                words.push(Word { text: &text[i..end], start: i, end });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        words.push(Word { text: &text[s..], start: s, end: text.len() });
    }
    words
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

#[derive(Debug, Clone)]
pub struct WordPieceTokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    special: SpecialIds,
}

impl WordPieceTokenizer {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Integrity(format!("duplicate vocabulary entry {tok:?}")));
            }
        }
        let lookup = |name: &str| {
            index.get(name).copied().ok_or_else(|| Error::Integrity(format!("vocabulary lacks special token {name}")))
        };
        let special = SpecialIds {
            pad: lookup(PAD)?,
            unk: lookup(UNK)?,
            cls: lookup(CLS)?,
            sep: lookup(SEP)?,
            mask: lookup(MASK)?,
        };
        Ok(Self { tokens, index, special })
    }

    /// Reads a `vocab.txt` style file, one token per line.
    pub fn from_vocab_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(raw.lines().map(str::to_owned).filter(|l| !l.is_empty()).collect())
    }

    pub fn save_vocab(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Builds a vocabulary from raw texts: special tokens, every character seen
    /// (both word-initial and `##` forms), then whole words by descending
    /// frequency until `vocab_size` is reached. Words seen fewer than
    /// `min_frequency` times are left to be spelled out by pieces.
    pub fn train<'a>(texts: impl IntoIterator<Item = &'a str>, vocab_size: usize, min_frequency: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars: BTreeSet<char> = BTreeSet::new();
        for text in texts {
            for word in pre_tokenize(text) {
                let lower = word.lowercase();
                chars.extend(lower.chars());
                *counts.entry(lower).or_default() += 1;
            }
        }

        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        for c in &chars {
            for tok in [c.to_string(), format!("{CONTINUATION}{c}")] {
                if seen.insert(tok.clone()) {
                    tokens.push(tok);
                }
            }
        }

        let mut ranked: Vec<(&String, &usize)> =
            counts.iter().filter(|(w, n)| **n >= min_frequency && w.chars().count() > 1).collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        for (word, _) in ranked {
            if tokens.len() >= vocab_size {
                break;
            }
            if seen.insert(word.clone()) {
                tokens.push(word.clone());
            }
        }

        Self::from_tokens(tokens).expect("trained vocabulary always has special tokens")
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn special_ids(&self) -> SpecialIds {
        self.special
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Greedy longest-match-first segmentation of one lowercased word.
    pub fn word_pieces(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_CHARS_PER_WORD {
            return vec![self.special.unk];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut candidate: String = chars[start..end].iter().collect();
                if start > 0 {
                    candidate.insert_str(0, CONTINUATION);
                }
                if let Some(&id) = self.index.get(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => pieces.push(id),
                None => return vec![self.special.unk],
            }
            start = end;
        }
        pieces
    }

    /// Number of subword tokens in `text`, excluding sequence delimiters.
    pub fn count_tokens(&self, text: &str) -> usize {
        pre_tokenize(text).iter().map(|w| self.word_pieces(&w.lowercase()).len()).sum()
    }

    /// Joins pieces back into text; continuation pieces attach to the
    /// previous piece.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.id_to_token(id).unwrap_or(UNK);
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }

    /// Returns the longest prefix of `text` that tokenizes to at most `budget`
    /// tokens, cut at a word boundary, together with its token count. When
    /// not even the first word fits, its leading pieces are decoded instead.
    pub fn clip_to_tokens(&self, text: &str, budget: usize) -> (String, usize) {
        let mut used = 0;
        let mut end = 0;
        for word in pre_tokenize(text) {
            let n = self.word_pieces(&word.lowercase()).len();
            if used + n > budget {
                if used == 0 && budget > 0 {
                    let pieces = self.word_pieces(&word.lowercase());
                    return (self.decode(&pieces[..budget]), budget);
                }
                break;
            }
            used += n;
            end = word.end;
        }
        (text[..end].to_string(), used)
    }

    /// Encodes `text` as `[CLS] pieces... [SEP]`, keeping only whole words so
    /// that the result fits in `max_len` positions.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenizedExample {
        assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
        let mut token_ids = vec![self.special.cls];
        let mut word_spans = Vec::new();
        let mut word_texts = Vec::new();
        for word in pre_tokenize(text) {
            let lower = word.lowercase();
            let pieces = self.word_pieces(&lower);
            if token_ids.len() + pieces.len() + 1 > max_len {
                break;
            }
            let start = token_ids.len();
            token_ids.extend_from_slice(&pieces);
            word_spans.push((start, token_ids.len()));
            word_texts.push(lower);
        }
        token_ids.push(self.special.sep);
        let special_positions = BTreeSet::from([0, token_ids.len() - 1]);
        TokenizedExample { token_ids, word_spans, word_texts, special_positions }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> WordPieceTokenizer {
        let mut toks: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
        for t in ["un", "##aff", "##able", "the", "movie", "good", "a", "##b", "##c", "b", "c", ","] {
            toks.push(t.to_string());
        }
        WordPieceTokenizer::from_tokens(toks).unwrap()
    }

    #[test]
    fn pre_tokenize_splits_punctuation() {
        let words: Vec<&str> = pre_tokenize("Hello, world!  It's").iter().map(|w| w.text).collect();
        assert_eq!(words, ["Hello", ",", "world", "!", "It", "'", "s"]);
    }

    #[test]
    fn pre_tokenize_offsets_index_source() {
        let text = "naïve café, ok";
        for w in pre_tokenize(text) {
            assert_eq!(&text[w.start..w.end], w.text);
        }
    }

    #[test]
    fn greedy_longest_match() {
        let tok = tiny();
        let ids = tok.word_pieces("unaffable");
        let pieces: Vec<&str> = ids.iter().map(|&i| tok.id_to_token(i).unwrap()).collect();
        assert_eq!(pieces, ["un", "##aff", "##able"]);
        assert_eq!(tok.word_pieces("xyz"), vec![tok.special_ids().unk]);
    }

    #[test]
    fn encode_tracks_word_spans() {
        let tok = tiny();
        let ex = tok.encode("The unaffable movie", 32);
        assert_eq!(ex.word_texts, ["the", "unaffable", "movie"]);
        assert_eq!(ex.word_spans, [(1, 2), (2, 5), (5, 6)]);
        assert_eq!(ex.token_ids.len(), 7);
        assert_eq!(ex.special_positions, BTreeSet::from([0, 6]));
    }

    #[test]
    fn encode_truncates_on_word_boundary() {
        let tok = tiny();
        let ex = tok.encode("the unaffable movie", 4);
        assert_eq!(ex.word_texts, ["the"]);
        assert_eq!(ex.token_ids.len(), 3);
    }

    #[test]
    fn clip_keeps_whole_words() {
        let tok = tiny();
        let (clipped, n) = tok.clip_to_tokens("The unaffable movie", 4);
        assert_eq!(clipped, "The unaffable");
        assert_eq!(n, 4);
        assert_eq!(tok.count_tokens(&clipped), 4);
        let (clipped, n) = tok.clip_to_tokens("unaffable", 2);
        assert_eq!(clipped, "unaff");
        assert_eq!(n, 2);
        assert_eq!(tok.count_tokens(&clipped), 2);
    }

    #[test]
    fn trained_vocab_covers_every_character() {
        let tok = WordPieceTokenizer::train(["abc abd abc", "zzz"], 100, 2);
        assert!(tok.token_id("abc").is_some());
        assert!(tok.token_id("abd").is_none());
        assert!(!tok.word_pieces("abd").contains(&tok.special_ids().unk));
        assert_eq!(tok.word_pieces("abd").len(), 3);
    }
}
