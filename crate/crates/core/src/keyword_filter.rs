//! Corpus-level keyword frequencies, the frequency cut-off and the
//! frequency-curve data used to pick it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyword_extraction::DocKeywords;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeywordFrequencyTable {
    /// Sorted by descending count, then ascending word.
    entries: Vec<(String, usize)>,
}

impl KeywordFrequencyTable {
    pub fn from_counts(counts: impl IntoIterator<Item = (String, usize)>) -> Self {
        let mut entries: Vec<(String, usize)> = counts.into_iter().filter(|(_, n)| *n > 0).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, word: &str) -> Option<usize> {
        self.entries.iter().find(|(w, _)| w == word).map(|(_, n)| *n)
    }

    pub fn to_tsv(&self) -> String {
        self.entries.iter().map(|(w, n)| format!("{w}\t{n}\n")).collect()
    }

    pub fn from_tsv(raw: &str) -> Result<Self> {
        let mut counts = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let location = format!("line {}", i + 1);
            let (w, n) = line.split_once('\t').ok_or_else(|| Error::parse(&location, "expected word<TAB>count"))?;
            let n = n.parse().map_err(|_| Error::parse(&location, format!("bad count {n:?}")))?;
            counts.push((w.to_string(), n));
        }
        Ok(Self::from_counts(counts))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_tsv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Counts (document, word) keyword occurrences. Words are lowercased.
pub fn build_frequency_table(doc_keywords: &[DocKeywords]) -> KeywordFrequencyTable {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in doc_keywords {
        let unique: BTreeSet<String> = doc.keywords.iter().map(|(w, _)| w.to_lowercase()).collect();
        for word in unique {
            *counts.entry(word).or_default() += 1;
        }
    }
    KeywordFrequencyTable::from_counts(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordSource {
    Summaries,
    WholeData,
}

impl KeywordSource {
    pub fn as_str(self) -> &'static str {
        match self {
            KeywordSource::Summaries => "summaries",
            KeywordSource::WholeData => "whole_data",
        }
    }
}

impl fmt::Display for KeywordSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KeywordSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "summaries" => Ok(KeywordSource::Summaries),
            "whole_data" => Ok(KeywordSource::WholeData),
            other => Err(Error::InvalidArgument(format!("unknown keyword source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordSet {
    pub words: BTreeSet<String>,
    pub threshold: usize,
    pub source: KeywordSource,
}

impl KeywordSet {
    pub fn new(words: impl IntoIterator<Item = String>, threshold: usize, source: KeywordSource) -> Self {
        Self { words: words.into_iter().map(|w| w.to_lowercase()).collect(), threshold, source }
    }

    /// Case-insensitive membership.
    pub fn contains(&self, word: &str) -> bool {
        if word.chars().any(char::is_uppercase) {
            self.words.contains(&word.to_lowercase())
        } else {
            self.words.contains(word)
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# threshold={} source={}\n", self.threshold, self.source);
        for w in &self.words {
            out.push_str(w);
            out.push('\n');
        }
        out
    }

    pub fn from_text(raw: &str) -> Result<Self> {
        let mut lines = raw.lines();
        let header = lines.next().ok_or_else(|| Error::parse("line 1", "missing header"))?;
        let body = header.strip_prefix("# ").ok_or_else(|| Error::parse("line 1", "header must start with '# '"))?;
        let (mut threshold, mut source) = (None, None);
        for field in body.split_whitespace() {
            match field.split_once('=') {
                Some(("threshold", v)) => {
                    threshold = Some(v.parse().map_err(|_| Error::parse("line 1", format!("bad threshold {v:?}")))?)
                }
                Some(("source", v)) => source = Some(v.parse()?),
                _ => return Err(Error::parse("line 1", format!("unexpected header field {field:?}"))),
            }
        }
        let (threshold, source) =
            threshold.zip(source).ok_or_else(|| Error::parse("line 1", "header needs threshold and source"))?;
        let words = lines.map(str::trim).filter(|l| !l.is_empty()).map(str::to_string);
        Ok(Self::new(words, threshold, source))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Keeps every word seen at least `threshold` times.
pub fn apply_cutoff(table: &KeywordFrequencyTable, threshold: usize, source: KeywordSource) -> Result<KeywordSet> {
    if threshold == 0 {
        return Err(Error::InvalidArgument("cut-off threshold must be at least 1".into()));
    }
    let words = table.entries().iter().filter(|(_, n)| *n >= threshold).map(|(w, _)| w.clone());
    Ok(KeywordSet::new(words, threshold, source))
}

/// One point of the frequency curve: how many distinct words were seen
/// exactly `frequency` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub frequency: usize,
    pub num_words: usize,
}

/// Histogram over the `tail` lowest frequency levels, ascending.
pub fn frequency_curve(table: &KeywordFrequencyTable, tail: usize) -> Result<Vec<CurvePoint>> {
    if tail == 0 {
        return Err(Error::InvalidArgument("tail must be at least 1".into()));
    }
    let mut levels: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, n) in table.entries() {
        *levels.entry(*n).or_default() += 1;
    }
    Ok(levels.into_iter().take(tail).map(|(frequency, num_words)| CurvePoint { frequency, num_words }).collect())
}

/// Heuristic threshold suggestion: the level right after the largest
/// relative drop in word count between adjacent frequency levels. Ties
/// resolve to the smallest level. Not part of the original procedure,
/// which picks the cut-off by eye.
pub fn suggest_threshold(curve: &[CurvePoint]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for pair in curve.windows(2) {
        let ratio = pair[0].num_words as f64 / pair[1].num_words as f64;
        if best.is_none_or(|(r, _)| ratio > r) {
            best = Some((ratio, pair[1].frequency));
        }
    }
    best.map(|(_, level)| level)
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("frequency,num_words\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.frequency, p.num_words));
    }
    out
}

pub fn curve_from_csv(raw: &str) -> Result<Vec<CurvePoint>> {
    let mut reader = csv::Reader::from_reader(raw.as_bytes());
    reader
        .deserialize::<CurvePoint>()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::parse(format!("line {}", i + 2), e.to_string())))
        .collect()
}
