//! Corpus ingestion, validation, partitioning and size accounting.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Option<String>) -> Self {
        Self { id: id.into(), text: text.into(), label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unlabeled,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::Test, Split::Unlabeled];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(Error::InvalidArgument(format!("unknown corpus format {other:?}"))),
        }
    }
}

/// One line of the canonical interchange format. Extra fields are tolerated
/// so that summary files can carry their token counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub split: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusSplits {
    pub train: Vec<Document>,
    pub validation: Vec<Document>,
    pub test: Vec<Document>,
    pub unlabeled: Vec<Document>,
}

impl CorpusSplits {
    pub fn get(&self, split: Split) -> &[Document] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
            Split::Unlabeled => &self.unlabeled,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<Document> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
            Split::Unlabeled => &mut self.unlabeled,
        }
    }

    pub fn counts(&self) -> (usize, usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len(), self.unlabeled.len())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (Split, &Document)> {
        Split::ALL.into_iter().flat_map(move |sp| self.get(sp).iter().map(move |d| (sp, d)))
    }

    /// Checks id uniqueness across splits and the labeled/unlabeled contract.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.len());
        for (split, doc) in self.iter() {
            check_document(doc)?;
            if !ids.insert(doc.id.as_str()) {
                return Err(Error::Integrity(format!("duplicate document id {:?}", doc.id)));
            }
            match (split, &doc.label) {
                (Split::Unlabeled, Some(label)) => {
                    return Err(Error::Integrity(format!(
                        "document {:?} in unlabeled split carries label {label:?}",
                        doc.id
                    )))
                }
                (Split::Unlabeled, None) => {}
                (_, None) => {
                    return Err(Error::Integrity(format!("document {:?} in {split} split has no label", doc.id)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn push(&mut self, split: Split, doc: Document) {
        self.get_mut(split).push(doc);
    }
}

fn check_document(doc: &Document) -> Result<()> {
    if doc.text.split_whitespace().next().is_none() {
        return Err(Error::Integrity(format!("document {:?} has empty text", doc.id)));
    }
    Ok(())
}

fn record_into_parts(record: CorpusRecord, location: &str) -> Result<(Split, Document)> {
    if record.text.split_whitespace().next().is_none() {
        return Err(Error::parse(location, "empty text"));
    }
    if record.id.is_empty() {
        return Err(Error::parse(location, "empty id"));
    }
    let split: Split =
        record.split.parse().map_err(|_| Error::parse(location, format!("unknown split {:?}", record.split)))?;
    let label = record.label.filter(|l| !l.is_empty());
    Ok((split, Document { id: record.id, text: record.text, label }))
}

/// Loads and validates a corpus file.
pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<CorpusSplits> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut splits = CorpusSplits::default();
    let mut seen: HashSet<String> = HashSet::new();
    let mut add = |split: Split, doc: Document, location: String| -> Result<()> {
        if !seen.insert(doc.id.clone()) {
            return Err(Error::Integrity(format!("duplicate document id {:?} at {location}", doc.id)));
        }
        if split == Split::Unlabeled && doc.label.is_some() {
            return Err(Error::Integrity(format!("labeled record {:?} in unlabeled split at {location}", doc.id)));
        }
        if split != Split::Unlabeled && doc.label.is_none() {
            return Err(Error::Integrity(format!("record {:?} in {split} split has no label at {location}", doc.id)));
        }
        splits.push(split, doc);
        Ok(())
    };

    match format {
        CorpusFormat::Jsonl => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let location = format!("{}:{}", path.display(), i + 1);
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CorpusRecord =
                    serde_json::from_str(&line).map_err(|e| Error::parse(location.clone(), e.to_string()))?;
                let (split, doc) = record_into_parts(record, &location)?;
                add(split, doc, location)?;
            }
        }
        CorpusFormat::Csv => {
            let mut reader = csv::Reader::from_reader(file);
            for (i, row) in reader.deserialize::<CorpusRecord>().enumerate() {
                // header is line 1
                let location = format!("{}:{}", path.display(), i + 2);
                let record = row.map_err(|e| Error::parse(location.clone(), e.to_string()))?;
                let (split, doc) = record_into_parts(record, &location)?;
                add(split, doc, location)?;
            }
        }
    }
    Ok(splits)
}

/// Writes the canonical line-delimited format.
pub fn save_corpus(splits: &CorpusSplits, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (split, doc) in splits.iter() {
        let record = CorpusRecord {
            id: doc.id.clone(),
            text: doc.text.clone(),
            label: doc.label.clone(),
            split: split.as_str().to_string(),
        };
        let line = serde_json::to_string(&record).expect("corpus record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Moves `size` randomly drawn train documents into an empty test split.
pub fn derive_test_from_train(splits: CorpusSplits, size: usize, seed: u64) -> Result<CorpusSplits> {
    if !splits.test.is_empty() {
        return Err(Error::State(format!("test split already holds {} documents", splits.test.len())));
    }
    if size > splits.train.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {size} test documents from {} train documents",
            splits.train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drawn = sample(&mut rng, splits.train.len(), size).into_vec();
    drawn.sort_unstable();

    let CorpusSplits { train, validation, unlabeled, .. } = splits;
    let mut kept = Vec::with_capacity(train.len() - size);
    let mut test = Vec::with_capacity(size);
    let mut next = drawn.iter().peekable();
    for (i, doc) in train.into_iter().enumerate() {
        if next.peek() == Some(&&i) {
            next.next();
            test.push(doc);
        } else {
            kept.push(doc);
        }
    }
    Ok(CorpusSplits { train: kept, validation, test, unlabeled })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub doc_count: usize,
    /// UTF-8 bytes of the text fields only.
    pub byte_size: u64,
    pub label_histogram: BTreeMap<String, usize>,
}

impl CorpusStats {
    pub fn merge(&self, other: &CorpusStats) -> CorpusStats {
        let mut label_histogram = self.label_histogram.clone();
        for (label, n) in &other.label_histogram {
            *label_histogram.entry(label.clone()).or_default() += n;
        }
        CorpusStats {
            doc_count: self.doc_count + other.doc_count,
            byte_size: self.byte_size + other.byte_size,
            label_histogram,
        }
    }

    /// Flat `key=value` rendering; labels appear as `label.<name>=<count>`.
    pub fn to_key_values(&self) -> String {
        let mut out = format!("doc_count={}\nbyte_size={}\n", self.doc_count, self.byte_size);
        for (label, n) in &self.label_histogram {
            out.push_str(&format!("label.{label}={n}\n"));
        }
        out
    }

    pub fn from_key_values(raw: &str) -> Result<Self> {
        let mut stats = CorpusStats::default();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let location = format!("line {}", i + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| Error::parse(&location, "expected key=value"))?;
            let bad = |_| Error::parse(&location, format!("bad value {value:?}"));
            match key {
                "doc_count" => stats.doc_count = value.parse().map_err(bad)?,
                "byte_size" => stats.byte_size = value.parse().map_err(bad)?,
                k => match k.strip_prefix("label.") {
                    Some(label) => {
                        stats.label_histogram.insert(label.to_string(), value.parse().map_err(bad)?);
                    }
                    None => return Err(Error::parse(location, format!("unknown key {k:?}"))),
                },
            }
        }
        Ok(stats)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_key_values()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_key_values(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn corpus_stats<'a>(docs: impl IntoIterator<Item = &'a Document>) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for doc in docs {
        stats.doc_count += 1;
        stats.byte_size += doc.text.len() as u64;
        if let Some(label) = &doc.label {
            *stats.label_histogram.entry(label.clone()).or_default() += 1;
        }
    }
    stats
}
