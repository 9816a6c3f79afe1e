//! Deterministic synthetic corpora for desk-scale experiments and tests.
//!
//! Text is built from pronounceable pseudo-words. Each topic owns a small
//! set of planted domain keywords that appear at a fixed rate inside
//! otherwise topic-neutral filler text.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplits, Document};
use crate::error::{Error, Result};

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "", "n", "r", "s", "l"];

/// `n` distinct pseudo-words of two or three syllables, none of them in
/// `exclude`.
pub fn pseudo_words(n: usize, rng: &mut impl Rng, exclude: &BTreeSet<String>) -> Vec<String> {
    let mut seen = exclude.clone();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut word = String::new();
        for _ in 0..syllables {
            word.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            word.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        word.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
        if seen.insert(word.clone()) {
            out.push(word);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCorpusSpec {
    pub topics: usize,
    pub keywords_per_topic: usize,
    pub filler_vocab: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Chance that any word slot holds one of the topic's keywords.
    pub keyword_rate: f64,
    pub seed: u64,
}

impl Default for DomainCorpusSpec {
    fn default() -> Self {
        Self {
            topics: 4,
            keywords_per_topic: 6,
            filler_vocab: 150,
            min_words: 50,
            max_words: 80,
            keyword_rate: 0.15,
            seed: 7,
        }
    }
}

impl DomainCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.topics < 2 || self.keywords_per_topic == 0 || self.filler_vocab == 0 {
            return Err(Error::Config("synthetic corpus needs two topics, keywords and filler words".into()));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("synthetic document length range is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.keyword_rate) {
            return Err(Error::Config("keyword_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DomainGenerator {
    pub topic_keywords: Vec<Vec<String>>,
    pub filler: Vec<String>,
    spec: DomainCorpusSpec,
    rng: ChaCha8Rng,
}

impl DomainGenerator {
    pub fn new(spec: DomainCorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let filler = pseudo_words(spec.filler_vocab, &mut rng, &BTreeSet::new());
        let mut taken: BTreeSet<String> = filler.iter().cloned().collect();
        let mut topic_keywords = Vec::new();
        for _ in 0..spec.topics {
            let words = pseudo_words(spec.keywords_per_topic, &mut rng, &taken);
            taken.extend(words.iter().cloned());
            topic_keywords.push(words);
        }
        Ok(Self { topic_keywords, filler, spec, rng })
    }

    pub fn topic_label(topic: usize) -> String {
        format!("topic{topic}")
    }

    pub fn all_keywords(&self) -> BTreeSet<String> {
        self.topic_keywords.iter().flatten().cloned().collect()
    }

    /// One document of the given topic: sentences of 6 to 12 words.
    pub fn text(&mut self, topic: usize) -> String {
        let len = self.rng.gen_range(self.spec.min_words..=self.spec.max_words);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let word = if self.rng.gen_bool(self.spec.keyword_rate) {
                self.topic_keywords[topic].choose(&mut self.rng).expect("keywords exist")
            } else {
                self.filler.choose(&mut self.rng).expect("filler exists")
            };
            words.push(word.as_str());
        }
        let mut text = String::new();
        let mut until_stop = self.rng.gen_range(6..=12);
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                text.push(' ');
            }
            text.push_str(w);
            until_stop -= 1;
            if until_stop == 0 || i + 1 == words.len() {
                text.push('.');
                until_stop = self.rng.gen_range(6..=12);
            }
        }
        text
    }

    /// `n` documents with topics assigned round-robin, then shuffled.
    pub fn documents(&mut self, n: usize, id_prefix: &str, labeled: bool) -> Vec<Document> {
        let mut topics: Vec<usize> = (0..n).map(|i| i % self.spec.topics).collect();
        topics.shuffle(&mut self.rng);
        topics
            .into_iter()
            .enumerate()
            .map(|(i, topic)| {
                let text = self.text(topic);
                Document::new(format!("{id_prefix}{i:05}"), text, labeled.then(|| Self::topic_label(topic)))
            })
            .collect()
    }
}

/// Split sizes for [`experiment_splits`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub unlabeled: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// A topic-classification corpus with an unlabeled pool for pretraining.
pub fn experiment_splits(spec: DomainCorpusSpec, sizes: SplitSizes) -> Result<(CorpusSplits, DomainGenerator)> {
    let mut generator = DomainGenerator::new(spec)?;
    let splits = CorpusSplits {
        unlabeled: generator.documents(sizes.unlabeled, "u", false),
        train: generator.documents(sizes.train, "tr", true),
        validation: generator.documents(sizes.validation, "va", true),
        test: generator.documents(sizes.test, "te", true),
    };
    Ok((splits, generator))
}

/// Cue words of [`separable_splits`]: a document is labeled `pos` exactly
/// when it contains the first and `neg` exactly when it contains the second.
pub const SEPARABLE_CUES: [&str; 2] = ["zorbex", "quilmar"];

/// Two-label task where a single cue word decides the label.
pub fn separable_splits(train: usize, validation: usize, test: usize, seed: u64) -> CorpusSplits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exclude: BTreeSet<String> = SEPARABLE_CUES.iter().map(|s| s.to_string()).collect();
    let filler = pseudo_words(60, &mut rng, &exclude);
    let mut make = |n: usize, prefix: &str| -> Vec<Document> {
        (0..n)
            .map(|i| {
                let label = i % 2;
                let len = rng.gen_range(8..=16);
                let mut words: Vec<&str> =
                    (0..len).map(|_| filler.choose(&mut rng).expect("filler exists").as_str()).collect();
                let at = rng.gen_range(0..=words.len());
                words.insert(at, SEPARABLE_CUES[label]);
                let name = if label == 0 { "pos" } else { "neg" };
                Document::new(format!("{prefix}{i:05}"), words.join(" "), Some(name.to_string()))
            })
            .collect()
    };
    let train_docs = make(train, "tr");
    let validation_docs = make(validation, "va");
    let test_docs = make(test, "te");
    CorpusSplits { train: train_docs, validation: validation_docs, test: test_docs, unlabeled: Vec::new() }
}
