//! Per-document keyword extraction: unigram (or n-gram) candidates scored by
//! embedding similarity to the document and diversified with Maximal
//! Marginal Relevance.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::process::{Command, Stdio};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FailurePolicy, Result};
use crate::tokenizer::pre_tokenize;

const ENGLISH_V1: &str = include_str!("../data/stopwords-english-v1.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub max_keywords_per_doc: usize,
    pub ngram_range: (usize, usize),
    pub use_mmr: bool,
    pub diversity: f64,
    pub stopword_list_id: String,
    pub lowercase: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            max_keywords_per_doc: 10,
            ngram_range: (1, 1),
            use_mmr: true,
            diversity: 0.8,
            stopword_list_id: StopwordList::ENGLISH_V1.to_string(),
            lowercase: true,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.ngram_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid ngram_range ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.diversity) {
            return Err(Error::Config(format!("diversity {} outside [0, 1]", self.diversity)));
        }
        if self.max_keywords_per_doc == 0 {
            return Err(Error::Config("max_keywords_per_doc must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StopwordList {
    pub id: String,
    words: HashSet<String>,
}

impl StopwordList {
    pub const ENGLISH_V1: &'static str = "english-v1";

    /// Looks up a list shipped with the crate.
    pub fn builtin(id: &str) -> Result<Self> {
        match id {
            Self::ENGLISH_V1 => Ok(Self::parse(id, ENGLISH_V1)),
            "none" => Ok(Self { id: id.into(), words: HashSet::new() }),
            other => Err(Error::Config(format!("unknown stopword list {other:?}"))),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self::parse(&id, &raw))
    }

    fn parse(id: &str, raw: &str) -> Self {
        let words =
            raw.lines().map(|l| l.trim().to_lowercase()).filter(|l| !l.is_empty() && !l.starts_with('#')).collect();
        Self { id: id.to_string(), words }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

fn is_candidate_word(word: &str) -> bool {
    word.chars().count() >= 2 && word.chars().all(char::is_alphanumeric) && word.chars().any(char::is_alphabetic)
}

/// Unique candidate terms in first-occurrence order.
pub fn candidate_terms(text: &str, config: &ExtractionConfig, stopwords: &StopwordList) -> Vec<String> {
    let tokens: Vec<String> = pre_tokenize(text)
        .into_iter()
        .filter(|w| is_candidate_word(w.text) && !stopwords.contains(w.text))
        .map(|w| if config.lowercase { w.lowercase() } else { w.text.to_string() })
        .collect();

    let (lo, hi) = config.ngram_range;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for start in 0..tokens.len() {
        for n in lo..=hi {
            if start + n > tokens.len() {
                break;
            }
            let term = tokens[start..start + n].join(" ");
            if seen.insert(term.clone()) {
                out.push(term);
            }
        }
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|x| *x == 0.0)
}

/// Greedy MMR. The first pick maximizes similarity to the document; every
/// later pick maximizes `(1 - diversity) * relevance - diversity * redundancy`
/// where redundancy is the highest similarity to an already selected term.
/// Ties go to the lexicographically smallest word. The recorded relevance is
/// always the plain similarity to the document.
pub fn mmr_select(
    doc_vector: &[f64],
    candidates: &[(String, Vec<f64>)],
    k: usize,
    diversity: f64,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&diversity) {
        return Err(Error::InvalidArgument(format!("diversity {diversity} outside [0, 1]")));
    }
    let dim = doc_vector.len();
    if dim == 0 || is_zero(doc_vector) {
        return Err(Error::Numeric("document vector is zero".into()));
    }
    let mut words = HashSet::new();
    for (word, v) in candidates {
        if v.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "candidate {word:?} has dimension {} instead of {dim}",
                v.len()
            )));
        }
        if is_zero(v) {
            return Err(Error::Numeric(format!("candidate {word:?} has a zero vector")));
        }
        if !words.insert(word.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate candidate {word:?}")));
        }
    }

    let relevance: Vec<f64> = candidates.iter().map(|(_, v)| cosine(v, doc_vector)).collect();
    // redundancy[i] = max similarity of candidate i to the selected set
    let mut redundancy = vec![f64::NEG_INFINITY; candidates.len()];
    let mut taken = vec![false; candidates.len()];
    let picks = k.min(candidates.len());
    let mut out = Vec::with_capacity(picks);

    for step in 0..picks {
        let mut best: Option<(usize, f64)> = None;
        for (i, (word, _)) in candidates.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let score =
                if step == 0 { relevance[i] } else { (1.0 - diversity) * relevance[i] - diversity * redundancy[i] };
            let better = match best {
                None => true,
                Some((j, s)) => score > s || (score == s && word < &candidates[j].0),
            };
            if better {
                best = Some((i, score));
            }
        }
        let (pick, _) = best.expect("picks never exceeds candidate count");
        taken[pick] = true;
        out.push((candidates[pick].0.clone(), relevance[pick]));
        for (i, (_, v)) in candidates.iter().enumerate() {
            if !taken[i] {
                redundancy[i] = redundancy[i].max(cosine(v, &candidates[pick].1));
            }
        }
    }
    Ok(out)
}

pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> String;

    /// One vector per span, all of the same positive dimension.
    fn embed(&self, spans: &[&str]) -> std::result::Result<Vec<Vec<f64>>, String>;
}

/// Deterministic stand-in: every word maps to a seeded pseudo-random unit
/// vector and a span embeds as the normalized sum of its word vectors.
#[derive(Debug, Clone)]
pub struct HashEmbedding {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedding {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(word.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(v)
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl EmbeddingBackend for HashEmbedding {
    fn id(&self) -> String {
        format!("hash-embedding:dim={}:seed={}", self.dim, self.seed)
    }

    fn embed(&self, spans: &[&str]) -> std::result::Result<Vec<Vec<f64>>, String> {
        Ok(spans
            .iter()
            .map(|span| {
                let words: Vec<String> = pre_tokenize(span)
                    .iter()
                    .filter(|w| w.text.chars().any(char::is_alphanumeric))
                    .map(|w| w.lowercase())
                    .collect();
                if words.is_empty() {
                    return self.word_vector(span);
                }
                let mut acc = vec![0.0; self.dim];
                for w in &words {
                    for (a, x) in acc.iter_mut().zip(self.word_vector(w)) {
                        *a += x;
                    }
                }
                normalize(acc)
            })
            .collect())
    }
}

/// Calls an external program with a JSON array of strings on stdin and
/// expects a JSON array of vectors on stdout.
#[derive(Debug, Clone)]
pub struct CommandEmbedding {
    pub program: String,
    pub args: Vec<String>,
}

impl EmbeddingBackend for CommandEmbedding {
    fn id(&self) -> String {
        format!("command:{} {}", self.program, self.args.join(" "))
    }

    fn embed(&self, spans: &[&str]) -> std::result::Result<Vec<Vec<f64>>, String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawning {}: {e}", self.program))?;
        let payload = serde_json::to_vec(spans).map_err(|e| e.to_string())?;
        child.stdin.take().expect("stdin is piped").write_all(&payload).map_err(|e| e.to_string())?;
        let output = child.wait_with_output().map_err(|e| e.to_string())?;
        if !output.status.success() {
            return Err(format!("{} exited with {}", self.program, output.status));
        }
        serde_json::from_slice(&output.stdout).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocKeywords {
    pub doc_id: String,
    pub keywords: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractionRun {
    pub keywords: Vec<DocKeywords>,
    pub skipped: Vec<String>,
}

fn extract_one(
    doc_id: &str,
    text: &str,
    backend: &dyn EmbeddingBackend,
    config: &ExtractionConfig,
    stopwords: &StopwordList,
) -> Result<DocKeywords> {
    let candidates = candidate_terms(text, config, stopwords);
    if candidates.is_empty() {
        return Ok(DocKeywords { doc_id: doc_id.to_string(), keywords: Vec::new() });
    }
    let backend_err = |message: String| Error::Backend { doc_id: doc_id.to_string(), message };
    let doc_vec = backend
        .embed(&[text])
        .map_err(backend_err)?
        .pop()
        .ok_or_else(|| backend_err("backend returned no document vector".into()))?;
    let refs: Vec<&str> = candidates.iter().map(String::as_str).collect();
    let vectors = backend.embed(&refs).map_err(backend_err)?;
    if vectors.len() != candidates.len() {
        return Err(backend_err(format!(
            "backend returned {} vectors for {} candidates",
            vectors.len(),
            candidates.len()
        )));
    }
    if vectors.iter().any(|v| v.len() != doc_vec.len()) || doc_vec.is_empty() {
        return Err(backend_err("backend returned inconsistent dimensions".into()));
    }
    let scored: Vec<(String, Vec<f64>)> = candidates.into_iter().zip(vectors).collect();
    let diversity = if config.use_mmr { config.diversity } else { 0.0 };
    let keywords = mmr_select(&doc_vec, &scored, config.max_keywords_per_doc, diversity)?;
    Ok(DocKeywords { doc_id: doc_id.to_string(), keywords })
}

/// Extracts keywords for each `(doc_id, text)` pair. Results keep input order.
pub fn extract_keywords(
    docs: &[(String, String)],
    backend: &dyn EmbeddingBackend,
    config: &ExtractionConfig,
    stopwords: &StopwordList,
    policy: FailurePolicy,
) -> Result<ExtractionRun> {
    config.validate()?;
    let results: Vec<Result<DocKeywords>> =
        docs.par_iter().map(|(id, text)| extract_one(id, text, backend, config, stopwords)).collect();
    let mut run = ExtractionRun::default();
    for result in results {
        match result {
            Ok(k) => run.keywords.push(k),
            Err(Error::Backend { doc_id, message }) if policy == FailurePolicy::SkipAndLog => {
                log::warn!("skipping keyword extraction for {doc_id}: {message}");
                run.skipped.push(doc_id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}

pub fn save_doc_keywords(keywords: &[DocKeywords], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for k in keywords {
        writeln!(out, "{}", serde_json::to_string(k).expect("keywords serialize")).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_doc_keywords(path: impl AsRef<Path>) -> Result<Vec<DocKeywords>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string()))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn english() -> StopwordList {
        StopwordList::builtin(StopwordList::ENGLISH_V1).unwrap()
    }

    #[test]
    fn candidates_drop_stopwords_and_repeat() {
        let got = candidate_terms("The movie was a good movie", &ExtractionConfig::default(), &english());
        assert_eq!(got, ["movie", "good"]);
        assert!(candidate_terms("", &ExtractionConfig::default(), &english()).is_empty());
    }

    #[test]
    fn candidates_drop_numbers_and_short_tokens() {
        let got = candidate_terms("x 42 covid19 3.5 b2b ok!", &ExtractionConfig::default(), &english());
        assert_eq!(got, ["covid19", "b2b", "ok"]);
    }

    #[test]
    fn bigram_candidates() {
        let config = ExtractionConfig { ngram_range: (1, 2), ..Default::default() };
        let got = candidate_terms("vaccine safety trial", &config, &english());
        assert_eq!(got, ["vaccine", "vaccine safety", "safety", "safety trial", "trial"]);
    }

    #[test]
    fn builtin_list_is_versioned() {
        let list = english();
        assert_eq!(list.id, "english-v1");
        assert_eq!(list.len(), 318);
        assert!(StopwordList::builtin("klingon").is_err());
    }

    fn cand(word: &str, v: &[f64]) -> (String, Vec<f64>) {
        (word.to_string(), v.to_vec())
    }

    #[test]
    fn singleton_selection() {
        let doc = [1.0, 1.0];
        let out = mmr_select(&doc, &[cand("only", &[1.0, 0.0])], 5, 0.8).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, "only");
        assert!((out[0].1 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn zero_diversity_is_top_k() {
        let doc = [1.0, 0.5, 0.0];
        let cands = vec![
            cand("a", &[0.0, 1.0, 0.0]),
            cand("b", &[1.0, 0.4, 0.1]),
            cand("c", &[1.0, 0.5, 0.0]),
            cand("d", &[0.0, 0.0, 1.0]),
        ];
        let words: Vec<String> = mmr_select(&doc, &cands, 3, 0.0).unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(words, ["c", "b", "a"]);
    }

    #[test]
    fn diversity_prefers_novel_terms() {
        let doc = [1.0, 0.2];
        let cands = vec![cand("near1", &[1.0, 0.0]), cand("near2", &[1.0, 0.01]), cand("far", &[0.3, 1.0])];
        let words: Vec<String> = mmr_select(&doc, &cands, 2, 0.8).unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(words, ["near2", "far"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let doc = [1.0, 0.0];
        let cands = vec![cand("zeta", &[1.0, 1.0]), cand("alpha", &[1.0, 1.0]), cand("mid", &[1.0, 1.0])];
        let words: Vec<String> = mmr_select(&doc, &cands, 3, 0.5).unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(words, ["alpha", "mid", "zeta"]);
    }

    #[test]
    fn zero_vectors_are_numeric_errors() {
        assert!(matches!(mmr_select(&[0.0, 0.0], &[cand("a", &[1.0, 0.0])], 1, 0.5), Err(Error::Numeric(_))));
        assert!(matches!(mmr_select(&[1.0, 0.0], &[cand("a", &[0.0, 0.0])], 1, 0.5), Err(Error::Numeric(_))));
    }

    struct Axis;
    impl EmbeddingBackend for Axis {
        fn id(&self) -> String {
            "axis".into()
        }
        fn embed(&self, spans: &[&str]) -> std::result::Result<Vec<Vec<f64>>, String> {
            let order = ["vaccine", "trial", "dose", "safety"];
            Ok(spans
                .iter()
                .map(|s| match order.iter().position(|w| w == s) {
                    Some(i) => {
                        let mut v = vec![0.0; 4];
                        v[i] = 1.0;
                        v
                    }
                    None => vec![4.0, 3.0, 2.0, 1.0],
                })
                .collect())
        }
    }

    #[test]
    fn orthogonal_candidates_follow_relevance() {
        let docs = vec![("d".to_string(), "safety dose trial vaccine".to_string())];
        let run =
            extract_keywords(&docs, &Axis, &ExtractionConfig::default(), &english(), FailurePolicy::FailFast).unwrap();
        let words: Vec<&str> = run.keywords[0].keywords.iter().map(|p| p.0.as_str()).collect();
        assert_eq!(words, ["vaccine", "trial", "dose", "safety"]);
    }

    #[test]
    fn empty_document_yields_empty_list() {
        let docs = vec![("e".to_string(), "the of and".to_string())];
        let run = extract_keywords(
            &docs,
            &HashEmbedding::new(8, 1),
            &ExtractionConfig::default(),
            &english(),
            FailurePolicy::FailFast,
        )
        .unwrap();
        assert!(run.keywords[0].keywords.is_empty());
    }

    #[test]
    fn hash_embedding_is_deterministic_unit_length() {
        let e = HashEmbedding::new(16, 3);
        let a = e.embed(&["vaccine", "vaccine trial"]).unwrap();
        let b = e.embed(&["vaccine", "vaccine trial"]).unwrap();
        assert_eq!(a, b);
        for v in &a {
            let n: f64 = v.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn doc_keywords_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.jsonl");
        let k = vec![DocKeywords { doc_id: "a".into(), keywords: vec![("vaccine".into(), 0.5)] }];
        save_doc_keywords(&k, &path).unwrap();
        assert_eq!(load_doc_keywords(&path).unwrap(), k);
    }
}
