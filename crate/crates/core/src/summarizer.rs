//! Abstractive subset generation through a pluggable summarization backend,
//! with the output length contract enforced in pipeline-tokenizer units.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStats, Document};
use crate::error::{Error, FailurePolicy, Result};
use crate::tokenizer::WordPieceTokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummarizerConfig {
    pub max_input_tokens: usize,
    pub max_output_tokens: usize,
    /// `None` leaves the minimum at the backend's own default.
    pub min_output_tokens: Option<usize>,
    pub batch_size: usize,
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        Self { max_input_tokens: 1024, max_output_tokens: 1024, min_output_tokens: None, batch_size: 8 }
    }
}

impl SummarizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_input_tokens == 0 || self.max_output_tokens == 0 || self.batch_size == 0 {
            return Err(Error::Config("summarizer limits and batch size must be positive".into()));
        }
        if self.max_output_tokens > self.max_input_tokens {
            return Err(Error::Config(format!(
                "max_output_tokens {} exceeds max_input_tokens {}",
                self.max_output_tokens, self.max_input_tokens
            )));
        }
        if let Some(min) = self.min_output_tokens {
            if min == 0 || min > self.max_output_tokens {
                return Err(Error::Config(format!(
                    "min_output_tokens {min} must lie in 1..={}",
                    self.max_output_tokens
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub doc_id: String,
    pub text: String,
    pub token_count: usize,
    /// Token count of the source document before any input truncation.
    pub source_token_count: usize,
}

pub trait SummarizationBackend: Send + Sync {
    /// Stable identity recorded in run metadata.
    fn id(&self) -> String;

    fn summarize(&self, text: &str, config: &SummarizerConfig) -> std::result::Result<String, String>;

    fn summarize_batch(&self, texts: &[&str], config: &SummarizerConfig) -> Vec<std::result::Result<String, String>> {
        texts.iter().map(|t| self.summarize(t, config)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeadBudget {
    Tokens(usize),
    Fraction(f64),
}

/// Deterministic extractive stand-in: keeps the leading tokens of the input,
/// cut on a word boundary.
#[derive(Debug, Clone)]
pub struct LeadTokensBackend {
    tokenizer: Arc<WordPieceTokenizer>,
    budget: LeadBudget,
}

impl LeadTokensBackend {
    pub fn new(tokenizer: Arc<WordPieceTokenizer>, budget: LeadBudget) -> Self {
        Self { tokenizer, budget }
    }
}

impl SummarizationBackend for LeadTokensBackend {
    fn id(&self) -> String {
        match self.budget {
            LeadBudget::Tokens(k) => format!("lead-tokens:{k}"),
            LeadBudget::Fraction(f) => format!("lead-fraction:{f}"),
        }
    }

    fn summarize(&self, text: &str, config: &SummarizerConfig) -> std::result::Result<String, String> {
        let total = self.tokenizer.count_tokens(text);
        let mut k = match self.budget {
            LeadBudget::Tokens(k) => k,
            LeadBudget::Fraction(f) => (total as f64 * f).ceil() as usize,
        };
        if let Some(min) = config.min_output_tokens {
            k = k.max(min);
        }
        k = k.clamp(1, config.max_output_tokens);
        Ok(self.tokenizer.clip_to_tokens(text, k).0)
    }
}

/// Runs an external program once per document: the document goes to stdin,
/// the summary is read from stdout.
#[derive(Debug, Clone)]
pub struct CommandBackend {
    pub program: String,
    pub args: Vec<String>,
}

impl SummarizationBackend for CommandBackend {
    fn id(&self) -> String {
        std::iter::once(self.program.as_str()).chain(self.args.iter().map(String::as_str)).collect::<Vec<_>>().join(" ")
    }

    fn summarize(&self, text: &str, config: &SummarizerConfig) -> std::result::Result<String, String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .env("SUMMARY_MAX_TOKENS", config.max_output_tokens.to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawning {}: {e}", self.program))?;
        child.stdin.take().expect("stdin is piped").write_all(text.as_bytes()).map_err(|e| e.to_string())?;
        let output = child.wait_with_output().map_err(|e| e.to_string())?;
        if !output.status.success() {
            return Err(format!(
                "{} exited with {}: {}",
                self.program,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            ));
        }
        String::from_utf8(output.stdout).map(|s| s.trim().to_string()).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRun {
    pub summaries: Vec<Summary>,
    /// Documents whose backend output had to be clipped.
    pub clipped: Vec<String>,
    /// Documents dropped under [`FailurePolicy::SkipAndLog`].
    pub skipped: Vec<String>,
}

/// Summarizes every document; output order follows input order regardless
/// of how batches are scheduled.
pub fn summarize_corpus(
    docs: &[Document],
    backend: &dyn SummarizationBackend,
    tokenizer: &WordPieceTokenizer,
    config: &SummarizerConfig,
    policy: FailurePolicy,
) -> Result<SummaryRun> {
    config.validate()?;
    if docs.is_empty() {
        return Err(Error::InvalidArgument("no documents to summarize".into()));
    }

    let batches: Vec<Vec<Result<(Summary, bool)>>> = docs
        .par_chunks(config.batch_size)
        .map(|chunk| {
            let sources: Vec<(String, usize)> = chunk
                .iter()
                .map(|d| {
                    let n = tokenizer.count_tokens(&d.text);
                    let input = if n > config.max_input_tokens {
                        tokenizer.clip_to_tokens(&d.text, config.max_input_tokens).0
                    } else {
                        d.text.clone()
                    };
                    (input, n)
                })
                .collect();
            let texts: Vec<&str> = sources.iter().map(|(t, _)| t.as_str()).collect();
            let outputs = backend.summarize_batch(&texts, config);
            chunk
                .iter()
                .zip(sources.iter())
                .zip(outputs)
                .map(|((doc, (_, source_tokens)), out)| {
                    let text = out.map_err(|message| Error::Backend { doc_id: doc.id.clone(), message })?;
                    enforce_length(doc, text, *source_tokens, tokenizer, config)
                })
                .collect()
        })
        .collect();

    let mut run = SummaryRun::default();
    for result in batches.into_iter().flatten() {
        match result {
            Ok((summary, clipped)) => {
                if clipped {
                    run.clipped.push(summary.doc_id.clone());
                }
                run.summaries.push(summary);
            }
            Err(Error::Backend { doc_id, message }) if policy == FailurePolicy::SkipAndLog => {
                log::warn!("skipping document {doc_id}: {message}");
                run.skipped.push(doc_id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}

fn enforce_length(
    doc: &Document,
    text: String,
    source_tokens: usize,
    tokenizer: &WordPieceTokenizer,
    config: &SummarizerConfig,
) -> Result<(Summary, bool)> {
    let limit = config.max_output_tokens.min(source_tokens);
    let count = tokenizer.count_tokens(&text);
    if count == 0 {
        return Err(Error::Backend { doc_id: doc.id.clone(), message: "empty summary".into() });
    }
    let (text, token_count, clipped) = if count > limit {
        log::warn!("summary of {} has {count} tokens, clipping to {limit}", doc.id);
        let (clipped, n) = tokenizer.clip_to_tokens(&text, limit);
        (clipped, n, true)
    } else {
        (text, count, false)
    };
    let summary = Summary { doc_id: doc.id.clone(), text, token_count, source_token_count: source_tokens };
    Ok((summary, clipped))
}

/// Byte size of the summaries relative to the originals.
pub fn compaction_ratio(originals: &CorpusStats, summaries: &CorpusStats) -> Result<f64> {
    if originals.byte_size == 0 {
        return Err(Error::InvalidArgument("original corpus has zero size".into()));
    }
    Ok(summaries.byte_size as f64 / originals.byte_size as f64)
}

pub fn summaries_as_documents(summaries: &[Summary]) -> Vec<Document> {
    summaries.iter().map(|s| Document::new(s.doc_id.clone(), s.text.clone(), None)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryRecord {
    id: String,
    text: String,
    split: String,
    token_count: usize,
    source_token_count: usize,
}

pub fn save_summaries(summaries: &[Summary], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in summaries {
        let record = SummaryRecord {
            id: s.doc_id.clone(),
            text: s.text.clone(),
            split: "unlabeled".into(),
            token_count: s.token_count,
            source_token_count: s.source_token_count,
        };
        writeln!(out, "{}", serde_json::to_string(&record).expect("summary serializes"))
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_summaries(path: impl AsRef<Path>) -> Result<Vec<Summary>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SummaryRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
        out.push(Summary {
            doc_id: r.id,
            text: r.text,
            token_count: r.token_count,
            source_token_count: r.source_token_count,
        });
    }
    Ok(out)
}

/// Sidecar written next to a summary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetadata {
    pub backend: String,
    pub config: SummarizerConfig,
    pub documents: usize,
    pub clipped: Vec<String>,
    pub skipped: Vec<String>,
}

impl SummaryMetadata {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("metadata serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokenizer() -> Arc<WordPieceTokenizer> {
        Arc::new(WordPieceTokenizer::train(["alpha beta gamma delta epsilon zeta eta theta"; 2], 200, 2))
    }

    fn docs(n: usize) -> Vec<Document> {
        (0..n).map(|i| Document::new(format!("d{i}"), "alpha beta gamma delta epsilon zeta eta theta", None)).collect()
    }

    struct Verbose;
    impl SummarizationBackend for Verbose {
        fn id(&self) -> String {
            "verbose".into()
        }
        fn summarize(&self, text: &str, _: &SummarizerConfig) -> std::result::Result<String, String> {
            Ok(format!("{text} {text} {text}"))
        }
    }

    struct Failing;
    impl SummarizationBackend for Failing {
        fn id(&self) -> String {
            "failing".into()
        }
        fn summarize(&self, text: &str, _: &SummarizerConfig) -> std::result::Result<String, String> {
            if text.starts_with("bad") {
                Err("boom".into())
            } else {
                Ok(text.to_string())
            }
        }
    }

    #[test]
    fn one_summary_per_document_in_order() {
        let tok = tokenizer();
        let backend = LeadTokensBackend::new(tok.clone(), LeadBudget::Tokens(3));
        let run =
            summarize_corpus(&docs(3), &backend, &tok, &SummarizerConfig::default(), FailurePolicy::FailFast).unwrap();
        let ids: Vec<&str> = run.summaries.iter().map(|s| s.doc_id.as_str()).collect();
        assert_eq!(ids, ["d0", "d1", "d2"]);
        for s in &run.summaries {
            assert_eq!(s.token_count, 3);
            assert_eq!(s.text, "alpha beta gamma");
            assert_eq!(s.source_token_count, 8);
        }
    }

    #[test]
    fn overlong_output_is_clipped_to_source_length() {
        let tok = tokenizer();
        let run =
            summarize_corpus(&docs(2), &Verbose, &tok, &SummarizerConfig::default(), FailurePolicy::FailFast).unwrap();
        assert_eq!(run.clipped, ["d0", "d1"]);
        assert!(run.summaries.iter().all(|s| s.token_count == 8));
    }

    #[test]
    fn long_inputs_are_truncated_before_summarizing() {
        let tok = tokenizer();
        let config = SummarizerConfig { max_input_tokens: 5, max_output_tokens: 4, ..Default::default() };
        let run = summarize_corpus(&docs(1), &Failing, &tok, &config, FailurePolicy::FailFast).unwrap();
        // echo of the truncated 5-token input, clipped to 4
        assert_eq!(run.summaries[0].text, "alpha beta gamma delta");
        assert_eq!(run.summaries[0].source_token_count, 8);
    }

    #[test]
    fn failure_policies() {
        let tok = tokenizer();
        let mut input = docs(2);
        input.push(Document::new("bad1", "bad alpha", None));
        let err = summarize_corpus(&input, &Failing, &tok, &SummarizerConfig::default(), FailurePolicy::FailFast)
            .unwrap_err();
        assert!(matches!(err, Error::Backend { ref doc_id, .. } if doc_id == "bad1"));
        let run =
            summarize_corpus(&input, &Failing, &tok, &SummarizerConfig::default(), FailurePolicy::SkipAndLog).unwrap();
        assert_eq!(run.summaries.len(), 2);
        assert_eq!(run.skipped, ["bad1"]);
    }

    #[test]
    fn config_validation() {
        let bad = SummarizerConfig { max_input_tokens: 10, max_output_tokens: 20, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SummarizerConfig { min_output_tokens: Some(2000), ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(SummarizerConfig::default().validate().is_ok());
    }

    #[test]
    fn compaction_ratio_values() {
        let stats = |b| CorpusStats { byte_size: b, ..Default::default() };
        assert_eq!(compaction_ratio(&stats(48), &stats(30)).unwrap(), 0.625);
        assert_eq!(compaction_ratio(&stats(7), &stats(7)).unwrap(), 1.0);
        assert!(compaction_ratio(&stats(0), &stats(1)).is_err());
    }

    #[test]
    fn summaries_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let sums = vec![Summary { doc_id: "a".into(), text: "x y".into(), token_count: 2, source_token_count: 5 }];
        save_summaries(&sums, &path).unwrap();
        assert_eq!(load_summaries(&path).unwrap(), sums);
        // also readable as a corpus file
        let splits = crate::corpus::load_corpus(&path, crate::corpus::CorpusFormat::Jsonl).unwrap();
        assert_eq!(splits.unlabeled[0].text, "x y");
    }
}
