//! Config-driven orchestration of the five-row experiment matrix.
//!
//! Every stage reads its inputs from and writes its outputs to one run
//! directory, so stages can be invoked separately or all at once through
//! [`run_matrix`]. Missing inputs produce [`Error::MissingArtifact`] naming
//! the subcommand that creates them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    corpus_stats, derive_test_from_train, load_corpus, save_corpus, CorpusFormat, CorpusSplits, CorpusStats, Document,
};
use crate::error::{Error, FailurePolicy, Result};
use crate::keyword_extraction::{
    extract_keywords, save_doc_keywords, CommandEmbedding, EmbeddingBackend, ExtractionConfig, HashEmbedding,
    StopwordList,
};
use crate::keyword_filter::{
    apply_cutoff, build_frequency_table, frequency_curve, KeywordFrequencyTable, KeywordSet, KeywordSource,
};
use crate::masking::MaskingMode;
use crate::reporting::{
    build_table, emit_frequency_figure, fill_ratios, PretrainingData, PretrainingMethod, ReportTable, RunReport,
};
use crate::summarizer::{
    compaction_ratio, load_summaries, save_summaries, summaries_as_documents, summarize_corpus, CommandBackend,
    LeadBudget, LeadTokensBackend, SummarizationBackend, SummarizerConfig, SummaryMetadata,
};
use crate::tokenizer::WordPieceTokenizer;
use crate::training::{
    finetune, pretrain, CorpusVariant, EncoderConfig, EncoderModel, FinetuneConfig, LrSchedule, Pooling,
    PretrainConfig, TinyEncoder, TrainedRun,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixRow {
    None,
    RandomWhole,
    RandomSummary,
    KeywordWhole,
    KeywordSummary,
}

impl MatrixRow {
    pub const ALL: [MatrixRow; 5] = [
        MatrixRow::None,
        MatrixRow::RandomWhole,
        MatrixRow::RandomSummary,
        MatrixRow::KeywordWhole,
        MatrixRow::KeywordSummary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixRow::None => "none",
            MatrixRow::RandomWhole => "random_whole",
            MatrixRow::RandomSummary => "random_summary",
            MatrixRow::KeywordWhole => "keyword_whole",
            MatrixRow::KeywordSummary => "keyword_summary",
        }
    }

    pub fn data(self) -> PretrainingData {
        match self {
            MatrixRow::None => PretrainingData::None,
            MatrixRow::RandomWhole | MatrixRow::KeywordWhole => PretrainingData::Whole,
            MatrixRow::RandomSummary | MatrixRow::KeywordSummary => PretrainingData::Summary,
        }
    }

    pub fn method(self) -> PretrainingMethod {
        match self {
            MatrixRow::None => PretrainingMethod::None,
            MatrixRow::RandomWhole | MatrixRow::RandomSummary => PretrainingMethod::Random,
            MatrixRow::KeywordWhole | MatrixRow::KeywordSummary => PretrainingMethod::Keyword,
        }
    }

    pub fn corpus_variant(self) -> Option<CorpusVariant> {
        match self.data() {
            PretrainingData::None => None,
            PretrainingData::Whole => Some(CorpusVariant::Whole),
            PretrainingData::Summary => Some(CorpusVariant::Summary),
        }
    }

    /// Keywords for whole-data masking come from the whole data and
    /// keywords for summary masking from the summaries.
    pub fn keyword_source(self) -> Option<KeywordSource> {
        match self {
            MatrixRow::KeywordWhole => Some(KeywordSource::WholeData),
            MatrixRow::KeywordSummary => Some(KeywordSource::Summaries),
            _ => None,
        }
    }

    pub fn needs_summaries(self) -> bool {
        self.data() == PretrainingData::Summary || self.keyword_source() == Some(KeywordSource::Summaries)
    }
}

impl fmt::Display for MatrixRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatrixRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MatrixRow::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown matrix row {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SummarizerBackendConfig {
    /// Keeps the first `tokens` tokens of each document.
    LeadTokens { tokens: usize },
    /// Keeps the leading `fraction` of each document's tokens.
    LeadFraction { fraction: f64 },
    /// External program: document on stdin, summary on stdout.
    Command { program: String, args: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingBackendConfig {
    Hash { dim: usize },
    Command { program: String, args: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    pub format: CorpusFormat,
    /// Draws a test split of this size from train when the corpus has none.
    pub derive_test_size: Option<usize>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { path: PathBuf::from("corpus.jsonl"), format: CorpusFormat::Jsonl, derive_test_size: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    /// Existing WordPiece vocabulary; trained from the corpus when absent.
    pub vocab: Option<PathBuf>,
    pub vocab_size: usize,
    pub min_frequency: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { vocab: None, vocab_size: 4000, min_frequency: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizerSection {
    pub backend: SummarizerBackendConfig,
    pub limits: SummarizerConfig,
}

impl Default for SummarizerSection {
    fn default() -> Self {
        Self { backend: SummarizerBackendConfig::LeadFraction { fraction: 0.4 }, limits: SummarizerConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionSection {
    pub backend: EmbeddingBackendConfig,
    /// Replaces the built-in list named by `settings.stopword_list_id`.
    pub stopwords_file: Option<PathBuf>,
    pub settings: ExtractionConfig,
}

impl Default for ExtractionSection {
    fn default() -> Self {
        Self {
            backend: EmbeddingBackendConfig::Hash { dim: 64 },
            stopwords_file: None,
            settings: ExtractionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub threshold: usize,
    /// Number of lowest frequency levels in the curve and figure.
    pub curve_tail: usize,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self { threshold: 8, curve_tail: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingSection {
    pub keyword_probability: f64,
    pub random_probability: f64,
}

impl Default for MaskingSection {
    fn default() -> Self {
        Self { keyword_probability: 0.75, random_probability: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub pooling: Pooling,
    pub init_std: f64,
    /// Starting checkpoint directory; a fresh encoder is built when absent.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let tiny = EncoderConfig::tiny(0);
        Self {
            hidden: tiny.hidden,
            layers: tiny.layers,
            heads: tiny.heads,
            intermediate: tiny.intermediate,
            max_positions: tiny.max_positions,
            pooling: tiny.pooling,
            init_std: tiny.init_std,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub max_seq_len: usize,
    pub keyword_schedule: LrSchedule,
    pub random_schedule: LrSchedule,
    pub allow_schedule_override: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let k = PretrainConfig::default();
        Self {
            epochs: k.epochs,
            batch_size: k.batch_size,
            base_lr: k.base_lr,
            weight_decay: k.weight_decay,
            max_seq_len: k.max_seq_len,
            keyword_schedule: LrSchedule::Constant,
            random_schedule: LrSchedule::LinearDecay,
            allow_schedule_override: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub master_seed: u64,
    pub model_id: String,
    pub failure_policy: FailurePolicy,
    pub matrix: Vec<MatrixRow>,
    pub corpus: CorpusSection,
    pub tokenizer: TokenizerSection,
    pub summarizer: SummarizerSection,
    pub extraction: ExtractionSection,
    pub filter: FilterSection,
    pub masking: MaskingSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("run"),
            master_seed: 42,
            model_id: "tiny-encoder".into(),
            failure_policy: FailurePolicy::FailFast,
            matrix: MatrixRow::ALL.to_vec(),
            corpus: CorpusSection::default(),
            tokenizer: TokenizerSection::default(),
            summarizer: SummarizerSection::default(),
            extraction: ExtractionSection::default(),
            filter: FilterSection::default(),
            masking: MaskingSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(raw: &str) -> Result<Self> {
        let config: Self = toml::from_str(raw).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("pipeline config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.master_seed > i64::MAX as u64 {
            return Err(Error::Config(format!("master_seed must not exceed {}", i64::MAX)));
        }
        if self.matrix.is_empty() {
            return Err(Error::Config("matrix selects no rows".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.matrix.iter().find(|r| !seen.insert(**r)) {
            return Err(Error::Config(format!("matrix lists {dup} twice")));
        }
        if self.filter.threshold == 0 || self.filter.curve_tail == 0 {
            return Err(Error::Config("filter threshold and curve_tail must be positive".into()));
        }
        for p in [self.masking.keyword_probability, self.masking.random_probability] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("masking probability {p} outside (0, 1]")));
            }
        }
        match &self.summarizer.backend {
            SummarizerBackendConfig::LeadTokens { tokens: 0 } => {
                return Err(Error::Config("lead_tokens summarizer needs tokens > 0".into()))
            }
            SummarizerBackendConfig::LeadFraction { fraction } if !(*fraction > 0.0 && *fraction <= 1.0) => {
                return Err(Error::Config(format!("lead_fraction {fraction} outside (0, 1]")))
            }
            _ => {}
        }
        if let EmbeddingBackendConfig::Hash { dim: 0 } = self.extraction.backend {
            return Err(Error::Config("hash embedding needs dim > 0".into()));
        }
        self.summarizer.limits.validate()?;
        self.extraction.settings.validate()?;
        self.finetune.validate()?;
        for row in MatrixRow::ALL.into_iter().filter(|r| r.method() != PretrainingMethod::None) {
            self.pretrain_config(row).validate()?;
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.output_dir)
    }

    /// Pretraining settings for one matrix row.
    pub fn pretrain_config(&self, row: MatrixRow) -> PretrainConfig {
        let p = &self.pretrain;
        let variant = row.corpus_variant().unwrap_or(CorpusVariant::Whole);
        let (mode, schedule, prob) = match row.method() {
            PretrainingMethod::Random => (MaskingMode::Random, p.random_schedule, self.masking.random_probability),
            _ => (MaskingMode::Keyword, p.keyword_schedule, self.masking.keyword_probability),
        };
        PretrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr_schedule: schedule,
            base_lr: p.base_lr,
            weight_decay: p.weight_decay,
            collator_mode: mode,
            corpus_variant: variant,
            seed: derive_seed(self.master_seed, &format!("pretrain/{row}")),
            masking_probability: Some(prob),
            max_seq_len: p.max_seq_len,
            allow_schedule_override: p.allow_schedule_override,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig { seed: derive_seed(self.master_seed, "finetune"), ..self.finetune.clone() }
    }

    /// Every derived stage seed, for logging and snapshots.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut stages: Vec<String> =
            ["split", "embedding", "model_init", "finetune"].iter().map(|s| s.to_string()).collect();
        stages.extend(
            MatrixRow::ALL.iter().filter(|r| r.method() != PretrainingMethod::None).map(|r| format!("pretrain/{r}")),
        );
        stages.into_iter().map(|s| (s.clone(), derive_seed(self.master_seed, &s))).collect()
    }
}

/// Stage seed: the first eight bytes (little endian) of
/// `SHA-256("<master>:<stage>")`, truncated to 63 bits so that it fits the
/// signed integers of TOML snapshots.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let digest = Sha256::digest(format!("{master}:{stage}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes")) >> 1
}

/// File layout of one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }
    pub fn corpus_stats(&self) -> PathBuf {
        self.root.join("corpus_stats.txt")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }
    pub fn summaries(&self) -> PathBuf {
        self.root.join("summaries.jsonl")
    }
    pub fn summaries_meta(&self) -> PathBuf {
        self.root.join("summaries.meta.json")
    }
    pub fn summary_stats(&self) -> PathBuf {
        self.root.join("summary_stats.txt")
    }
    pub fn compaction(&self) -> PathBuf {
        self.root.join("compaction.txt")
    }
    pub fn keyword_dir(&self, source: KeywordSource) -> PathBuf {
        self.root.join("keywords").join(source.as_str())
    }
    pub fn doc_keywords(&self, source: KeywordSource) -> PathBuf {
        self.keyword_dir(source).join("doc_keywords.jsonl")
    }
    pub fn frequency_table(&self, source: KeywordSource) -> PathBuf {
        self.keyword_dir(source).join("freq.tsv")
    }
    pub fn curve_csv(&self, source: KeywordSource) -> PathBuf {
        self.keyword_dir(source).join("curve.csv")
    }
    pub fn curve_svg(&self, source: KeywordSource) -> PathBuf {
        self.keyword_dir(source).join("curve.svg")
    }
    pub fn keyword_set(&self, source: KeywordSource) -> PathBuf {
        self.keyword_dir(source).join("keyword_set.txt")
    }
    pub fn run_dir(&self, row: MatrixRow) -> PathBuf {
        self.root.join("runs").join(row.as_str())
    }
    pub fn pretrained(&self, row: MatrixRow) -> PathBuf {
        self.run_dir(row).join("pretrained")
    }
    pub fn pretrain_record(&self, row: MatrixRow) -> PathBuf {
        self.run_dir(row).join("pretrain.json")
    }
    pub fn run_report(&self, row: MatrixRow) -> PathBuf {
        self.run_dir(row).join("report.json")
    }
    pub fn report_tsv(&self) -> PathBuf {
        self.root.join("report.tsv")
    }
    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }
    pub fn report_meta(&self) -> PathBuf {
        self.root.join("report.meta.txt")
    }
}

fn require(path: PathBuf, subcommand: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, subcommand })
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Documents used as the "whole data" pretraining corpus: the unlabeled
/// split, or the training texts when no unlabeled split exists.
pub fn pretraining_documents(splits: &CorpusSplits) -> &[Document] {
    if splits.unlabeled.is_empty() {
        &splits.train
    } else {
        &splits.unlabeled
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub counts: (usize, usize, usize, usize),
    pub pretraining_stats: CorpusStats,
    pub vocab_size: usize,
}

/// Loads and validates the corpus, derives a test split if configured,
/// and fixes the tokenizer vocabulary.
pub fn run_ingest(config: &PipelineConfig) -> Result<IngestSummary> {
    let layout = config.layout();
    mkdir(&layout.root)?;
    let mut splits = load_corpus(&config.corpus.path, config.corpus.format)?;
    if let Some(size) = config.corpus.derive_test_size {
        if splits.test.is_empty() {
            splits = derive_test_from_train(splits, size, derive_seed(config.master_seed, "split"))?;
        }
    }
    splits.validate()?;
    save_corpus(&splits, layout.corpus())?;
    let docs = pretraining_documents(&splits);
    if docs.is_empty() {
        return Err(Error::Data("corpus has neither unlabeled nor training documents".into()));
    }
    let stats = corpus_stats(docs);
    stats.save(layout.corpus_stats())?;

    let tokenizer = match &config.tokenizer.vocab {
        Some(path) => WordPieceTokenizer::from_vocab_file(path)?,
        None => {
            let texts = docs.iter().chain(&splits.train).map(|d| d.text.as_str());
            WordPieceTokenizer::train(texts, config.tokenizer.vocab_size, config.tokenizer.min_frequency)
        }
    };
    tokenizer.save_vocab(layout.vocab())?;
    log::info!("ingested {} documents; vocabulary of {}", splits.len(), tokenizer.vocab_size());
    Ok(IngestSummary { counts: splits.counts(), pretraining_stats: stats, vocab_size: tokenizer.vocab_size() })
}

fn load_ingested(layout: &Layout) -> Result<(CorpusSplits, WordPieceTokenizer)> {
    let splits = load_corpus(require(layout.corpus(), "ingest")?, CorpusFormat::Jsonl)?;
    let tokenizer = WordPieceTokenizer::from_vocab_file(require(layout.vocab(), "ingest")?)?;
    Ok((splits, tokenizer))
}

fn summarization_backend(config: &PipelineConfig, tokenizer: Arc<WordPieceTokenizer>) -> Box<dyn SummarizationBackend> {
    match &config.summarizer.backend {
        SummarizerBackendConfig::LeadTokens { tokens } => {
            Box::new(LeadTokensBackend::new(tokenizer, LeadBudget::Tokens(*tokens)))
        }
        SummarizerBackendConfig::LeadFraction { fraction } => {
            Box::new(LeadTokensBackend::new(tokenizer, LeadBudget::Fraction(*fraction)))
        }
        SummarizerBackendConfig::Command { program, args } => {
            Box::new(CommandBackend { program: program.clone(), args: args.clone() })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummarizeSummary {
    pub summaries: usize,
    pub clipped: usize,
    pub skipped: usize,
    pub compaction_ratio: f64,
}

/// Summarizes the whole-data corpus and records the compaction ratio.
pub fn run_summarize(config: &PipelineConfig) -> Result<SummarizeSummary> {
    let layout = config.layout();
    let (splits, tokenizer) = load_ingested(&layout)?;
    let tokenizer = Arc::new(tokenizer);
    let backend = summarization_backend(config, tokenizer.clone());
    let docs = pretraining_documents(&splits);
    let run = summarize_corpus(docs, backend.as_ref(), &tokenizer, &config.summarizer.limits, config.failure_policy)?;
    save_summaries(&run.summaries, layout.summaries())?;
    SummaryMetadata {
        backend: backend.id(),
        config: config.summarizer.limits.clone(),
        documents: run.summaries.len(),
        clipped: run.clipped.clone(),
        skipped: run.skipped.clone(),
    }
    .save(layout.summaries_meta())?;
    let whole = corpus_stats(docs);
    let compact = corpus_stats(&summaries_as_documents(&run.summaries));
    compact.save(layout.summary_stats())?;
    let ratio = compaction_ratio(&whole, &compact)?;
    write(
        &layout.compaction(),
        format!("original_bytes={}\nsummary_bytes={}\ncompaction_ratio={ratio}\n", whole.byte_size, compact.byte_size),
    )?;
    log::info!("summarized {} documents, compaction ratio {ratio:.4}", run.summaries.len());
    Ok(SummarizeSummary {
        summaries: run.summaries.len(),
        clipped: run.clipped.len(),
        skipped: run.skipped.len(),
        compaction_ratio: ratio,
    })
}

fn source_documents(layout: &Layout, source: KeywordSource) -> Result<Vec<Document>> {
    match source {
        KeywordSource::WholeData => {
            let (splits, _) = load_ingested(layout)?;
            Ok(pretraining_documents(&splits).to_vec())
        }
        KeywordSource::Summaries => {
            Ok(summaries_as_documents(&load_summaries(require(layout.summaries(), "summarize")?)?))
        }
    }
}

fn embedding_backend(config: &PipelineConfig) -> Box<dyn EmbeddingBackend> {
    match &config.extraction.backend {
        EmbeddingBackendConfig::Hash { dim } => {
            Box::new(HashEmbedding::new(*dim, derive_seed(config.master_seed, "embedding")))
        }
        EmbeddingBackendConfig::Command { program, args } => {
            Box::new(CommandEmbedding { program: program.clone(), args: args.clone() })
        }
    }
}

/// Extracts per-document keywords from `source`, builds the frequency
/// table and applies the configured cut-off.
pub fn run_extract(config: &PipelineConfig, source: KeywordSource) -> Result<KeywordSet> {
    let layout = config.layout();
    let docs = source_documents(&layout, source)?;
    let stopwords = match &config.extraction.stopwords_file {
        Some(path) => StopwordList::from_file(path)?,
        None => StopwordList::builtin(&config.extraction.settings.stopword_list_id)?,
    };
    let pairs: Vec<(String, String)> = docs.into_iter().map(|d| (d.id, d.text)).collect();
    let backend = embedding_backend(config);
    let run =
        extract_keywords(&pairs, backend.as_ref(), &config.extraction.settings, &stopwords, config.failure_policy)?;
    mkdir(&layout.keyword_dir(source))?;
    save_doc_keywords(&run.keywords, layout.doc_keywords(source))?;
    build_frequency_table(&run.keywords).save(layout.frequency_table(source))?;
    log::info!("extracted keywords for {} documents from {source}", run.keywords.len());
    run_filter(config, source, None)
}

/// Re-applies a cut-off to an existing frequency table and redraws the
/// frequency figure.
pub fn run_filter(config: &PipelineConfig, source: KeywordSource, threshold: Option<usize>) -> Result<KeywordSet> {
    let layout = config.layout();
    let table = KeywordFrequencyTable::load(require(layout.frequency_table(source), "extract")?)?;
    let threshold = threshold.unwrap_or(config.filter.threshold);
    let set = apply_cutoff(&table, threshold, source)?;
    set.save(layout.keyword_set(source))?;
    if !table.is_empty() {
        let curve = frequency_curve(&table, config.filter.curve_tail)?;
        emit_frequency_figure(&curve, threshold, layout.curve_svg(source), layout.curve_csv(source))?;
    }
    if set.is_empty() {
        log::warn!("cut-off {threshold} leaves no {source} keywords");
    }
    log::info!("{} {source} keywords at cut-off {threshold}", set.len());
    Ok(set)
}

/// The model every matrix row starts from.
pub fn initial_model(config: &PipelineConfig, tokenizer: &WordPieceTokenizer) -> Result<TinyEncoder> {
    let model = match &config.model.checkpoint {
        Some(dir) => TinyEncoder::load(dir)?,
        None => {
            let m = &config.model;
            TinyEncoder::new(EncoderConfig {
                vocab_size: tokenizer.vocab_size(),
                hidden: m.hidden,
                layers: m.layers,
                heads: m.heads,
                intermediate: m.intermediate,
                max_positions: m.max_positions,
                pooling: m.pooling,
                init_std: m.init_std,
                seed: derive_seed(config.master_seed, "model_init"),
            })?
        }
    };
    if model.vocab_size() != tokenizer.vocab_size() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match tokenizer vocabulary {}",
            model.vocab_size(),
            tokenizer.vocab_size()
        )));
    }
    Ok(model)
}

/// Bytes of the pretraining corpus a row uses.
fn row_corpus(layout: &Layout, row: MatrixRow) -> Result<Vec<Document>> {
    match row.corpus_variant() {
        Some(CorpusVariant::Whole) => source_documents(layout, KeywordSource::WholeData),
        Some(CorpusVariant::Summary) => source_documents(layout, KeywordSource::Summaries),
        None => Ok(Vec::new()),
    }
}

/// Continued pretraining for one row; writes the checkpoint, loss curve and
/// run record under the row's directory.
pub fn run_pretrain(config: &PipelineConfig, row: MatrixRow) -> Result<TrainedRun> {
    if row.method() == PretrainingMethod::None {
        return Err(Error::InvalidArgument(format!("row {row} performs no pretraining")));
    }
    let layout = config.layout();
    let (_, tokenizer) = load_ingested(&layout)?;
    let docs = row_corpus(&layout, row)?;
    let keywords = match row.keyword_source() {
        Some(source) => Some(KeywordSet::load(require(layout.keyword_set(source), "extract")?)?),
        None => None,
    };
    let mut model = initial_model(config, &tokenizer)?;
    let pretrain_config = config.pretrain_config(row);
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let mut run = pretrain(&mut model, &tokenizer, &texts, keywords.as_ref(), &pretrain_config)?;

    let dir = layout.run_dir(row);
    mkdir(&dir)?;
    model.save(layout.pretrained(row))?;
    run.checkpoint = Some(layout.pretrained(row));
    write(&dir.join("loss.csv"), run.loss_curve_csv())?;
    write(&layout.pretrain_record(row), serde_json::to_string_pretty(&run).expect("run record serializes"))?;
    log::info!("pretrained {row} in {:.4} min ({} steps)", run.pretraining_minutes, run.loss_curve.len());
    Ok(run)
}

/// Everything needed to rerun one row, written as `config.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSnapshot {
    pub row: MatrixRow,
    pub seeds: BTreeMap<String, u64>,
    pub pretrain: Option<PretrainConfig>,
    pub finetune: FinetuneConfig,
    pub pipeline: PipelineConfig,
}

/// Fine-tunes the row's model (pretrained, or the initial model for the
/// `none` row) and writes its metrics and report.
pub fn run_finetune(config: &PipelineConfig, row: MatrixRow) -> Result<RunReport> {
    let layout = config.layout();
    let (splits, tokenizer) = load_ingested(&layout)?;
    let (base, minutes, corpus_bytes) = if row.method() == PretrainingMethod::None {
        (initial_model(config, &tokenizer)?, 0.0, None)
    } else {
        let record = read(&require(layout.pretrain_record(row), "pretrain")?)?;
        let run: TrainedRun = serde_json::from_str(&record)
            .map_err(|e| Error::parse(layout.pretrain_record(row).display().to_string(), e.to_string()))?;
        let model = TinyEncoder::load(require(layout.pretrained(row), "pretrain")?)?;
        let bytes = corpus_stats(&row_corpus(&layout, row)?).byte_size;
        (model, run.pretraining_minutes, Some(bytes))
    };
    let finetune_config = config.finetune_config();
    let outcome = finetune(&base, &tokenizer, &splits, &finetune_config)?;

    let dir = layout.run_dir(row);
    mkdir(&dir)?;
    write(&dir.join("metrics.txt"), outcome.metrics_text())?;
    let snapshot = RowSnapshot {
        row,
        seeds: config.seeds(),
        pretrain: (row.method() != PretrainingMethod::None).then(|| config.pretrain_config(row)),
        finetune: finetune_config,
        pipeline: config.clone(),
    };
    write(&dir.join("config.toml"), toml::to_string_pretty(&snapshot).expect("snapshot serializes"))?;
    let report = RunReport {
        row_id: row.as_str().to_string(),
        model_id: config.model_id.clone(),
        pretraining_data: row.data(),
        pretraining_method: row.method(),
        valid_acc: outcome.validation.accuracy,
        valid_f1: outcome.validation.f1,
        test_acc: outcome.test.accuracy,
        test_f1: outcome.test.f1,
        pretraining_minutes: minutes,
        time_ratio: None,
        data_size_ratio: None,
        corpus_bytes,
    };
    write(&layout.run_report(row), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    log::info!("fine-tuned {row}: test acc {:.4}, test f1 {:.4}", report.test_acc, report.test_f1);
    Ok(report)
}

/// Collects the selected rows' reports into `report.tsv` and `report.md`.
pub fn run_report(config: &PipelineConfig) -> Result<ReportTable> {
    let layout = config.layout();
    let mut reports = Vec::new();
    for &row in &config.matrix {
        let path = require(layout.run_report(row), "finetune")?;
        let report: RunReport =
            serde_json::from_str(&read(&path)?).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        reports.push(report);
    }
    let whole = CorpusStats::load(require(layout.corpus_stats(), "ingest")?)?;
    let baseline = if reports.iter().any(|r| r.pretraining_method != PretrainingMethod::None) {
        fill_ratios(&mut reports, whole.byte_size)?
    } else {
        None
    };
    let table = build_table(reports)?;
    table.check_consistency(0.0, 0.0, Some(whole.byte_size))?;
    table.save(layout.report_tsv(), layout.report_md())?;
    write(&layout.report_meta(), format!("time_ratio_baseline={}\n", baseline.unwrap_or_default()))?;
    Ok(table)
}

/// Human-readable execution plan of [`run_matrix`].
pub fn plan(config: &PipelineConfig) -> Vec<String> {
    let layout = config.layout();
    let mut steps = vec![format!("ingest {} -> {}", config.corpus.path.display(), layout.corpus().display())];
    if config.matrix.iter().any(|r| r.needs_summaries()) {
        steps.push(format!("summarize -> {}", layout.summaries().display()));
    }
    for source in keyword_sources(config) {
        steps.push(format!(
            "extract {source} (cut-off {}) -> {}",
            config.filter.threshold,
            layout.keyword_set(source).display()
        ));
    }
    for &row in &config.matrix {
        if row.method() != PretrainingMethod::None {
            let p = config.pretrain_config(row);
            steps.push(format!(
                "pretrain {row}: {:?} masking p={} on {} data, {} epochs, batch {}, {:?} lr {}",
                p.collator_mode,
                p.masking_probability.unwrap_or_default(),
                p.corpus_variant,
                p.epochs,
                p.batch_size,
                p.lr_schedule,
                p.base_lr
            ));
        }
        steps.push(format!("finetune {row} -> {}", layout.run_report(row).display()));
    }
    steps.push(format!("report -> {}", layout.report_tsv().display()));
    for (stage, seed) in config.seeds() {
        steps.push(format!("seed {stage} = {seed}"));
    }
    steps
}

fn keyword_sources(config: &PipelineConfig) -> Vec<KeywordSource> {
    let mut sources: Vec<KeywordSource> = config.matrix.iter().filter_map(|r| r.keyword_source()).collect();
    sources.sort_by_key(|s| s.as_str());
    sources.dedup();
    sources
}

/// Runs every stage the selected rows need, rows one after another so that
/// pretraining times are not distorted by contention.
pub fn run_matrix(config: &PipelineConfig) -> Result<ReportTable> {
    config.validate()?;
    for (stage, seed) in config.seeds() {
        log::info!("seed {stage} = {seed}");
    }
    run_ingest(config)?;
    if config.matrix.iter().any(|r| r.needs_summaries()) {
        run_summarize(config)?;
    }
    for source in keyword_sources(config) {
        let set = run_extract(config, source)?;
        if set.is_empty() {
            return Err(Error::Config(format!(
                "cut-off {} leaves no {source} keywords; lower filter.threshold",
                config.filter.threshold
            )));
        }
    }
    for &row in &config.matrix {
        if row.method() != PretrainingMethod::None {
            run_pretrain(config, row)?;
        }
        run_finetune(config, row)?;
    }
    run_report(config)
}
