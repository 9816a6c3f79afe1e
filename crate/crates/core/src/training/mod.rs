//! Continued MLM pretraining, classification fine-tuning and evaluation.

pub mod encoder;
pub mod metrics;
pub mod optim;
pub mod params;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusSplits, Document};
use crate::error::{Error, Result};
use crate::keyword_filter::KeywordSet;
use crate::masking::{
    collate, CollatedBatch, CollatorAudit, MaskingConfig, MaskingMode, SeededMaskingRng, TokenizedExample,
};
use crate::tokenizer::WordPieceTokenizer;

pub use encoder::{EncoderConfig, EncoderModel, Pooling, TinyEncoder};
pub use metrics::{accuracy, f1_score, F1Average};
pub use optim::AdamW;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay from `base_lr` to zero over all steps, no warmup.
    LinearDecay,
}

impl LrSchedule {
    /// Learning rate for the 0-based `step` out of `total_steps`.
    pub fn lr(self, base_lr: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base_lr,
            LrSchedule::LinearDecay => {
                if total_steps == 0 {
                    return base_lr;
                }
                base_lr * (total_steps.saturating_sub(step) as f64 / total_steps as f64)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusVariant {
    Whole,
    Summary,
}

impl CorpusVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            CorpusVariant::Whole => "whole",
            CorpusVariant::Summary => "summary",
        }
    }
}

impl fmt::Display for CorpusVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorpusVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole" => Ok(CorpusVariant::Whole),
            "summary" => Ok(CorpusVariant::Summary),
            other => Err(Error::InvalidArgument(format!("unknown corpus variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub collator_mode: MaskingMode,
    pub corpus_variant: CorpusVariant,
    pub seed: u64,
    /// Overrides the mode's default masking probability.
    pub masking_probability: Option<f64>,
    pub max_seq_len: usize,
    /// Permits a non-constant schedule in keyword mode.
    pub allow_schedule_override: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self::keyword(CorpusVariant::Summary, 0)
    }
}

impl PretrainConfig {
    pub fn keyword(corpus_variant: CorpusVariant, seed: u64) -> Self {
        Self {
            epochs: 2,
            batch_size: 16,
            lr_schedule: LrSchedule::Constant,
            base_lr: 5e-5,
            weight_decay: 0.0,
            collator_mode: MaskingMode::Keyword,
            corpus_variant,
            seed,
            masking_probability: None,
            max_seq_len: 128,
            allow_schedule_override: false,
        }
    }

    pub fn random(corpus_variant: CorpusVariant, seed: u64) -> Self {
        Self {
            lr_schedule: LrSchedule::LinearDecay,
            collator_mode: MaskingMode::Random,
            ..Self::keyword(corpus_variant, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.collator_mode == MaskingMode::Keyword
            && self.lr_schedule != LrSchedule::Constant
            && !self.allow_schedule_override
        {
            return Err(Error::Config(
                "keyword masking uses a constant schedule; set allow_schedule_override to change it".into(),
            ));
        }
        Ok(())
    }

    pub fn masking_config(&self, mask_token_id: u32, vocab_size: usize) -> MaskingConfig {
        let mut config = match self.collator_mode {
            MaskingMode::Keyword => MaskingConfig::keyword(mask_token_id, vocab_size, self.seed),
            MaskingMode::Random => MaskingConfig::random(mask_token_id, vocab_size, self.seed),
        };
        if let Some(p) = self.masking_probability {
            config.masking_probability = p;
        }
        config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub num_labels: usize,
    pub f1_average: F1Average,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 0.01,
            max_epochs: 4,
            batch_size: 8,
            lr_schedule: LrSchedule::LinearDecay,
            num_labels: 2,
            f1_average: F1Average::Macro,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if self.num_labels < 2 {
            return Err(Error::Config(format!("num_labels must be at least 2, got {}", self.num_labels)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedRun {
    pub checkpoint: Option<PathBuf>,
    /// Zero exactly when no pretraining happened.
    pub pretraining_minutes: f64,
    /// (optimizer step, mean masked-position loss of that batch)
    pub loss_curve: Vec<(usize, f64)>,
    pub epoch_losses: Vec<f64>,
    pub skipped_batches: usize,
    /// Sequence positions fed through the encoder.
    pub tokens_processed: usize,
    pub supervised_tokens: usize,
    pub audit: CollatorAudit,
    /// Hex SHA-256 over every collated batch in order.
    pub batch_digest: String,
    pub config: Option<PretrainConfig>,
}

impl TrainedRun {
    pub fn no_pretraining() -> Self {
        Self {
            checkpoint: None,
            pretraining_minutes: 0.0,
            loss_curve: Vec::new(),
            epoch_losses: Vec::new(),
            skipped_batches: 0,
            tokens_processed: 0,
            supervised_tokens: 0,
            audit: CollatorAudit::default(),
            batch_digest: String::new(),
            config: None,
        }
    }

    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (step, loss) in &self.loss_curve {
            out.push_str(&format!("{step},{loss}\n"));
        }
        out
    }
}

fn digest_batch(hasher: &mut Sha256, batch: &CollatedBatch) {
    for (ids, labels) in batch.input_ids.iter().zip(&batch.labels) {
        hasher.update((ids.len() as u64).to_le_bytes());
        for id in ids {
            hasher.update(id.to_le_bytes());
        }
        for label in labels {
            hasher.update(label.to_le_bytes());
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean masked-position loss of `batch`, or `None` when nothing is supervised.
pub fn mlm_batch_loss<M: EncoderModel>(model: &M, batch: &CollatedBatch, ignore_label: i64) -> Option<f64> {
    let (mut total, mut count) = (0.0, 0);
    for (ids, labels) in batch.input_ids.iter().zip(&batch.labels) {
        let (l, n) = model.mlm_loss(ids, labels, ignore_label, 1.0, None);
        total += l;
        count += n;
    }
    (count > 0).then(|| total / count as f64)
}

/// Tokenizes `texts` and runs [`pretrain_examples`]. Tokenization is not timed.
pub fn pretrain<M: EncoderModel>(
    model: &mut M,
    tokenizer: &WordPieceTokenizer,
    texts: &[&str],
    keywords: Option<&KeywordSet>,
    config: &PretrainConfig,
) -> Result<TrainedRun> {
    config.validate()?;
    let max_len = config.max_seq_len.min(model.max_positions());
    let examples: Vec<TokenizedExample> = texts.iter().map(|t| tokenizer.encode(t, max_len)).collect();
    pretrain_examples(model, &examples, keywords, config, tokenizer.special_ids().mask)
}

/// MLM pretraining for exactly `config.epochs` passes over `examples`.
pub fn pretrain_examples<M: EncoderModel>(
    model: &mut M,
    examples: &[TokenizedExample],
    keywords: Option<&KeywordSet>,
    config: &PretrainConfig,
    mask_token_id: u32,
) -> Result<TrainedRun> {
    config.validate()?;
    if config.collator_mode == MaskingMode::Keyword && keywords.is_none_or(KeywordSet::is_empty) {
        return Err(Error::Config("keyword pretraining needs a non-empty keyword set".into()));
    }
    if examples.is_empty() {
        return Err(Error::InvalidArgument("pretraining corpus is empty".into()));
    }
    if let Some(e) = examples.iter().find(|e| e.token_ids.len() > model.max_positions()) {
        return Err(Error::InvalidArgument(format!(
            "example of {} tokens exceeds the model's {} positions",
            e.token_ids.len(),
            model.max_positions()
        )));
    }
    let masking = config.masking_config(mask_token_id, model.vocab_size());
    masking.validate()?;

    let batches_per_epoch = examples.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let decay = model.decay_mask();
    let mut optimizer = AdamW::new(model.parameters().len(), config.weight_decay);
    let mut grads = vec![0.0; model.parameters().len()];
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mask_rng = SeededMaskingRng::new(config.seed.wrapping_add(1));
    let mut hasher = Sha256::new();
    let mut run = TrainedRun { config: Some(config.clone()), ..TrainedRun::no_pretraining() };

    let start = Instant::now();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut order_rng);
        let (mut epoch_loss, mut epoch_batches) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TokenizedExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let collated = collate(&batch, keywords, &masking, &mut mask_rng)?;
            digest_batch(&mut hasher, &collated);
            run.audit.add(&collated.audit);
            let lr = config.lr_schedule.lr(config.base_lr, step, total_steps);
            step += 1;

            let supervised = collated.supervised_positions(masking.ignore_label);
            if supervised == 0 {
                run.skipped_batches += 1;
                log::debug!("epoch {epoch}: skipping batch with no supervised positions");
                continue;
            }
            grads.fill(0.0);
            let scale = 1.0 / supervised as f64;
            let mut total = 0.0;
            for (ids, labels) in collated.input_ids.iter().zip(&collated.labels) {
                total += model.mlm_loss(ids, labels, masking.ignore_label, scale, Some(&mut grads)).0;
                run.tokens_processed += ids.len();
            }
            let loss = total / supervised as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite pretraining loss at step {step}")));
            }
            optimizer.step(model.parameters_mut(), &grads, &decay, lr);
            run.supervised_tokens += supervised;
            run.loss_curve.push((step, loss));
            epoch_loss += loss;
            epoch_batches += 1;
        }
        let mean = if epoch_batches == 0 { f64::NAN } else { epoch_loss / epoch_batches as f64 };
        log::info!("pretrain epoch {}: mean loss {mean:.4}", epoch + 1);
        run.epoch_losses.push(mean);
    }
    // Strictly positive so that "performed" and "not performed" never collide.
    run.pretraining_minutes = (start.elapsed().as_secs_f64() / 60.0).max(f64::MIN_POSITIVE);
    run.batch_digest = hex(&hasher.finalize());
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: EvalMetrics,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<M> {
    /// The checkpoint with the best validation F1.
    pub model: M,
    pub labels: Vec<String>,
    pub selected_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub validation: EvalMetrics,
    pub test: EvalMetrics,
}

impl<M> FinetuneOutcome<M> {
    /// Flat `key=value` lines.
    pub fn metrics_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("selected_epoch={}\n", self.selected_epoch));
        out.push_str(&format!("valid_acc={}\n", self.validation.accuracy));
        out.push_str(&format!("valid_f1={}\n", self.validation.f1));
        out.push_str(&format!("test_acc={}\n", self.test.accuracy));
        out.push_str(&format!("test_f1={}\n", self.test.f1));
        for e in &self.epochs {
            out.push_str(&format!(
                "epoch{}.train_loss={}\nepoch{}.valid_acc={}\nepoch{}.valid_f1={}\n",
                e.epoch, e.train_loss, e.epoch, e.validation.accuracy, e.epoch, e.validation.f1
            ));
        }
        out
    }
}

struct Encoded {
    ids: Vec<Vec<u32>>,
    labels: Vec<usize>,
}

fn encode_labeled(
    tokenizer: &WordPieceTokenizer,
    docs: &[Document],
    index: &BTreeMap<&str, usize>,
    max_len: usize,
) -> Result<Encoded> {
    let mut out = Encoded { ids: Vec::with_capacity(docs.len()), labels: Vec::with_capacity(docs.len()) };
    for doc in docs {
        let label = doc.label.as_deref().ok_or_else(|| Error::Data(format!("document {} has no label", doc.id)))?;
        let class = *index.get(label).ok_or_else(|| {
            Error::Data(format!("document {} has label {label:?} outside the trained label set", doc.id))
        })?;
        out.ids.push(tokenizer.encode(&doc.text, max_len).token_ids);
        out.labels.push(class);
    }
    Ok(out)
}

fn predict<M: EncoderModel>(model: &M, ids: &[Vec<u32>]) -> Vec<usize> {
    ids.iter()
        .map(|seq| {
            let logits = model.classifier_logits(seq);
            // First index wins ties.
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn score(y_true: &[usize], y_pred: &[usize], average: F1Average) -> Result<EvalMetrics> {
    Ok(EvalMetrics { accuracy: accuracy(y_true, y_pred)?, f1: f1_score(y_true, y_pred, average)? })
}

/// Accuracy and F1 of a classifier over labeled documents. `labels` maps
/// class indices to label names.
pub fn evaluate<M: EncoderModel>(
    model: &M,
    tokenizer: &WordPieceTokenizer,
    docs: &[Document],
    labels: &[String],
    max_seq_len: usize,
    average: F1Average,
) -> Result<EvalMetrics> {
    if docs.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty document list".into()));
    }
    if model.num_labels().is_none() {
        return Err(Error::State("model has no classification head".into()));
    }
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let data = encode_labeled(tokenizer, docs, &index, max_seq_len.min(model.max_positions()))?;
    score(&data.labels, &predict(model, &data.ids), average)
}

/// Fine-tunes a copy of `base` on `splits.train`, keeps the epoch with the
/// highest validation F1 (earliest on ties) and scores it once on test.
pub fn finetune<M: EncoderModel + Clone>(
    base: &M,
    tokenizer: &WordPieceTokenizer,
    splits: &CorpusSplits,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome<M>> {
    config.validate()?;
    if splits.train.is_empty() || splits.validation.is_empty() || splits.test.is_empty() {
        return Err(Error::Data("fine-tuning needs non-empty train, validation and test splits".into()));
    }
    if let Some(doc) = splits.train.iter().find(|d| d.label.is_none()) {
        return Err(Error::Data(format!("training document {} has no label", doc.id)));
    }
    let labels: Vec<String> = splits
        .train
        .iter()
        .filter_map(|d| d.label.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if labels.len() > config.num_labels {
        return Err(Error::Config(format!(
            "training data has {} labels but num_labels is {}",
            labels.len(),
            config.num_labels
        )));
    }
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let max_len = config.max_seq_len.min(base.max_positions());
    let train = encode_labeled(tokenizer, &splits.train, &index, max_len)?;
    let valid = encode_labeled(tokenizer, &splits.validation, &index, max_len)?;
    let test = encode_labeled(tokenizer, &splits.test, &index, max_len)?;

    let mut model = base.clone();
    model.attach_classifier(config.num_labels, config.seed);
    let decay = model.decay_mask();
    let mut optimizer = AdamW::new(model.parameters().len(), config.weight_decay);
    let mut grads = vec![0.0; model.parameters().len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let total_steps = train.ids.len().div_ceil(config.batch_size) * config.max_epochs;

    let mut best: Option<(f64, usize, M, EvalMetrics)> = None;
    let mut records = Vec::new();
    let mut step = 0;
    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train.ids.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            grads.fill(0.0);
            let scale = 1.0 / chunk.len() as f64;
            let mut total = 0.0;
            for &i in chunk {
                total += model.classifier_loss(&train.ids[i], train.labels[i], scale, Some(&mut grads));
            }
            let loss = total / chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite fine-tuning loss in epoch {epoch}")));
            }
            let lr = config.lr_schedule.lr(config.lr, step, total_steps);
            optimizer.step(model.parameters_mut(), &grads, &decay, lr);
            step += 1;
            epoch_loss += loss * chunk.len() as f64;
        }
        let validation = score(&valid.labels, &predict(&model, &valid.ids), config.f1_average)?;
        let train_loss = epoch_loss / train.ids.len() as f64;
        log::info!(
            "finetune epoch {epoch}: train loss {train_loss:.4}, valid acc {:.4}, valid f1 {:.4}",
            validation.accuracy,
            validation.f1
        );
        records.push(EpochRecord { epoch, train_loss, validation });
        if best.as_ref().is_none_or(|(f1, ..)| validation.f1 > *f1) {
            best = Some((validation.f1, epoch, model.clone(), validation));
        }
    }
    let (_, selected_epoch, model, validation) = best.expect("at least one epoch ran");
    let test = score(&test.labels, &predict(&model, &test.ids), config.f1_average)?;
    Ok(FinetuneOutcome { model, labels, selected_epoch, epochs: records, validation, test })
}
