//! Masked-language-modeling collators.
//!
//! [`collate_keyword`] only ever touches words from a keyword whitelist and
//! treats all subword pieces of a word as one unit. [`collate_random`] is the
//! usual token-level baseline. Both apply the 80/10/10 mask/replace/keep rule
//! to whatever they select; keyword mode draws that action once per word.

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyword_filter::KeywordSet;

pub const DEFAULT_IGNORE_LABEL: i64 = -100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub token_ids: Vec<u32>,
    /// Half-open token ranges, one per source word.
    pub word_spans: Vec<(usize, usize)>,
    /// Lowercased source words aligned with `word_spans`.
    pub word_texts: Vec<String>,
    /// Delimiters and padding.
    pub special_positions: BTreeSet<usize>,
}

impl TokenizedExample {
    pub fn validate(&self) -> Result<()> {
        if self.word_spans.len() != self.word_texts.len() {
            return Err(Error::InvalidArgument(format!(
                "{} word spans but {} word texts",
                self.word_spans.len(),
                self.word_texts.len()
            )));
        }
        let mut prev_end = 0;
        for &(start, end) in &self.word_spans {
            if start >= end || start < prev_end || end > self.token_ids.len() {
                return Err(Error::InvalidArgument(format!("bad word span ({start}, {end})")));
            }
            if self.special_positions.range(start..end).next().is_some() {
                return Err(Error::InvalidArgument(format!("word span ({start}, {end}) covers a special position")));
            }
            prev_end = end;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    Keyword,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub mode: MaskingMode,
    pub masking_probability: f64,
    pub mask_token_id: u32,
    pub vocab_size: usize,
    pub ignore_label: i64,
    pub seed: u64,
}

impl MaskingConfig {
    pub const KEYWORD_PROBABILITY: f64 = 0.75;
    pub const RANDOM_PROBABILITY: f64 = 0.15;

    pub fn keyword(mask_token_id: u32, vocab_size: usize, seed: u64) -> Self {
        Self {
            mode: MaskingMode::Keyword,
            masking_probability: Self::KEYWORD_PROBABILITY,
            mask_token_id,
            vocab_size,
            ignore_label: DEFAULT_IGNORE_LABEL,
            seed,
        }
    }

    pub fn random(mask_token_id: u32, vocab_size: usize, seed: u64) -> Self {
        Self {
            mode: MaskingMode::Random,
            masking_probability: Self::RANDOM_PROBABILITY,
            ..Self::keyword(mask_token_id, vocab_size, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.masking_probability > 0.0 && self.masking_probability <= 1.0) {
            return Err(Error::Config(format!("masking probability {} outside (0, 1]", self.masking_probability)));
        }
        if self.vocab_size == 0 || self.mask_token_id as usize >= self.vocab_size {
            return Err(Error::Config(format!(
                "mask token {} outside vocabulary of size {}",
                self.mask_token_id, self.vocab_size
            )));
        }
        if self.ignore_label >= 0 && (self.ignore_label as u64) < self.vocab_size as u64 {
            return Err(Error::Config(format!("ignore label {} is a valid token id", self.ignore_label)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Replace,
    Keep,
}

/// Source of the collators' random decisions.
pub trait MaskingRng {
    fn select(&mut self, probability: f64) -> bool;
    fn action(&mut self) -> MaskAction;
    fn replacement(&mut self, vocab_size: usize) -> u32;
}

#[derive(Debug, Clone)]
pub struct SeededMaskingRng(ChaCha8Rng);

impl SeededMaskingRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream for collation worker `worker`: seed + worker.
    pub fn for_worker(seed: u64, worker: u64) -> Self {
        Self::new(seed.wrapping_add(worker))
    }
}

impl MaskingRng for SeededMaskingRng {
    fn select(&mut self, probability: f64) -> bool {
        self.0.gen::<f64>() < probability
    }

    fn action(&mut self) -> MaskAction {
        let u: f64 = self.0.gen();
        if u < 0.8 {
            MaskAction::Mask
        } else if u < 0.9 {
            MaskAction::Replace
        } else {
            MaskAction::Keep
        }
    }

    fn replacement(&mut self, vocab_size: usize) -> u32 {
        self.0.gen_range(0..vocab_size as u32)
    }
}

/// Per-batch counters. Units are words in keyword mode and tokens in random
/// mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollatorAudit {
    pub candidates: usize,
    pub selected: usize,
    pub masked: usize,
    pub replaced: usize,
    pub kept: usize,
}

impl CollatorAudit {
    pub fn add(&mut self, other: &CollatorAudit) {
        self.candidates += other.candidates;
        self.selected += other.selected;
        self.masked += other.masked;
        self.replaced += other.replaced;
        self.kept += other.kept;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CollatedBatch {
    pub input_ids: Vec<Vec<u32>>,
    /// Original token id at selected positions, the ignore label elsewhere.
    pub labels: Vec<Vec<i64>>,
    pub audit: CollatorAudit,
}

impl CollatedBatch {
    pub fn supervised_positions(&self, ignore_label: i64) -> usize {
        self.labels.iter().flatten().filter(|&&l| l != ignore_label).count()
    }
}

fn apply_action(
    action: MaskAction,
    positions: std::ops::Range<usize>,
    ids: &mut [u32],
    config: &MaskingConfig,
    rng: &mut impl MaskingRng,
    audit: &mut CollatorAudit,
) {
    match action {
        MaskAction::Mask => {
            audit.masked += 1;
            ids[positions].fill(config.mask_token_id);
        }
        MaskAction::Replace => {
            audit.replaced += 1;
            for id in &mut ids[positions] {
                *id = rng.replacement(config.vocab_size);
            }
        }
        MaskAction::Keep => audit.kept += 1,
    }
}

fn check_ids(example: &TokenizedExample, vocab_size: usize) -> Result<()> {
    example.validate()?;
    match example.token_ids.iter().find(|&&id| id as usize >= vocab_size) {
        Some(id) => Err(Error::InvalidArgument(format!("token id {id} outside vocabulary of size {vocab_size}"))),
        None => Ok(()),
    }
}

/// Whole-word keyword masking. Only words found in `keywords` can be
/// selected; everything else is returned untouched with the ignore label.
pub fn collate_keyword(
    batch: &[TokenizedExample],
    keywords: &KeywordSet,
    config: &MaskingConfig,
    rng: &mut impl MaskingRng,
) -> Result<CollatedBatch> {
    if config.mode != MaskingMode::Keyword {
        return Err(Error::Config(format!("keyword collator called with mode {:?}", config.mode)));
    }
    config.validate()?;
    let mut out = CollatedBatch::default();
    for example in batch {
        check_ids(example, config.vocab_size)?;
        let mut ids = example.token_ids.clone();
        let mut labels = vec![config.ignore_label; ids.len()];
        for (&(start, end), word) in example.word_spans.iter().zip(&example.word_texts) {
            if !keywords.contains(word) {
                continue;
            }
            out.audit.candidates += 1;
            if !rng.select(config.masking_probability) {
                continue;
            }
            out.audit.selected += 1;
            for (label, &id) in labels[start..end].iter_mut().zip(&example.token_ids[start..end]) {
                *label = i64::from(id);
            }
            let action = rng.action();
            apply_action(action, start..end, &mut ids, config, rng, &mut out.audit);
        }
        out.input_ids.push(ids);
        out.labels.push(labels);
    }
    Ok(out)
}

/// Token-level random masking over all non-special positions.
pub fn collate_random(
    batch: &[TokenizedExample],
    config: &MaskingConfig,
    rng: &mut impl MaskingRng,
) -> Result<CollatedBatch> {
    if config.mode != MaskingMode::Random {
        return Err(Error::Config(format!("random collator called with mode {:?}", config.mode)));
    }
    config.validate()?;
    let mut out = CollatedBatch::default();
    for example in batch {
        check_ids(example, config.vocab_size)?;
        let mut ids = example.token_ids.clone();
        let mut labels = vec![config.ignore_label; ids.len()];
        for (pos, label) in labels.iter_mut().enumerate() {
            if example.special_positions.contains(&pos) {
                continue;
            }
            out.audit.candidates += 1;
            if !rng.select(config.masking_probability) {
                continue;
            }
            out.audit.selected += 1;
            *label = i64::from(example.token_ids[pos]);
            let action = rng.action();
            apply_action(action, pos..pos + 1, &mut ids, config, rng, &mut out.audit);
        }
        out.input_ids.push(ids);
        out.labels.push(labels);
    }
    Ok(out)
}

/// Dispatches on `config.mode`. `keywords` is required in keyword mode.
pub fn collate(
    batch: &[TokenizedExample],
    keywords: Option<&KeywordSet>,
    config: &MaskingConfig,
    rng: &mut impl MaskingRng,
) -> Result<CollatedBatch> {
    match config.mode {
        MaskingMode::Keyword => {
            let keywords = keywords.ok_or_else(|| Error::Config("keyword masking requires a keyword set".into()))?;
            collate_keyword(batch, keywords, config, rng)
        }
        MaskingMode::Random => collate_random(batch, config, rng),
    }
}

/// Share of non-special tokens that sit inside keyword words.
pub fn masking_coverage(batch: &[TokenizedExample], keywords: &KeywordSet) -> f64 {
    let mut covered = 0usize;
    let mut total = 0usize;
    for example in batch {
        total += example.token_ids.len() - example.special_positions.len();
        covered += example
            .word_spans
            .iter()
            .zip(&example.word_texts)
            .filter(|(_, w)| keywords.contains(w))
            .map(|(&(s, e), _)| e - s)
            .sum::<usize>();
    }
    if total == 0 {
        0.0
    } else {
        covered as f64 / total as f64
    }
}

/// CSV sink for per-batch collator counters.
pub struct AuditLog<W: Write> {
    writer: W,
    batches: usize,
}

impl<W: Write> AuditLog<W> {
    pub fn new(mut writer: W) -> std::io::Result<Self> {
        writeln!(writer, "batch,candidates,selected,masked,replaced,kept")?;
        Ok(Self { writer, batches: 0 })
    }

    pub fn record(&mut self, audit: &CollatorAudit) -> std::io::Result<()> {
        writeln!(
            self.writer,
            "{},{},{},{},{},{}",
            self.batches, audit.candidates, audit.selected, audit.masked, audit.replaced, audit.kept
        )?;
        self.batches += 1;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyword_filter::KeywordSource;

    struct Forced {
        select: bool,
        action: MaskAction,
        replacement: u32,
    }

    impl MaskingRng for Forced {
        fn select(&mut self, _: f64) -> bool {
            self.select
        }
        fn action(&mut self) -> MaskAction {
            self.action
        }
        fn replacement(&mut self, _: usize) -> u32 {
            self.replacement
        }
    }

    fn example() -> TokenizedExample {
        // [CLS] vac ##cine works [SEP]
        TokenizedExample {
            token_ids: vec![2, 10, 11, 12, 3],
            word_spans: vec![(1, 3), (3, 4)],
            word_texts: vec!["vaccine".into(), "works".into()],
            special_positions: BTreeSet::from([0, 4]),
        }
    }

    fn keywords(words: &[&str]) -> KeywordSet {
        KeywordSet::new(words.iter().map(|w| w.to_string()), 1, KeywordSource::Summaries)
    }

    #[test]
    fn no_keywords_is_identity() {
        let config = MaskingConfig::keyword(4, 20, 0);
        let out = collate_keyword(&[example()], &keywords(&[]), &config, &mut SeededMaskingRng::new(1)).unwrap();
        assert_eq!(out.input_ids[0], example().token_ids);
        assert!(out.labels[0].iter().all(|&l| l == DEFAULT_IGNORE_LABEL));
    }

    #[test]
    fn forced_mask_covers_whole_word() {
        let config = MaskingConfig::keyword(4, 20, 0);
        let mut rng = Forced { select: true, action: MaskAction::Mask, replacement: 0 };
        let out = collate_keyword(&[example()], &keywords(&["vaccine"]), &config, &mut rng).unwrap();
        assert_eq!(out.input_ids[0], [2, 4, 4, 12, 3]);
        assert_eq!(out.labels[0], [-100, 10, 11, -100, -100]);
        assert_eq!(out.audit, CollatorAudit { candidates: 1, selected: 1, masked: 1, replaced: 0, kept: 0 });
    }

    #[test]
    fn forced_keep_still_supervises() {
        let config = MaskingConfig::keyword(4, 20, 0);
        let mut rng = Forced { select: true, action: MaskAction::Keep, replacement: 0 };
        let out = collate_keyword(&[example()], &keywords(&["works"]), &config, &mut rng).unwrap();
        assert_eq!(out.input_ids[0], example().token_ids);
        assert_eq!(out.labels[0], [-100, -100, -100, 12, -100]);
    }

    #[test]
    fn forced_random_select_replace() {
        let config = MaskingConfig::random(4, 20, 0);
        let one = TokenizedExample {
            token_ids: vec![7],
            word_spans: vec![(0, 1)],
            word_texts: vec!["x".into()],
            special_positions: BTreeSet::new(),
        };
        let mut rng = Forced { select: true, action: MaskAction::Replace, replacement: 19 };
        let out = collate_random(&[one], &config, &mut rng).unwrap();
        assert_eq!(out.input_ids[0], [19]);
        assert_eq!(out.labels[0], [7]);
    }

    #[test]
    fn random_never_selects_specials() {
        let config = MaskingConfig::random(4, 20, 0);
        let mut rng = Forced { select: true, action: MaskAction::Mask, replacement: 0 };
        let out = collate_random(&[example()], &config, &mut rng).unwrap();
        assert_eq!(out.input_ids[0], [2, 4, 4, 4, 3]);
        assert_eq!(out.labels[0][0], -100);
        assert_eq!(out.labels[0][4], -100);
        let mut none = Forced { select: false, action: MaskAction::Mask, replacement: 0 };
        let out = collate_random(&[example()], &config, &mut none).unwrap();
        assert_eq!(out.input_ids[0], example().token_ids);
        assert_eq!(out.supervised_positions(-100), 0);
    }

    #[test]
    fn mode_mismatch_and_bad_config() {
        let mut rng = SeededMaskingRng::new(0);
        let random = MaskingConfig::random(4, 20, 0);
        assert!(matches!(collate_keyword(&[], &keywords(&[]), &random, &mut rng), Err(Error::Config(_))));
        let mut zero = MaskingConfig::keyword(4, 20, 0);
        zero.masking_probability = 0.0;
        assert!(zero.validate().is_err());
        assert!(MaskingConfig::keyword(20, 20, 0).validate().is_err());
        let mut clash = MaskingConfig::keyword(4, 20, 0);
        clash.ignore_label = 3;
        assert!(clash.validate().is_err());
        assert!(collate(&[], None, &MaskingConfig::keyword(4, 20, 0), &mut rng).is_err());
    }

    #[test]
    fn empty_batch_is_empty_output() {
        let config = MaskingConfig::keyword(4, 20, 0);
        let out = collate_keyword(&[], &keywords(&["a"]), &config, &mut SeededMaskingRng::new(0)).unwrap();
        assert!(out.input_ids.is_empty());
    }

    #[test]
    fn coverage_edges() {
        assert_eq!(masking_coverage(&[example()], &keywords(&[])), 0.0);
        assert_eq!(masking_coverage(&[example()], &keywords(&["vaccine", "works"])), 1.0);
        assert!((masking_coverage(&[example()], &keywords(&["vaccine"])) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(masking_coverage(&[], &keywords(&["a"])), 0.0);
    }

    #[test]
    fn seeded_collation_is_deterministic() {
        let config = MaskingConfig::keyword(4, 20, 0);
        let batch = vec![example(); 30];
        let kw = keywords(&["vaccine", "works"]);
        let a = collate_keyword(&batch, &kw, &config, &mut SeededMaskingRng::new(9)).unwrap();
        let b = collate_keyword(&batch, &kw, &config, &mut SeededMaskingRng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn audit_csv() {
        let mut log = AuditLog::new(Vec::new()).unwrap();
        log.record(&CollatorAudit { candidates: 3, selected: 2, masked: 1, replaced: 1, kept: 0 }).unwrap();
        let text = String::from_utf8(log.into_inner()).unwrap();
        assert_eq!(text, "batch,candidates,selected,masked,replaced,kept\n0,3,2,1,1,0\n");
    }
}
