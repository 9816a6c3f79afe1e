//! C ABI over the parts of `compact-pretrain` that other runtimes need to
//! share byte-for-byte: the tokenizer, keyword sets, the two masking
//! collators and MMR keyword selection.
//!
//! Every fallible call returns a [`CptStatus`]. On failure the message is
//! kept per thread and can be read with [`cpt_last_error`]. Handles are
//! opaque and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use compact_pretrain::corpus::CorpusStats;
use compact_pretrain::keyword_extraction::mmr_select;
use compact_pretrain::keyword_filter::{KeywordSet, KeywordSource};
use compact_pretrain::masking::{collate, MaskingConfig, SeededMaskingRng, DEFAULT_IGNORE_LABEL};
use compact_pretrain::summarizer::compaction_ratio;
use compact_pretrain::tokenizer::WordPieceTokenizer;
use compact_pretrain::Error;

/// Label written at positions that carry no MLM target.
pub const CPT_IGNORE_LABEL: i64 = -100;

const _: () = assert!(CPT_IGNORE_LABEL == DEFAULT_IGNORE_LABEL);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Config = 6,
    Integrity = 7,
    Numeric = 8,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CptMaskingMode {
    /// Whole-word masking restricted to keyword words, p = 0.75 by default.
    Keyword = 0,
    /// Token-level masking over all non-special positions, p = 0.15 by default.
    Random = 1,
}

pub struct CptTokenizer(WordPieceTokenizer);

pub struct CptKeywordSet(KeywordSet);

pub struct CptCollator {
    tokenizer: WordPieceTokenizer,
    config: MaskingConfig,
    rng: SeededMaskingRng,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CptStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::MissingArtifact { .. } => CptStatus::Io,
            Error::Parse { .. } => CptStatus::Parse,
            Error::Integrity(_) | Error::Data(_) => CptStatus::Integrity,
            Error::Config(_) | Error::State(_) => CptStatus::Config,
            Error::Numeric(_) => CptStatus::Numeric,
            Error::InvalidArgument(_) | Error::Backend { .. } => CptStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

fn run(f: impl FnOnce() -> Result<(), Failure>) -> CptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CptStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("panic inside compact-pretrain".into());
            CptStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CptStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(CptStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn as_strings(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<String>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts(p, n).iter().map(|&s| as_str(s, what).map(str::to_owned)).collect()
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cpt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cpt_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Loads a WordPiece vocabulary, one token per line.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cpt_tokenizer_from_vocab_file(path: *const c_char, out: *mut *mut CptTokenizer) -> CptStatus {
    run(|| {
        let path = as_str(path, "path")?;
        let tokenizer = WordPieceTokenizer::from_vocab_file(path)?;
        write_out(out, Box::into_raw(Box::new(CptTokenizer(tokenizer))), "out")
    })
}

/// Builds a tokenizer from `n` tokens; ids follow array order.
///
/// # Safety
/// `tokens` must point to `n` NUL-terminated strings and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cpt_tokenizer_from_tokens(
    tokens: *const *const c_char,
    n: usize,
    out: *mut *mut CptTokenizer,
) -> CptStatus {
    run(|| {
        let tokens = as_strings(tokens, n, "tokens")?;
        let tokenizer = WordPieceTokenizer::from_tokens(tokens)?;
        write_out(out, Box::into_raw(Box::new(CptTokenizer(tokenizer))), "out")
    })
}

/// Vocabulary size, or 0 for NULL.
///
/// # Safety
/// `tokenizer` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cpt_tokenizer_vocab_size(tokenizer: *const CptTokenizer) -> usize {
    tokenizer.as_ref().map_or(0, |t| t.0.vocab_size())
}

/// Number of word-piece tokens in `text`, without special tokens.
///
/// # Safety
/// `tokenizer` must be a live handle, `text` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cpt_tokenizer_count_tokens(
    tokenizer: *const CptTokenizer,
    text: *const c_char,
    out: *mut usize,
) -> CptStatus {
    run(|| {
        let tokenizer = as_ref(tokenizer, "tokenizer")?;
        let text = as_str(text, "text")?;
        write_out(out, tokenizer.0.count_tokens(text), "out")
    })
}

/// # Safety
/// `tokenizer` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cpt_tokenizer_free(tokenizer: *mut CptTokenizer) {
    if !tokenizer.is_null() {
        drop(Box::from_raw(tokenizer));
    }
}

/// Keyword set from `n` words. Words are lowercased.
///
/// # Safety
/// `words` must point to `n` NUL-terminated strings and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cpt_keyword_set_new(
    words: *const *const c_char,
    n: usize,
    out: *mut *mut CptKeywordSet,
) -> CptStatus {
    run(|| {
        let words = as_strings(words, n, "words")?.into_iter().map(|w| w.to_lowercase());
        let set = KeywordSet::new(words, 1, KeywordSource::Summaries);
        write_out(out, Box::into_raw(Box::new(CptKeywordSet(set))), "out")
    })
}

/// Loads a `keyword_set.txt` written by the pipeline.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cpt_keyword_set_load(path: *const c_char, out: *mut *mut CptKeywordSet) -> CptStatus {
    run(|| {
        let set = KeywordSet::load(as_str(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(CptKeywordSet(set))), "out")
    })
}

/// Number of words, or 0 for NULL.
///
/// # Safety
/// `set` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cpt_keyword_set_len(set: *const CptKeywordSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// Case-insensitive membership test. False for NULL or non-UTF-8 input.
///
/// # Safety
/// `set` must be NULL or a live handle and `word` NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cpt_keyword_set_contains(set: *const CptKeywordSet, word: *const c_char) -> bool {
    match (set.as_ref(), as_str(word, "word")) {
        (Some(set), Ok(word)) => set.0.contains(word),
        _ => false,
    }
}

/// # Safety
/// `set` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cpt_keyword_set_free(set: *mut CptKeywordSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Seeded collator. A negative `probability` selects the mode's default.
/// The collator keeps its own copy of the tokenizer.
///
/// # Safety
/// `tokenizer` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cpt_collator_new(
    tokenizer: *const CptTokenizer,
    mode: CptMaskingMode,
    probability: f64,
    seed: u64,
    out: *mut *mut CptCollator,
) -> CptStatus {
    run(|| {
        let tokenizer = as_ref(tokenizer, "tokenizer")?.0.clone();
        let (mask, vocab) = (tokenizer.special_ids().mask, tokenizer.vocab_size());
        let mut config = match mode {
            CptMaskingMode::Keyword => MaskingConfig::keyword(mask, vocab, seed),
            CptMaskingMode::Random => MaskingConfig::random(mask, vocab, seed),
        };
        if probability >= 0.0 {
            config.masking_probability = probability;
        }
        config.validate()?;
        let collator = CptCollator { tokenizer, config, rng: SeededMaskingRng::new(seed) };
        write_out(out, Box::into_raw(Box::new(collator)), "out")
    })
}

/// Encodes `text` to at most `max_len` positions and masks it. Writes
/// input ids and labels (original id or `CPT_IGNORE_LABEL`) and their
/// length. When `capacity` is too small nothing is consumed from the
/// random stream, `*out_len` receives the required length and
/// `CPT_STATUS_BUFFER_TOO_SMALL` is returned. `keywords` may be NULL in
/// random mode.
///
/// # Safety
/// `collator` must be a live handle, `text` NUL-terminated, `out_ids` and
/// `out_labels` valid for `capacity` elements and `out_len` valid.
#[no_mangle]
pub unsafe extern "C" fn cpt_collator_collate_text(
    collator: *mut CptCollator,
    keywords: *const CptKeywordSet,
    text: *const c_char,
    max_len: usize,
    out_ids: *mut u32,
    out_labels: *mut i64,
    capacity: usize,
    out_len: *mut usize,
) -> CptStatus {
    run(|| {
        let collator = collator.as_mut().ok_or_else(|| null("collator"))?;
        let text = as_str(text, "text")?;
        if max_len < 2 {
            return Err(Failure(CptStatus::InvalidArgument, "max_len must be at least 2".into()));
        }
        let example = collator.tokenizer.encode(text, max_len);
        let len = example.token_ids.len();
        write_out(out_len, len, "out_len")?;
        if capacity < len {
            return Err(Failure(CptStatus::BufferTooSmall, format!("need {len} slots, got {capacity}")));
        }
        if out_ids.is_null() || out_labels.is_null() {
            return Err(null("output buffer"));
        }
        let keywords = keywords.as_ref().map(|k| &k.0);
        let batch = collate(std::slice::from_ref(&example), keywords, &collator.config, &mut collator.rng)?;
        let ids = std::slice::from_raw_parts_mut(out_ids, len);
        let labels = std::slice::from_raw_parts_mut(out_labels, len);
        ids.copy_from_slice(&batch.input_ids[0]);
        labels.copy_from_slice(&batch.labels[0]);
        Ok(())
    })
}

/// # Safety
/// `collator` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cpt_collator_free(collator: *mut CptCollator) {
    if !collator.is_null() {
        drop(Box::from_raw(collator));
    }
}

/// Greedy MMR over `n` candidates. `vectors` holds `n * dim` values row by
/// row and `words` the candidate strings used for tie-breaking. Writes up to
/// `min(k, n)` candidate indices and their similarity to the document.
///
/// # Safety
/// `doc` must hold `dim` values, `vectors` `n * dim`, `words` `n` strings,
/// `out_indices` and `out_relevance` `min(k, n)` slots, `out_len` one.
#[no_mangle]
pub unsafe extern "C" fn cpt_mmr_select(
    doc: *const f64,
    dim: usize,
    vectors: *const f64,
    words: *const *const c_char,
    n: usize,
    k: usize,
    diversity: f64,
    out_indices: *mut usize,
    out_relevance: *mut f64,
    out_len: *mut usize,
) -> CptStatus {
    run(|| {
        if doc.is_null() || (n > 0 && vectors.is_null()) {
            return Err(null("vector input"));
        }
        let doc = std::slice::from_raw_parts(doc, dim);
        let names = as_strings(words, n, "words")?;
        let flat = if n == 0 { &[][..] } else { std::slice::from_raw_parts(vectors, n * dim) };
        let candidates: Vec<(String, Vec<f64>)> =
            names.iter().cloned().zip(flat.chunks(dim.max(1)).map(<[f64]>::to_vec)).collect();
        let picked = mmr_select(doc, &candidates, k, diversity)?;
        write_out(out_len, picked.len(), "out_len")?;
        if picked.is_empty() {
            return Ok(());
        }
        if out_indices.is_null() || out_relevance.is_null() {
            return Err(null("output buffer"));
        }
        for (slot, (word, relevance)) in picked.iter().enumerate() {
            let index = names.iter().position(|w| w == word).expect("picked from candidates");
            out_indices.add(slot).write(index);
            out_relevance.add(slot).write(*relevance);
        }
        Ok(())
    })
}

/// Summary bytes over original bytes.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cpt_compaction_ratio(original_bytes: u64, summary_bytes: u64, out: *mut f64) -> CptStatus {
    run(|| {
        let stats = |b| CorpusStats { byte_size: b, ..Default::default() };
        let ratio = compaction_ratio(&stats(original_bytes), &stats(summary_bytes))?;
        write_out(out, ratio, "out")
    })
}
