#ifndef COMPACT_PRETRAIN_H
#define COMPACT_PRETRAIN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Label written at positions that carry no MLM target.
#define CPT_IGNORE_LABEL -100

typedef enum CptStatus {
  CPT_STATUS_OK = 0,
  CPT_STATUS_NULL_POINTER = 1,
  CPT_STATUS_INVALID_UTF8 = 2,
  CPT_STATUS_INVALID_ARGUMENT = 3,
  CPT_STATUS_IO = 4,
  CPT_STATUS_PARSE = 5,
  CPT_STATUS_CONFIG = 6,
  CPT_STATUS_INTEGRITY = 7,
  CPT_STATUS_NUMERIC = 8,
  // The output buffer is too small; the required length was written.
  CPT_STATUS_BUFFER_TOO_SMALL = 9,
  CPT_STATUS_PANIC = 10,
} CptStatus;

typedef enum CptMaskingMode {
  // Whole-word masking restricted to keyword words, p = 0.75 by default.
  CPT_MASKING_MODE_KEYWORD = 0,
  // Token-level masking over all non-special positions, p = 0.15 by default.
  CPT_MASKING_MODE_RANDOM = 1,
} CptMaskingMode;

typedef struct CptCollator CptCollator;

typedef struct CptKeywordSet CptKeywordSet;

typedef struct CptTokenizer CptTokenizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cpt_version(void);

// Message of the last failed call on this thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *cpt_last_error(void);

// Loads a WordPiece vocabulary, one token per line.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CptStatus cpt_tokenizer_from_vocab_file(const char *path, struct CptTokenizer **out);

// Builds a tokenizer from `n` tokens; ids follow array order.
//
// # Safety
// `tokens` must point to `n` NUL-terminated strings and `out` must be valid.
enum CptStatus cpt_tokenizer_from_tokens(const char *const *tokens,
                                         size_t n,
                                         struct CptTokenizer **out);

// Vocabulary size, or 0 for NULL.
//
// # Safety
// `tokenizer` must be NULL or a live handle.
size_t cpt_tokenizer_vocab_size(const struct CptTokenizer *tokenizer);

// Number of word-piece tokens in `text`, without special tokens.
//
// # Safety
// `tokenizer` must be a live handle, `text` NUL-terminated, `out` valid.
enum CptStatus cpt_tokenizer_count_tokens(const struct CptTokenizer *tokenizer,
                                          const char *text,
                                          size_t *out);

// # Safety
// `tokenizer` must be NULL or a handle not yet freed.
void cpt_tokenizer_free(struct CptTokenizer *tokenizer);

// Keyword set from `n` words. Words are lowercased.
//
// # Safety
// `words` must point to `n` NUL-terminated strings and `out` must be valid.
enum CptStatus cpt_keyword_set_new(const char *const *words, size_t n, struct CptKeywordSet **out);

// Loads a `keyword_set.txt` written by the pipeline.
//
// # Safety
// `path` must be NUL-terminated and `out` valid.
enum CptStatus cpt_keyword_set_load(const char *path, struct CptKeywordSet **out);

// Number of words, or 0 for NULL.
//
// # Safety
// `set` must be NULL or a live handle.
size_t cpt_keyword_set_len(const struct CptKeywordSet *set);

// Case-insensitive membership test. False for NULL or non-UTF-8 input.
//
// # Safety
// `set` must be NULL or a live handle and `word` NULL or NUL-terminated.
bool cpt_keyword_set_contains(const struct CptKeywordSet *set, const char *word);

// # Safety
// `set` must be NULL or a handle not yet freed.
void cpt_keyword_set_free(struct CptKeywordSet *set);

// Seeded collator. A negative `probability` selects the mode's default.
// The collator keeps its own copy of the tokenizer.
//
// # Safety
// `tokenizer` must be a live handle and `out` valid.
enum CptStatus cpt_collator_new(const struct CptTokenizer *tokenizer,
                                enum CptMaskingMode mode,
                                double probability,
                                uint64_t seed,
                                struct CptCollator **out);

// Encodes `text` to at most `max_len` positions and masks it. Writes
// input ids and labels (original id or `CPT_IGNORE_LABEL`) and their
// length. When `capacity` is too small nothing is consumed from the
// random stream, `*out_len` receives the required length and
// `CPT_STATUS_BUFFER_TOO_SMALL` is returned. `keywords` may be NULL in
// random mode.
//
// # Safety
// `collator` must be a live handle, `text` NUL-terminated, `out_ids` and
// `out_labels` valid for `capacity` elements and `out_len` valid.
enum CptStatus cpt_collator_collate_text(struct CptCollator *collator,
                                         const struct CptKeywordSet *keywords,
                                         const char *text,
                                         size_t max_len,
                                         uint32_t *out_ids,
                                         int64_t *out_labels,
                                         size_t capacity,
                                         size_t *out_len);

// # Safety
// `collator` must be NULL or a handle not yet freed.
void cpt_collator_free(struct CptCollator *collator);

// Greedy MMR over `n` candidates. `vectors` holds `n * dim` values row by
// row and `words` the candidate strings used for tie-breaking. Writes up to
// `min(k, n)` candidate indices and their similarity to the document.
//
// # Safety
// `doc` must hold `dim` values, `vectors` `n * dim`, `words` `n` strings,
// `out_indices` and `out_relevance` `min(k, n)` slots, `out_len` one.
enum CptStatus cpt_mmr_select(const double *doc,
                              size_t dim,
                              const double *vectors,
                              const char *const *words,
                              size_t n,
                              size_t k,
                              double diversity,
                              size_t *out_indices,
                              double *out_relevance,
                              size_t *out_len);

// Summary bytes over original bytes.
//
// # Safety
// `out` must be valid.
enum CptStatus cpt_compaction_ratio(uint64_t original_bytes, uint64_t summary_bytes, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMPACT_PRETRAIN_H */
