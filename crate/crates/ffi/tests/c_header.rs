//! Compiles and runs a small C program against the generated header and
//! the static library. Skipped when no C compiler is on PATH.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "compact_pretrain.h"

int main(void) {
    const char *tokens[] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "alpha", "beta"};
    CptTokenizer *tok = NULL;
    if (cpt_tokenizer_from_tokens(tokens, 7, &tok) != CPT_STATUS_OK) return 1;
    const char *words[] = {"beta"};
    CptKeywordSet *set = NULL;
    if (cpt_keyword_set_new(words, 1, &set) != CPT_STATUS_OK) return 2;
    CptCollator *col = NULL;
    if (cpt_collator_new(tok, CPT_MASKING_MODE_KEYWORD, 1.0, 3, &col) != CPT_STATUS_OK) return 3;
    uint32_t ids[8];
    int64_t labels[8];
    size_t len = 0;
    if (cpt_collator_collate_text(col, set, "alpha beta", 8, ids, labels, 8, &len) != CPT_STATUS_OK) return 4;
    if (len != 4 || labels[1] != CPT_IGNORE_LABEL || labels[2] != 6) return 5;
    if (cpt_collator_new(NULL, CPT_MASKING_MODE_RANDOM, 0.1, 3, &col) != CPT_STATUS_NULL_POINTER) return 6;
    if (strstr(cpt_last_error(), "NULL") == NULL) return 7;
    cpt_collator_free(col);
    cpt_keyword_set_free(set);
    cpt_tokenizer_free(tok);
    printf("ok %s\n", cpt_version());
    return 0;
}
"#;

#[test]
fn header_compiles_and_links() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include").join("compact_pretrain.h");
    assert!(header.exists(), "build script did not write {}", header.display());

    let target = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libcompact_pretrain_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let src = target.join("abi_check.c");
    let exe = target.join("abi_check");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok 0."));
}
