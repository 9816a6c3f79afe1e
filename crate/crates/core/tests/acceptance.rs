//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use compact_pretrain::corpus::{save_corpus, CorpusStats, Document};
use compact_pretrain::keyword_extraction::{cosine, mmr_select, DocKeywords};
use compact_pretrain::keyword_filter::{apply_cutoff, build_frequency_table, KeywordSet, KeywordSource};
use compact_pretrain::masking::{
    collate_keyword, collate_random, MaskingConfig, SeededMaskingRng, TokenizedExample, DEFAULT_IGNORE_LABEL,
};
use compact_pretrain::pipeline::{self, MatrixRow, PipelineConfig};
use compact_pretrain::summarizer::{
    compaction_ratio, summarize_corpus, LeadBudget, LeadTokensBackend, SummarizationBackend, SummarizerConfig,
};
use compact_pretrain::synthetic::{experiment_splits, separable_splits, DomainCorpusSpec, SplitSizes};
use compact_pretrain::tokenizer::WordPieceTokenizer;
use compact_pretrain::training::{
    finetune, mlm_batch_loss, pretrain, CorpusVariant, EncoderConfig, EncoderModel, FinetuneConfig, PretrainConfig,
    TinyEncoder, TrainedRun,
};
use compact_pretrain::FailurePolicy;

type Check = Result<String, String>;

/// Stable report text, batch digest per row and intermediate artifacts.
type Fingerprint = (String, BTreeMap<String, String>, Vec<String>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Planted-keyword corpus, its tokenizer and the planted keyword set.
fn domain_fixture(docs: usize, spec: DomainCorpusSpec) -> (Vec<Document>, WordPieceTokenizer, KeywordSet) {
    let sizes = SplitSizes { unlabeled: docs, train: 0, validation: 0, test: 0 };
    let (splits, generator) = experiment_splits(spec, sizes).expect("valid synthetic spec");
    let tokenizer = WordPieceTokenizer::train(splits.unlabeled.iter().map(|d| d.text.as_str()), 2000, 2);
    let keywords = KeywordSet::new(generator.all_keywords(), 1, KeywordSource::WholeData);
    (splits.unlabeled, tokenizer, keywords)
}

fn encode_all(tokenizer: &WordPieceTokenizer, docs: &[Document], max_len: usize) -> Vec<TokenizedExample> {
    docs.iter().map(|d| tokenizer.encode(&d.text, max_len)).collect()
}

fn c1_keyword_statistics() -> Check {
    let start = Instant::now();
    let (docs, tokenizer, keywords) = domain_fixture(400, DomainCorpusSpec::default());
    let examples = encode_all(&tokenizer, &docs, 128);
    let mask_id = tokenizer.special_ids().mask;
    let config = MaskingConfig::keyword(mask_id, tokenizer.vocab_size(), 11);
    let mut rng = SeededMaskingRng::new(11);

    let (mut occurrences, mut selected, mut masked, mut replaced, mut kept) = (0usize, 0usize, 0, 0, 0);
    while occurrences < 20_000 {
        for batch in examples.chunks(16) {
            let out = collate_keyword(batch, &keywords, &config, &mut rng).map_err(err)?;
            for ((example, ids), labels) in batch.iter().zip(&out.input_ids).zip(&out.labels) {
                for (&(s, e), word) in example.word_spans.iter().zip(&example.word_texts) {
                    if !keywords.contains(word) {
                        continue;
                    }
                    occurrences += 1;
                    if labels[s] == DEFAULT_IGNORE_LABEL {
                        continue;
                    }
                    selected += 1;
                    if ids[s..e].iter().all(|&id| id == mask_id) {
                        masked += 1;
                    } else if ids[s..e] == example.token_ids[s..e] {
                        kept += 1;
                    } else {
                        replaced += 1;
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let sel = selected as f64 / occurrences as f64;
    let fm = masked as f64 / selected as f64;
    let fr = replaced as f64 / selected as f64;
    let fk = kept as f64 / selected as f64;
    let detail = format!(
        "{occurrences} occurrences, selected {sel:.4}, mask/replace/keep {fm:.4}/{fr:.4}/{fk:.4}, {elapsed:.2}s"
    );
    ensure((0.73..=0.77).contains(&sel), || format!("selected fraction out of range: {detail}"))?;
    ensure((fm - 0.8).abs() <= 0.02, || format!("mask fraction: {detail}"))?;
    ensure((fr - 0.1).abs() <= 0.02, || format!("replace fraction: {detail}"))?;
    ensure((fk - 0.1).abs() <= 0.02, || format!("keep fraction: {detail}"))?;
    ensure(elapsed < 60.0, || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn c2_keyword_purity() -> Check {
    let (docs, tokenizer, planted) = domain_fixture(120, DomainCorpusSpec { seed: 21, ..Default::default() });
    let examples = encode_all(&tokenizer, &docs, 96);
    let vocab: Vec<String> =
        examples.iter().flat_map(|e| e.word_texts.iter().cloned()).collect::<BTreeSet<_>>().into_iter().collect();
    let mask_id = tokenizer.special_ids().mask;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut violations, mut positions, mut selected_words) = (0usize, 0usize, 0usize);

    for b in 0..1000 {
        // random keyword set: some planted words plus random other words
        let mut words: Vec<String> = planted.words.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect();
        let extra = rng.gen_range(0..20);
        words.extend(vocab.choose_multiple(&mut rng, extra).cloned());
        if words.is_empty() {
            words.push(vocab[0].clone());
        }
        let keywords = KeywordSet::new(words, 1, KeywordSource::Summaries);
        let size = rng.gen_range(1..=8);
        let batch: Vec<TokenizedExample> = (0..size).map(|_| examples.choose(&mut rng).unwrap().clone()).collect();
        let mut config = MaskingConfig::keyword(mask_id, tokenizer.vocab_size(), b);
        config.masking_probability = rng.gen_range(0.05..=1.0);
        let out = collate_keyword(&batch, &keywords, &config, &mut SeededMaskingRng::new(b)).map_err(err)?;

        for ((example, ids), labels) in batch.iter().zip(&out.input_ids).zip(&out.labels) {
            let mut in_selected = vec![false; ids.len()];
            for (&(s, e), word) in example.word_spans.iter().zip(&example.word_texts) {
                let labeled = labels[s..e].iter().filter(|&&l| l != DEFAULT_IGNORE_LABEL).count();
                if labeled == 0 {
                    continue;
                }
                selected_words += 1;
                let whole = labeled == e - s
                    && labels[s..e].iter().zip(&example.token_ids[s..e]).all(|(&l, &id)| l == i64::from(id));
                if !whole || !keywords.contains(word) {
                    violations += 1;
                }
                in_selected[s..e].fill(true);
            }
            for pos in 0..ids.len() {
                positions += 1;
                if !in_selected[pos] && (ids[pos] != example.token_ids[pos] || labels[pos] != DEFAULT_IGNORE_LABEL) {
                    violations += 1;
                }
            }
        }
    }
    let detail =
        format!("1000 batches, {positions} positions, {selected_words} selected words, {violations} violations");
    ensure(violations == 0, || detail.clone())?;
    Ok(detail)
}

fn c3_random_rate() -> Check {
    let (docs, tokenizer, _) = domain_fixture(200, DomainCorpusSpec { seed: 5, ..Default::default() });
    let examples = encode_all(&tokenizer, &docs, 128);
    let config = MaskingConfig::random(tokenizer.special_ids().mask, tokenizer.vocab_size(), 3);
    let mut rng = SeededMaskingRng::new(3);
    let (mut candidates, mut selected) = (0usize, 0usize);
    for batch in examples.chunks(16) {
        let out = collate_random(batch, &config, &mut rng).map_err(err)?;
        for (example, labels) in batch.iter().zip(&out.labels) {
            candidates += example.token_ids.len() - example.special_positions.len();
            selected += labels.iter().filter(|&&l| l != DEFAULT_IGNORE_LABEL).count();
        }
    }
    let frac = selected as f64 / candidates as f64;
    let detail = format!("{candidates} tokens, selected fraction {frac:.4}");
    ensure(candidates >= 10_000, || format!("too few tokens: {detail}"))?;
    ensure((0.135..=0.165).contains(&frac), || detail.clone())?;
    Ok(detail)
}

/// Recomputes every candidate score from scratch at each step.
fn mmr_oracle(doc: &[f64], candidates: &[(String, Vec<f64>)], k: usize, diversity: f64) -> Vec<(String, f64)> {
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < k.min(candidates.len()) {
        let mut best: Option<(f64, &str, usize)> = None;
        for (i, (word, v)) in candidates.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let relevance = cosine(v, doc);
            let score = if chosen.is_empty() {
                relevance
            } else {
                let redundancy = chosen.iter().map(|&j| cosine(v, &candidates[j].1)).fold(f64::NEG_INFINITY, f64::max);
                (1.0 - diversity) * relevance - diversity * redundancy
            };
            let wins = match best {
                None => true,
                Some((s, w, _)) => score > s || (score == s && word.as_str() < w),
            };
            if wins {
                best = Some((score, word, i));
            }
        }
        chosen.push(best.expect("a candidate remains").2);
    }
    chosen.into_iter().map(|i| (candidates[i].0.clone(), cosine(&candidates[i].1, doc))).collect()
}

fn nonzero_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| f64::from(rng.gen_range(-2i32..=2))).collect();
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    }
}

fn c4_mmr_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = (0..26u8).map(|i| format!("{}{}", (b'a' + i) as char, (b'z' - i) as char)).collect();
    let (mut mismatches, mut tied) = (0usize, 0usize);
    for _ in 0..500 {
        let dim = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=12);
        let k = rng.gen_range(1..=5);
        let diversity = *[0.0, 0.5, 0.8, 1.0].choose(&mut rng).unwrap();
        let doc = nonzero_vector(&mut rng, dim);
        let mut words: Vec<String> = names.choose_multiple(&mut rng, n).cloned().collect();
        words.shuffle(&mut rng);
        let mut candidates: Vec<(String, Vec<f64>)> = Vec::with_capacity(n);
        for word in words {
            // duplicates force exact score ties
            let v = if !candidates.is_empty() && rng.gen_bool(0.3) {
                candidates.choose(&mut rng).unwrap().1.clone()
            } else {
                nonzero_vector(&mut rng, dim)
            };
            candidates.push((word, v));
        }
        let distinct: BTreeSet<Vec<i64>> =
            candidates.iter().map(|(_, v)| v.iter().map(|&x| x as i64).collect()).collect();
        if distinct.len() < candidates.len() {
            tied += 1;
        }
        let got = mmr_select(&doc, &candidates, k, diversity).map_err(err)?;
        if got != mmr_oracle(&doc, &candidates, k, diversity) {
            mismatches += 1;
        }
    }
    let detail = format!("500 instances ({tied} with duplicate vectors), {mismatches} mismatches");
    ensure(mismatches == 0, || detail.clone())?;
    Ok(detail)
}

fn c5_frequency_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pool: Vec<String> = (0..60).map(|i| format!("term{i}")).collect();
    let mut docs = Vec::with_capacity(1000);
    for i in 0..1000 {
        let n = rng.gen_range(0..=10);
        let picked: Vec<String> = pool.choose_multiple(&mut rng, n).cloned().collect();
        let mut keywords = Vec::with_capacity(n);
        for w in picked {
            let w = if rng.gen_bool(0.2) { w.to_uppercase() } else { w };
            keywords.push((w, rng.gen_range(0.0..1.0)));
        }
        docs.push(DocKeywords { doc_id: format!("d{i}"), keywords });
    }

    let mut naive: BTreeMap<String, usize> = BTreeMap::new();
    for doc in &docs {
        let mut seen = Vec::new();
        for (w, _) in &doc.keywords {
            let w = w.to_lowercase();
            if !seen.contains(&w) {
                seen.push(w.clone());
                *naive.entry(w).or_insert(0) += 1;
            }
        }
    }
    let table = build_frequency_table(&docs);
    let got: BTreeMap<String, usize> = table.entries().iter().cloned().collect();
    ensure(got == naive, || "frequency table differs from recount".into())?;

    let mut previous: Option<BTreeSet<String>> = None;
    for threshold in 1..=10 {
        let set = apply_cutoff(&table, threshold, KeywordSource::Summaries).map_err(err)?;
        let expected: BTreeSet<String> =
            naive.iter().filter(|(_, &n)| n >= threshold).map(|(w, _)| w.clone()).collect();
        ensure(set.words == expected, || format!("cut-off {threshold} differs from recount"))?;
        if let Some(prev) = &previous {
            ensure(set.words.is_subset(prev), || format!("cut-off {threshold} is not a subset of {}", threshold - 1))?;
        }
        previous = Some(set.words);
    }
    Ok(format!("1000 documents, {} distinct words, cut-offs 1..10 exact and nested", naive.len()))
}

/// Returns the input repeated, so most outputs overshoot their limit.
struct Verbose;

impl SummarizationBackend for Verbose {
    fn id(&self) -> String {
        "verbose-stub".into()
    }

    fn summarize(&self, text: &str, _config: &SummarizerConfig) -> Result<String, String> {
        Ok(format!("{text} {text} {text}"))
    }
}

fn c6_summarizer_contract() -> Check {
    let (docs, tokenizer, _) =
        domain_fixture(60, DomainCorpusSpec { min_words: 5, max_words: 90, ..Default::default() });
    let tokenizer = Arc::new(tokenizer);
    let config =
        SummarizerConfig { max_input_tokens: 80, max_output_tokens: 40, min_output_tokens: None, batch_size: 7 };
    let lead = LeadTokensBackend::new(tokenizer.clone(), LeadBudget::Fraction(0.4));
    let backends: [&dyn SummarizationBackend; 2] = [&Verbose, &lead];
    let mut checked = 0;
    for backend in backends {
        let run = summarize_corpus(&docs, backend, &tokenizer, &config, FailurePolicy::FailFast).map_err(err)?;
        ensure(run.summaries.len() == docs.len(), || "missing summaries".into())?;
        for s in &run.summaries {
            let limit = config.max_output_tokens.min(s.source_token_count);
            ensure(s.token_count <= limit && tokenizer.count_tokens(&s.text) == s.token_count, || {
                format!("{} from {}: {} tokens over limit {limit}", s.doc_id, backend.id(), s.token_count)
            })?;
            checked += 1;
        }
    }

    let stats = |bytes: u64| CorpusStats { doc_count: 1, byte_size: bytes, ..Default::default() };
    let pubhealth = compaction_ratio(&stats(4_800_000), &stats(3_000_000)).map_err(err)?;
    let ipm = compaction_ratio(&stats(66_600_000), &stats(15_600_000)).map_err(err)?;
    ensure(format!("{pubhealth:.4}") == "0.6250", || format!("3.0/4.8 gave {pubhealth}"))?;
    ensure(format!("{ipm:.4}") == "0.2342", || format!("15.6/66.6 gave {ipm}"))?;
    Ok(format!("{checked} summaries within limits, ratios {pubhealth:.4} and {ipm:.4}"))
}

fn c7_end_to_end() -> Check {
    let start = Instant::now();
    let (docs, tokenizer, keywords) = domain_fixture(200, DomainCorpusSpec { seed: 17, ..Default::default() });
    let mut model =
        TinyEncoder::new(EncoderConfig { seed: 1, ..EncoderConfig::tiny(tokenizer.vocab_size()) }).map_err(err)?;
    let config = model.config().clone();
    if config.layers != 2 || config.hidden != 128 {
        return Err(format!("encoder is not the tiny shape: {config:?}"));
    }

    // a fixed masked probe batch drawn from the same corpus
    let probe_examples = encode_all(&tokenizer, &docs[..32], 128);
    let masking = MaskingConfig::keyword(tokenizer.special_ids().mask, tokenizer.vocab_size(), 99);
    let probe = collate_keyword(&probe_examples, &keywords, &masking, &mut SeededMaskingRng::new(99)).map_err(err)?;
    let before = mlm_batch_loss(&model, &probe, DEFAULT_IGNORE_LABEL).ok_or("probe has no masked positions")?;

    let pretrain_config = PretrainConfig { base_lr: 1e-3, ..PretrainConfig::keyword(CorpusVariant::Whole, 3) };
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let run = pretrain(&mut model, &tokenizer, &texts, Some(&keywords), &pretrain_config).map_err(err)?;
    let after = mlm_batch_loss(&model, &probe, DEFAULT_IGNORE_LABEL).ok_or("probe has no masked positions")?;
    let elapsed = start.elapsed().as_secs_f64();
    let detail = format!(
        "{} epochs, {} steps, probe loss {before:.3} -> {after:.3} (ratio {:.3}), epoch means {:?}, {elapsed:.1}s",
        pretrain_config.epochs,
        run.loss_curve.len(),
        after / before,
        run.epoch_losses.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    ensure(pretrain_config.epochs == 2, || detail.clone())?;
    ensure(after <= 0.8 * before, || detail.clone())?;
    ensure(elapsed < 600.0, || detail.clone())?;
    Ok(detail)
}

fn c8_speed_scaling() -> Check {
    let spec = DomainCorpusSpec { min_words: 80, max_words: 110, seed: 8, ..Default::default() };
    let (docs, tokenizer, keywords) = domain_fixture(200, spec);
    let tokenizer_arc = Arc::new(tokenizer.clone());
    let backend = LeadTokensBackend::new(tokenizer_arc, LeadBudget::Fraction(0.4));
    let summaries =
        summarize_corpus(&docs, &backend, &tokenizer, &SummarizerConfig::default(), FailurePolicy::FailFast)
            .map_err(err)?
            .summaries;
    let whole: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let short: Vec<&str> = summaries.iter().map(|s| s.text.as_str()).collect();

    let run = |texts: &[&str]| -> Result<TrainedRun, String> {
        let mut model = TinyEncoder::new(EncoderConfig::tiny(tokenizer.vocab_size())).map_err(err)?;
        let config = PretrainConfig { epochs: 1, ..PretrainConfig::keyword(CorpusVariant::Whole, 8) };
        pretrain(&mut model, &tokenizer, texts, Some(&keywords), &config).map_err(err)
    };
    let (mut t_whole, mut t_short, mut n_whole, mut n_short) = (f64::MAX, f64::MAX, 0, 0);
    for _ in 0..3 {
        let w = run(&whole)?;
        let s = run(&short)?;
        t_whole = t_whole.min(w.pretraining_minutes);
        t_short = t_short.min(s.pretraining_minutes);
        n_whole = w.tokens_processed;
        n_short = s.tokens_processed;
    }
    let time_ratio = t_short / t_whole;
    let token_ratio = n_short as f64 / n_whole as f64;
    let rel = (time_ratio - token_ratio).abs() / token_ratio;
    let detail = format!(
        "tokens {n_short}/{n_whole} = {token_ratio:.4}, time {:.3}s/{:.3}s = {time_ratio:.4}, relative gap {rel:.3}",
        t_short * 60.0,
        t_whole * 60.0
    );
    ensure(rel <= 0.15, || detail.clone())?;
    Ok(detail)
}

fn c9_gradient_check() -> Check {
    let vocab = 40;
    let mut model = TinyEncoder::new(EncoderConfig { seed: 9, ..EncoderConfig::tiny(vocab) }).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<u32> = (0..12).map(|_| rng.gen_range(5..vocab as u32)).collect();
    let labels: Vec<i64> =
        ids.iter().enumerate().map(|(i, &id)| if i % 3 == 1 { i64::from(id) } else { DEFAULT_IGNORE_LABEL }).collect();

    let mut grads = vec![0.0; model.parameters().len()];
    model.mlm_loss(&ids, &labels, DEFAULT_IGNORE_LABEL, 1.0, Some(&mut grads));
    let n = grads.len();
    let slice: Vec<usize> = (0..400).map(|_| rng.gen_range(0..n)).collect::<BTreeSet<_>>().into_iter().collect();

    let h = 1e-5;
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for &i in &slice {
        let orig = model.parameters()[i];
        model.parameters_mut()[i] = orig + h;
        let plus = model.mlm_loss(&ids, &labels, DEFAULT_IGNORE_LABEL, 1.0, None).0;
        model.parameters_mut()[i] = orig - h;
        let minus = model.mlm_loss(&ids, &labels, DEFAULT_IGNORE_LABEL, 1.0, None).0;
        model.parameters_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        diff += (grads[i] - numeric).powi(2);
        norm_a += grads[i].powi(2);
        norm_n += numeric.powi(2);
    }
    let rel = diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(f64::MIN_POSITIVE);
    let detail = format!("{} sampled parameters of {n}, relative error {rel:.2e}", slice.len());
    ensure(norm_n > 0.0, || format!("all sampled gradients are zero: {detail}"))?;
    ensure(rel <= 1e-3, || detail.clone())?;
    Ok(detail)
}

fn matrix_config(root: &Path, corpus: &Path) -> PipelineConfig {
    let mut config = PipelineConfig { output_dir: root.to_path_buf(), master_seed: 1234, ..Default::default() };
    config.corpus.path = corpus.to_path_buf();
    config.tokenizer.vocab_size = 600;
    config.model.hidden = 32;
    config.model.heads = 2;
    config.model.intermediate = 64;
    config.model.layers = 1;
    config.pretrain.base_lr = 1e-3;
    config.finetune.lr = 5e-4;
    config.finetune.num_labels = 4;
    config.finetune.max_epochs = 2;
    config
}

/// report.tsv without the wall-clock columns, the batch digests per row and
/// every deterministic intermediate artifact.
fn matrix_fingerprint(config: &PipelineConfig) -> Result<Fingerprint, String> {
    let table = pipeline::run_matrix(config).map_err(err)?;
    let layout = config.layout();
    let tsv = fs::read_to_string(layout.report_tsv()).map_err(err)?;
    if tsv != table.to_tsv() {
        return Err("report.tsv does not match the returned table".into());
    }
    let mut lines = tsv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
    let drop: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, c)| matches!(**c, "pretraining_minutes" | "time_ratio"))
        .map(|(i, _)| i)
        .collect();
    if drop.len() != 2 {
        return Err(format!("unexpected header {header:?}"));
    }
    let stable: String = std::iter::once(header.join("\t"))
        .chain(lines.map(|l| {
            l.split('\t').enumerate().filter(|(i, _)| !drop.contains(i)).map(|(_, c)| c).collect::<Vec<_>>().join("\t")
        }))
        .collect::<Vec<_>>()
        .join("\n");

    let mut digests = BTreeMap::new();
    for row in MatrixRow::ALL.into_iter().filter(|r| r.corpus_variant().is_some()) {
        let raw = fs::read_to_string(layout.pretrain_record(row)).map_err(err)?;
        let run: TrainedRun = serde_json::from_str(&raw).map_err(err)?;
        digests.insert(row.to_string(), run.batch_digest);
    }
    let mut artifacts =
        vec![fs::read_to_string(layout.vocab()).map_err(err)?, fs::read_to_string(layout.summaries()).map_err(err)?];
    for source in [KeywordSource::WholeData, KeywordSource::Summaries] {
        artifacts.push(fs::read_to_string(layout.frequency_table(source)).map_err(err)?);
        artifacts.push(fs::read_to_string(layout.keyword_set(source)).map_err(err)?);
    }
    Ok((stable, digests, artifacts))
}

fn c10_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let corpus = dir.path().join("corpus.jsonl");
    let sizes = SplitSizes { unlabeled: 80, train: 48, validation: 16, test: 16 };
    let (splits, _) = experiment_splits(DomainCorpusSpec { seed: 10, ..Default::default() }, sizes).map_err(err)?;
    save_corpus(&splits, &corpus).map_err(err)?;

    let first = matrix_fingerprint(&matrix_config(&dir.path().join("a"), &corpus))?;
    let second = matrix_fingerprint(&matrix_config(&dir.path().join("b"), &corpus))?;
    ensure(first.0 == second.0, || format!("tables differ:\n{}\n---\n{}", first.0, second.0))?;
    ensure(first.1 == second.1, || format!("masked batches differ: {:?} vs {:?}", first.1, second.1))?;
    ensure(first.2 == second.2, || "intermediate artifacts differ".into())?;
    ensure(first.1.values().all(|d| d.len() == 64), || "missing batch digests".into())?;
    Ok(format!("5 rows identical across two runs, {} batch digests equal", first.1.len()))
}

/// Bag-of-words logistic regression trained by full-batch gradient descent.
fn bow_oracle_accuracy(train: &[Document], test: &[Document]) -> f64 {
    let vocab: BTreeMap<&str, usize> = train
        .iter()
        .flat_map(|d| d.text.split_whitespace())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, w)| (w, i))
        .collect();
    let features = |d: &Document| -> Vec<f64> {
        let mut x = vec![0.0; vocab.len()];
        for w in d.text.split_whitespace() {
            if let Some(&i) = vocab.get(w) {
                x[i] += 1.0;
            }
        }
        x
    };
    let target = |d: &Document| if d.label.as_deref() == Some("pos") { 1.0 } else { 0.0 };
    let xs: Vec<Vec<f64>> = train.iter().map(features).collect();
    let ys: Vec<f64> = train.iter().map(target).collect();
    let (mut w, mut b) = (vec![0.0; vocab.len()], 0.0);
    for _ in 0..300 {
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            gb += err;
            for (g, a) in gw.iter_mut().zip(x) {
                *g += err * a;
            }
        }
        let n = xs.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= 0.5 * g / n;
        }
        b -= 0.5 * gb / n;
    }
    let correct = test
        .iter()
        .filter(|d| {
            let z: f64 = b + features(d).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) == (target(d) == 1.0)
        })
        .count();
    correct as f64 / test.len() as f64
}

fn c11_separable_finetune() -> Check {
    let splits = separable_splits(240, 60, 120, 11);
    let oracle = bow_oracle_accuracy(&splits.train, &splits.test);
    ensure(oracle >= 0.99, || format!("bag-of-words oracle only reached {oracle:.4}"))?;

    let texts = splits.train.iter().chain(&splits.validation).map(|d| d.text.as_str());
    let tokenizer = WordPieceTokenizer::train(texts, 500, 1);
    let base =
        TinyEncoder::new(EncoderConfig { seed: 11, ..EncoderConfig::tiny(tokenizer.vocab_size()) }).map_err(err)?;
    let config = FinetuneConfig { lr: 5e-4, max_epochs: 4, seed: 11, ..Default::default() };
    let outcome = finetune(&base, &tokenizer, &splits, &config).map_err(err)?;
    let detail = format!(
        "oracle {oracle:.4}, encoder test acc {:.4} (epoch {} of {}), validation acc per epoch {:?}",
        outcome.test.accuracy,
        outcome.selected_epoch,
        outcome.epochs.len(),
        outcome.epochs.iter().map(|e| e.validation.accuracy).collect::<Vec<_>>()
    );
    ensure(outcome.epochs.len() <= 4, || detail.clone())?;
    ensure(outcome.test.accuracy >= 0.95, || detail.clone())?;
    Ok(detail)
}

type Criterion = fn() -> Check;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 11] = [
        ("keyword collator statistics", c1_keyword_statistics),
        ("keyword collator purity", c2_keyword_purity),
        ("random collator rate", c3_random_rate),
        ("MMR oracle equivalence", c4_mmr_oracle),
        ("frequency filter oracle", c5_frequency_oracle),
        ("summarizer length contract", c6_summarizer_contract),
        ("desk-scale keyword pretraining", c7_end_to_end),
        ("pretraining speed scaling", c8_speed_scaling),
        ("MLM gradient check", c9_gradient_check),
        ("matrix determinism", c10_determinism),
        ("separable fine-tuning", c11_separable_finetune),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("criterion {:>2}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || f.as_str() == (i + 1).to_string()) {
            continue;
        }
        match check() {
            Ok(detail) => println!("{id} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL  {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
