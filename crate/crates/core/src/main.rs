use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use compact_pretrain::corpus::{save_corpus, CorpusFormat};
use compact_pretrain::keyword_filter::KeywordSource;
use compact_pretrain::pipeline::{self, MatrixRow, PipelineConfig};
use compact_pretrain::synthetic::{experiment_splits, DomainCorpusSpec, SplitSizes};

/// Compact domain-adaptive pretraining: summarize, extract keywords,
/// pretrain with keyword masking, fine-tune and compare.
#[derive(Debug, Parser)]
#[command(name = "compact-pretrain", version)]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML pipeline configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Overrides `corpus.path`.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,

    /// Overrides `corpus.format` (jsonl or csv).
    #[arg(long, global = true)]
    format: Option<String>,

    /// Overrides `master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides `filter.threshold`.
    #[arg(long, global = true)]
    threshold: Option<usize>,

    /// Print what would run and exit.
    #[arg(long, global = true)]
    dry_run: bool,

    /// More log output; repeat for debug.
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    InitConfig,
    /// Write a synthetic topic corpus with planted keywords.
    DemoCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        unlabeled: usize,
        #[arg(long, default_value_t = 120)]
        train: usize,
        #[arg(long, default_value_t = 40)]
        validation: usize,
        #[arg(long, default_value_t = 40)]
        test: usize,
        #[arg(long, default_value_t = 7)]
        corpus_seed: u64,
    },
    /// Load and validate the corpus and fix the tokenizer vocabulary.
    Ingest,
    /// Summarize the pretraining corpus.
    Summarize,
    /// Extract keywords and apply the frequency cut-off.
    Extract {
        #[arg(long, value_parser = parse_source)]
        source: KeywordSource,
    },
    /// Re-apply the cut-off to extracted keywords.
    Filter {
        #[arg(long, value_parser = parse_source)]
        source: KeywordSource,
    },
    /// Continued pretraining for one matrix row.
    Pretrain {
        #[arg(long, value_parser = parse_row)]
        row: MatrixRow,
    },
    /// Fine-tune and evaluate one matrix row.
    Finetune {
        #[arg(long, value_parser = parse_row)]
        row: MatrixRow,
    },
    /// Build the comparison table from finished rows.
    Report,
    /// Run the whole pipeline for the selected rows.
    Matrix {
        /// Comma-separated subset of rows; defaults to the configured matrix.
        #[arg(long, value_delimiter = ',', value_parser = parse_row)]
        rows: Vec<MatrixRow>,
    },
}

fn parse_source(s: &str) -> Result<KeywordSource, String> {
    s.parse().map_err(|e: compact_pretrain::Error| e.to_string())
}

fn parse_row(s: &str) -> Result<MatrixRow, String> {
    s.parse().map_err(|e: compact_pretrain::Error| e.to_string())
}

fn load_config(global: &Global) -> Result<PipelineConfig> {
    let mut config = match &global.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &global.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(path) = &global.corpus {
        config.corpus.path = path.clone();
    }
    if let Some(format) = &global.format {
        config.corpus.format = format.parse::<CorpusFormat>()?;
    }
    if let Some(seed) = global.seed {
        config.master_seed = seed;
    }
    if let Some(threshold) = global.threshold {
        config.filter.threshold = threshold;
    }
    config.validate()?;
    Ok(config)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::InitConfig => {
            print!("{}", PipelineConfig::default().to_toml());
            return Ok(());
        }
        Command::DemoCorpus { out, unlabeled, train, validation, test, corpus_seed } => {
            let sizes = SplitSizes { unlabeled, train, validation, test };
            if cli.global.dry_run {
                println!("write synthetic corpus {sizes:?} (seed {corpus_seed}) -> {}", out.display());
                return Ok(());
            }
            let spec = DomainCorpusSpec { seed: corpus_seed, ..DomainCorpusSpec::default() };
            let (splits, generator) = experiment_splits(spec, sizes)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            save_corpus(&splits, &out)?;
            println!("wrote {} documents to {}", splits.len(), out.display());
            println!("planted keywords: {}", generator.all_keywords().into_iter().collect::<Vec<_>>().join(" "));
            return Ok(());
        }
        _ => {}
    }

    let mut config = load_config(&cli.global)?;
    if cli.global.dry_run {
        let steps = match &cli.command {
            Command::Matrix { rows } => {
                if !rows.is_empty() {
                    config.matrix = rows.clone();
                }
                pipeline::plan(&config)
            }
            other => vec![format!("{other:?} with output directory {}", config.output_dir.display())],
        };
        for step in steps {
            println!("{step}");
        }
        return Ok(());
    }

    match cli.command {
        Command::InitConfig | Command::DemoCorpus { .. } => unreachable!("handled above"),
        Command::Ingest => {
            let s = pipeline::run_ingest(&config)?;
            let (train, validation, test, unlabeled) = s.counts;
            println!("train={train} validation={validation} test={test} unlabeled={unlabeled} vocab={}", s.vocab_size);
        }
        Command::Summarize => {
            let s = pipeline::run_summarize(&config)?;
            println!(
                "summaries={} clipped={} skipped={} compaction_ratio={:.4}",
                s.summaries, s.clipped, s.skipped, s.compaction_ratio
            );
        }
        Command::Extract { source } => {
            let set = pipeline::run_extract(&config, source)?;
            println!("{} keywords at cut-off {}", set.len(), set.threshold);
        }
        Command::Filter { source } => {
            let set = pipeline::run_filter(&config, source, None)?;
            println!("{} keywords at cut-off {}", set.len(), set.threshold);
        }
        Command::Pretrain { row } => {
            let run = pipeline::run_pretrain(&config, row)?;
            println!(
                "{row}: {} steps, {:.4} min, final loss {:.4}",
                run.loss_curve.len(),
                run.pretraining_minutes,
                run.loss_curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN)
            );
        }
        Command::Finetune { row } => {
            let r = pipeline::run_finetune(&config, row)?;
            println!("{row}: test_acc={:.4} test_f1={:.4}", r.test_acc, r.test_f1);
        }
        Command::Report => {
            print!("{}", pipeline::run_report(&config)?.to_markdown());
        }
        Command::Matrix { rows } => {
            if !rows.is_empty() {
                config.matrix = rows;
            }
            print!("{}", pipeline::run_matrix(&config)?.to_markdown());
        }
    }
    Ok(())
}
