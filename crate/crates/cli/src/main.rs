//! The `icdex` command line: data preparation, knowledge ingestion,
//! diversity selection, training, evaluation, prediction, and trace reports.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use icdex::clients::HttpTransport;
use icdex::config::PipelineConfig;
use icdex::error::CliError;
use icdex::pipeline::{self, EvaluateArgs, KbInputs, TraceArgs, TraceFormat, TrainPaths};

#[derive(Parser)]
#[command(
    name = "icdex",
    version,
    about = "Knowledge-grounded multi-label clinical code tagging with evidence traces"
)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed threading through every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonDataArgs {
    /// Corpus file (jsonl: id, text, codes).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Label-space file (jsonl: code, description; order is index order).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Split file (jsonl: id, split).
    #[arg(long)]
    splits: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus with aligned knowledge.
    GenSynthetic {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        docs: usize,
        #[arg(long, default_value_t = 20)]
        labels: usize,
        #[arg(long, default_value_t = 500)]
        vocab_size: usize,
        #[arg(long, default_value_t = 3)]
        signature_size: usize,
    },
    /// Load, validate, and split a corpus.
    PrepareData {
        #[command(flatten)]
        data: CommonDataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ingest knowledge sources into a merged KB export.
    BuildKb {
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Raw UMLS synonym file (jsonl: code, synonyms).
        #[arg(long)]
        synonyms: Option<PathBuf>,
        /// Code -> Wikipedia title map (jsonl: code, title).
        #[arg(long)]
        wiki_titles: Option<PathBuf>,
        /// Existing KB export files to merge in.
        #[arg(long)]
        import: Vec<PathBuf>,
        /// Comma-separated subset of umls,wikipedia,llm.
        #[arg(long)]
        sources: Option<String>,
        /// Use caches only; never touch the network.
        #[arg(long)]
        offline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed KB entries and select the M most diverse per code.
    SelectKnowledge {
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Knowledge entries per code.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        sources: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the model and write a checkpoint plus training log.
    Train {
        #[command(flatten)]
        data: CommonDataArgs,
        #[arg(long)]
        knowledge_matrix: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        warmup_steps: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        sources: Option<String>,
        /// Ablation switches (mirror the attention-branch study).
        #[arg(long)]
        disable_lsa: bool,
        #[arg(long)]
        disable_lcca: bool,
        #[arg(long)]
        disable_kcca: bool,
    },
    /// Compute micro/macro F1, micro/macro AUC, and P@N on one split.
    Evaluate {
        #[command(flatten)]
        data: CommonDataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        knowledge_matrix: Option<PathBuf>,
        /// train, dev, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated P@N cutoffs.
        #[arg(long, default_value = "5,8,15")]
        n: String,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score documents and write per-document probabilities.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        knowledge_matrix: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build evidence-grounded trace reports.
    Trace {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        knowledge_matrix: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// One document id; omit to trace the whole corpus file.
        #[arg(long)]
        doc_id: Option<String>,
        #[arg(long, default_value_t = 3)]
        top_spans: usize,
        #[arg(long, default_value_t = 8)]
        top_knowledge: usize,
        #[arg(long)]
        threshold: Option<f64>,
        /// structured, readable, or both.
        #[arg(long, default_value = "both")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flag value, else config path entry, else a named validation error.
fn need(
    flag: Option<PathBuf>,
    from_config: &Option<PathBuf>,
    name: &str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| from_config.clone()).ok_or_else(|| {
        CliError::validation(format!("missing --{name} (no [paths].{name} in config either)"))
    })
}

fn parse_n_list(n: &str) -> Result<Vec<usize>, CliError> {
    n.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| CliError::validation(format!("bad P@N value {part:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }

    match cli.command {
        Command::GenSynthetic { out, docs, labels, vocab_size, signature_size } => {
            let out = need(out, &config.paths.output_dir, "out")?;
            pipeline::gen_synthetic(&out, docs, labels, vocab_size, signature_size, config.seed)
        }
        Command::PrepareData { data, out } => {
            let corpus = need(data.corpus, &config.paths.corpus, "corpus")?;
            let labels = need(data.labels, &config.paths.labels, "labels")?;
            let splits = need(data.splits, &config.paths.splits, "splits")?;
            let out = need(out, &config.paths.output_dir, "out")?;
            pipeline::prepare_data(&corpus, &labels, &splits, &out)
        }
        Command::BuildKb { labels, synonyms, wiki_titles, import, sources, offline, out } => {
            if let Some(s) = &sources {
                pipeline::apply_source_override(&mut config, s)?;
            }
            let labels = need(labels, &config.paths.labels, "labels")?;
            let out = need(out, &config.paths.kb, "out")?;
            let synonyms = synonyms.or_else(|| config.paths.synonyms.clone());
            let wiki_titles = wiki_titles.or_else(|| config.paths.wiki_titles.clone());
            let transport = HttpTransport;
            pipeline::build_kb(
                &config,
                &labels,
                KbInputs {
                    synonyms: synonyms.as_deref(),
                    wiki_titles: wiki_titles.as_deref(),
                    imports: import,
                    offline,
                    transport: &transport,
                },
                &out,
            )
        }
        Command::SelectKnowledge { kb, labels, corpus, m, sources, out } => {
            if let Some(m) = m {
                config.knowledge.m = m;
            }
            if let Some(s) = &sources {
                pipeline::apply_source_override(&mut config, s)?;
            }
            let kb = need(kb, &config.paths.kb, "kb")?;
            let labels = need(labels, &config.paths.labels, "labels")?;
            let corpus = need(corpus, &config.paths.corpus, "corpus")?;
            let out = need(out, &config.paths.knowledge_matrix, "out")?;
            pipeline::select_knowledge(&config, &kb, &labels, &corpus, &out)
        }
        Command::Train {
            data,
            knowledge_matrix,
            out,
            epochs,
            batch_size,
            learning_rate,
            warmup_steps,
            patience,
            m,
            sources,
            disable_lsa,
            disable_lcca,
            disable_kcca,
        } => {
            if let Some(v) = epochs {
                config.train.epochs = v;
            }
            if let Some(v) = batch_size {
                config.train.batch_size = v;
            }
            if let Some(v) = learning_rate {
                config.train.learning_rate = v;
            }
            if let Some(v) = warmup_steps {
                config.train.warmup_steps = v;
            }
            if let Some(v) = patience {
                config.train.patience = v;
            }
            if let Some(v) = m {
                config.knowledge.m = v;
            }
            if let Some(s) = &sources {
                pipeline::apply_source_override(&mut config, s)?;
            }
            config.train.lsa &= !disable_lsa;
            config.train.lcca &= !disable_lcca;
            config.train.kcca &= !disable_kcca;
            let corpus = need(data.corpus, &config.paths.corpus, "corpus")?;
            let labels = need(data.labels, &config.paths.labels, "labels")?;
            let splits = need(data.splits, &config.paths.splits, "splits")?;
            let km = need(knowledge_matrix, &config.paths.knowledge_matrix, "knowledge-matrix")?;
            let out = need(out, &config.paths.output_dir, "out")?;
            pipeline::train_model(&config, TrainPaths {
                corpus: &corpus,
                labels: &labels,
                splits: &splits,
                knowledge_matrix: &km,
                out_dir: &out,
            })
            .map(|_| ())
        }
        Command::Evaluate { data, checkpoint, knowledge_matrix, split, n, threshold, out } => {
            let checkpoint = need(checkpoint, &config.paths.checkpoint, "checkpoint")?;
            let km = need(knowledge_matrix, &config.paths.knowledge_matrix, "knowledge-matrix")?;
            let corpus = need(data.corpus, &config.paths.corpus, "corpus")?;
            let splits = need(data.splits, &config.paths.splits, "splits")?;
            let out = need(out, &None, "out")?;
            pipeline::evaluate(EvaluateArgs {
                checkpoint: &checkpoint,
                knowledge_matrix: &km,
                corpus: &corpus,
                splits: &splits,
                split: &split,
                p_at: parse_n_list(&n)?,
                threshold,
                out: &out,
            })
            .map(|_| ())
        }
        Command::Predict { checkpoint, knowledge_matrix, corpus, threshold, out } => {
            let checkpoint = need(checkpoint, &config.paths.checkpoint, "checkpoint")?;
            let km = need(knowledge_matrix, &config.paths.knowledge_matrix, "knowledge-matrix")?;
            let corpus = need(corpus, &config.paths.corpus, "corpus")?;
            let out = need(out, &None, "out")?;
            pipeline::predict(&checkpoint, &km, &corpus, threshold, &out)
        }
        Command::Trace {
            checkpoint,
            knowledge_matrix,
            corpus,
            doc_id,
            top_spans,
            top_knowledge,
            threshold,
            format,
            out,
        } => {
            let checkpoint = need(checkpoint, &config.paths.checkpoint, "checkpoint")?;
            let km = need(knowledge_matrix, &config.paths.knowledge_matrix, "knowledge-matrix")?;
            let corpus = need(corpus, &config.paths.corpus, "corpus")?;
            let out = need(out, &config.paths.output_dir, "out")?;
            pipeline::trace(TraceArgs {
                checkpoint: &checkpoint,
                knowledge_matrix: &km,
                corpus: &corpus,
                doc_id: doc_id.as_deref(),
                top_spans,
                top_knowledge,
                threshold,
                format: TraceFormat::parse(&format)?,
                out_dir: &out,
            })
            .map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
