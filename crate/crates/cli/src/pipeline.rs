//! Subcommand implementations: everything between the parsed CLI and the
//! core algorithms.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use icdex_core::corpus::{split, Corpus, Split, Vocab};
use icdex_core::diversity::build_knowledge_matrices;
use icdex_core::encoder::{encode_labels, encode_text};
use icdex_core::knowledge::{umls_entries_from_synonyms, KnowledgeBase, KnowledgeEntry, Source};
use icdex_core::metrics::{evaluate_batch, EvalBatch, MetricsReport};
use icdex_core::model::{knowledge_tensors, KnowledgeTensors, ModelState};
use icdex_core::rng::derive;
use icdex_core::synth::{generate_synthetic, SyntheticSpec};
use icdex_core::trace::build_trace;
use icdex_core::train::{optimize_threshold, prepare_docs, score_docs, train, PreparedDoc};

use crate::clients::{FetchStats, LlmClient, Transport, WikipediaClient};
use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::formats::{
    load_checkpoint, load_corpus, load_kb_export, load_knowledge_matrix, load_label_space,
    load_splits, load_synonyms, read_jsonl, write_checkpoint, write_corpus, write_json,
    write_jsonl, write_kb_export, write_knowledge_matrix, write_label_space, write_splits,
    Checkpoint, WikiTitleRecord, CHECKPOINT_VERSION,
};
use crate::render::{render_html, render_structured};

/// `gen-synthetic`: corpus, labels, splits, raw synonyms, and a full
/// knowledge export, all deterministic for a fixed seed.
pub fn gen_synthetic(
    out_dir: &Path,
    docs: usize,
    labels: usize,
    vocab_size: usize,
    signature_size: usize,
    seed: u64,
) -> Result<()> {
    let spec = SyntheticSpec { n_docs: docs, n_labels: labels, vocab_size, seed, signature_size };
    let data = generate_synthetic(&spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| crate::error::io_err(out_dir, e))?;
    write_corpus(&out_dir.join("corpus.jsonl"), &data.corpus)?;
    write_label_space(&out_dir.join("labels.jsonl"), data.corpus.label_space())?;
    write_splits(&out_dir.join("splits.jsonl"), &data.splits)?;
    write_kb_export(&out_dir.join("kb.jsonl"), &data.knowledge)?;
    // raw synonym file covering the umls route of build-kb
    let synonyms: Vec<crate::formats::SynonymRecord> = data
        .corpus
        .label_space()
        .codes()
        .iter()
        .map(|code| crate::formats::SynonymRecord {
            code: code.clone(),
            synonyms: data
                .knowledge
                .iter()
                .filter(|e| &e.code == code && e.source == Source::Umls)
                .map(|e| e.text.clone())
                .collect(),
        })
        .collect();
    write_jsonl(&out_dir.join("synonyms.jsonl"), &synonyms)?;
    eprintln!(
        "generated {} documents over {} labels into {}",
        data.corpus.len(),
        data.corpus.label_space().len(),
        out_dir.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PrepareSummary {
    n_docs: usize,
    n_labels: usize,
    train: usize,
    dev: usize,
    test: usize,
    warnings: Vec<String>,
}

/// `prepare-data`: load, validate, split, and write the three partitions.
pub fn prepare_data(
    corpus_path: &Path,
    labels_path: &Path,
    splits_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    let label_space = load_label_space(labels_path)?;
    let corpus = load_corpus(corpus_path, Some(label_space))?;
    let assignment = load_splits(splits_path)?;
    let parts = split(&corpus, &assignment)?;
    for w in &parts.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(out_dir).map_err(|e| crate::error::io_err(out_dir, e))?;
    write_corpus(&out_dir.join("train.jsonl"), &parts.train)?;
    write_corpus(&out_dir.join("dev.jsonl"), &parts.dev)?;
    write_corpus(&out_dir.join("test.jsonl"), &parts.test)?;
    let summary = PrepareSummary {
        n_docs: corpus.len(),
        n_labels: corpus.label_space().len(),
        train: parts.train.len(),
        dev: parts.dev.len(),
        test: parts.test.len(),
        warnings: parts.warnings,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    eprintln!(
        "prepared {} docs: {} train / {} dev / {} test",
        summary.n_docs, summary.train, summary.dev, summary.test
    );
    Ok(())
}

/// Inputs for `build-kb`; any subset may be present.
pub struct KbInputs<'a> {
    pub synonyms: Option<&'a Path>,
    pub wiki_titles: Option<&'a Path>,
    pub imports: Vec<PathBuf>,
    pub offline: bool,
    pub transport: &'a dyn Transport,
}

/// `build-kb`: ingest the enabled sources, merge, dedupe, inject fallbacks,
/// and write the KB export.
pub fn build_kb(
    config: &PipelineConfig,
    labels_path: &Path,
    inputs: KbInputs<'_>,
    out: &Path,
) -> Result<()> {
    let label_space = load_label_space(labels_path)?;
    let sources = config.sources()?;
    let mut raw: Vec<KnowledgeEntry> = Vec::new();

    if sources.contains(&Source::Umls) {
        match inputs.synonyms {
            Some(path) => {
                let synonyms = load_synonyms(path)?;
                let provenance = format!("umls:{}", path.display());
                let (entries, skipped) =
                    umls_entries_from_synonyms(&label_space, &synonyms, &provenance);
                if skipped > 0 {
                    eprintln!("warning: skipped {skipped} synonym codes outside the label space");
                }
                raw.extend(entries);
            }
            None => eprintln!("warning: umls source enabled but no --synonyms file given"),
        }
    }

    if sources.contains(&Source::Wikipedia) {
        match inputs.wiki_titles {
            Some(path) => {
                let titles: Vec<WikiTitleRecord> = read_jsonl(path)?;
                let cache_dir = config
                    .knowledge
                    .wikipedia
                    .cache_dir
                    .clone()
                    .unwrap_or_else(|| PathBuf::from("cache/wikipedia"));
                let client = WikipediaClient {
                    config: &config.knowledge.wikipedia,
                    cache_dir,
                    transport: inputs.transport,
                    offline: inputs.offline,
                };
                let mut stats = FetchStats::default();
                for record in &titles {
                    if !label_space.contains(&record.code) {
                        eprintln!("warning: wiki title for unknown code {:?} skipped", record.code);
                        continue;
                    }
                    raw.extend(client.fetch(&record.code, &record.title, &mut stats)?);
                }
                eprintln!(
                    "wikipedia: {} cache hits, {} fetched, {} misses",
                    stats.hits, stats.fetched, stats.misses
                );
            }
            None => eprintln!("warning: wikipedia source enabled but no --wiki-titles file given"),
        }
    }

    if sources.contains(&Source::Llm) {
        let cache_dir = config
            .knowledge
            .llm
            .cache_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("cache/llm"));
        let client = LlmClient::new(
            &config.knowledge.llm,
            cache_dir,
            inputs.transport,
            inputs.offline,
            config.knowledge.llm_sentence_max_tokens,
        )?;
        let mut stats = FetchStats::default();
        for code in label_space.codes() {
            let description = label_space.description(code).unwrap_or(code);
            let entries = client.query(code, description, &mut stats)?;
            if entries.is_empty() && !inputs.offline {
                eprintln!("warning: empty llm response for code {code}");
            }
            raw.extend(entries);
        }
        eprintln!("llm: {} cache hits, {} fetched, {} misses", stats.hits, stats.fetched, stats.misses);
    }

    for import in &inputs.imports {
        raw.extend(load_kb_export(import)?);
    }

    let kb = KnowledgeBase::build(&label_space, &sources, raw)?;
    let entries: Vec<KnowledgeEntry> = kb.all_entries().cloned().collect();
    write_kb_export(out, &entries)?;
    let totals = kb.source_totals();
    eprintln!(
        "kb written to {}: {} entries ({})",
        out.display(),
        kb.total_entries(),
        totals
            .iter()
            .map(|(s, n)| format!("{} {}", s.as_str(), n))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

/// Deterministic pre-training parameter snapshot shared by
/// `select-knowledge` and `train`.
fn snapshot_state(config: &PipelineConfig, n_labels: usize, vocab: &Vocab) -> Result<ModelState> {
    let model_config = config.model_config(n_labels);
    let mut rng = derive(config.seed, 0);
    Ok(ModelState::init(model_config, vocab.len(), &mut rng)?)
}

fn build_vocab(config: &PipelineConfig, corpus: &Corpus) -> Result<Vocab> {
    Ok(Vocab::build(corpus, config.corpus.min_freq)?)
}

/// `select-knowledge`: embed candidates with the frozen pre-training encoder
/// snapshot and pick the most diverse M per code.
pub fn select_knowledge(
    config: &PipelineConfig,
    kb_path: &Path,
    labels_path: &Path,
    corpus_path: &Path,
    out: &Path,
) -> Result<()> {
    let label_space = load_label_space(labels_path)?;
    let corpus = load_corpus(corpus_path, Some(label_space.clone()))?;
    let vocab = build_vocab(config, &corpus)?;
    let sources = config.sources()?;
    let kb = KnowledgeBase::build(&label_space, &sources, load_kb_export(kb_path)?)?;
    let snapshot = snapshot_state(config, label_space.len(), &vocab)?;
    let config_hash = config.km_config_hash(&vocab.hash())?;
    let encoder_config = snapshot.config.encoder.clone();
    let set = build_knowledge_matrices(
        &kb,
        |entry| encode_text(&snapshot.encoder, &encoder_config, &vocab, &entry.text),
        config.knowledge.m,
        config.knowledge.exact_solver_cap,
        config_hash,
    )?;
    write_knowledge_matrix(out, &set)?;
    eprintln!(
        "knowledge matrices for {} codes (m={}, d={}) written to {}",
        set.per_code.len(),
        set.m,
        set.d,
        out.display()
    );
    Ok(())
}

/// One epoch line of the on-disk training log.
#[derive(Serialize, Deserialize)]
struct LogLine {
    epoch: usize,
    train_loss: f64,
    dev_micro_f1: f64,
    learning_rate: f64,
    wall_time_s: f64,
}

pub struct TrainPaths<'a> {
    pub corpus: &'a Path,
    pub labels: &'a Path,
    pub splits: &'a Path,
    pub knowledge_matrix: &'a Path,
    pub out_dir: &'a Path,
}

/// `train`: snapshot, encode labels, load the knowledge matrices, run the
/// training loop, pick the dev threshold, and write checkpoint plus log.
pub fn train_model(config: &PipelineConfig, paths: TrainPaths<'_>) -> Result<PathBuf> {
    let label_space = load_label_space(paths.labels)?;
    let corpus = load_corpus(paths.corpus, Some(label_space.clone()))?;
    let assignment = load_splits(paths.splits)?;
    let parts = split(&corpus, &assignment)?;
    for w in &parts.warnings {
        eprintln!("warning: {w}");
    }
    let vocab = build_vocab(config, &corpus)?;
    let vocab_hash = vocab.hash();
    let km_hash = config.km_config_hash(&vocab_hash)?;
    let km_set = load_knowledge_matrix(paths.knowledge_matrix, &km_hash)?;
    let knowledge = knowledge_tensors(&km_set, &label_space)?;

    let mut state = snapshot_state(config, label_space.len(), &vocab)?;
    state.label_matrix =
        encode_labels(&state.encoder, &state.config.encoder, &vocab, &label_space)?;
    state.label_matrix.frozen = !config.train.train_label_matrix;
    state.attention = icdex_core::attention::AttentionParams::init_label_aligned(
        config.encoder.d,
        config.d_a(),
        &state.label_matrix.matrix,
        &mut derive(config.seed, 3),
    );

    let train_config = config.train_config()?;
    let train_docs = prepare_docs(&parts.train, &vocab, &train_config)?;
    let dev_docs = prepare_docs(&parts.dev, &vocab, &train_config)?;

    let mut log_lines: Vec<LogLine> = Vec::new();
    let mut epoch_clock = Instant::now();
    let outcome = train(state, &knowledge, &train_docs, &dev_docs, &train_config, &mut |record| {
        let wall_time_s = epoch_clock.elapsed().as_secs_f64();
        epoch_clock = Instant::now();
        eprintln!(
            "epoch {:>3}: train_loss {:.6} dev_micro_f1 {:.4} lr {:.3e} ({:.2}s)",
            record.epoch, record.train_loss, record.dev_micro_f1, record.learning_rate, wall_time_s
        );
        log_lines.push(LogLine {
            epoch: record.epoch,
            train_loss: record.train_loss,
            dev_micro_f1: record.dev_micro_f1,
            learning_rate: record.learning_rate,
            wall_time_s,
        });
    })?;

    let threshold = if dev_docs.is_empty() {
        eprintln!("warning: empty dev split, defaulting threshold to 0.5");
        0.5
    } else {
        let dev_scores = score_docs(&outcome.best, &knowledge, &dev_docs)?;
        let dev_gold: Vec<Vec<f64>> = dev_docs.iter().map(|d| d.gold.clone()).collect();
        optimize_threshold(&dev_scores, &dev_gold, &train_config.threshold_grid)?
    };

    std::fs::create_dir_all(paths.out_dir).map_err(|e| crate::error::io_err(paths.out_dir, e))?;
    write_jsonl(&paths.out_dir.join("log.jsonl"), &log_lines)?;
    let checkpoint_path = paths.out_dir.join("checkpoint.json");
    write_checkpoint(&checkpoint_path, &Checkpoint {
        version: CHECKPOINT_VERSION,
        pipeline: config.clone(),
        vocab,
        vocab_hash,
        label_space,
        state: outcome.best,
        threshold: Some(threshold),
        km_config_hash: km_hash,
        best_epoch: outcome.best_epoch,
    })?;
    eprintln!(
        "best epoch {} (stopped early: {}), threshold {:.2}, checkpoint at {}",
        outcome.best_epoch,
        outcome.stopped_early,
        threshold,
        checkpoint_path.display()
    );
    Ok(checkpoint_path)
}

/// Everything reloaded from a checkpoint plus its knowledge tensors.
pub struct LoadedModel {
    pub checkpoint: Checkpoint,
    pub knowledge: KnowledgeTensors,
    pub km_set: icdex_core::diversity::KnowledgeMatrixSet,
}

pub fn load_model(checkpoint_path: &Path, km_path: &Path) -> Result<LoadedModel> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let km_set = load_knowledge_matrix(km_path, &checkpoint.km_config_hash)?;
    let knowledge = knowledge_tensors(&km_set, &checkpoint.label_space)?;
    Ok(LoadedModel { checkpoint, knowledge, km_set })
}

fn prepared_for_eval(model: &LoadedModel, corpus: &Corpus) -> Result<Vec<PreparedDoc>> {
    let train_config = model.checkpoint.pipeline.train_config()?;
    Ok(prepare_docs(corpus, &model.checkpoint.vocab, &train_config)?)
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(CliError::validation(format!(
            "unknown split {other:?} (expected train, dev, or test)"
        ))),
    }
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: &'a Path,
    pub knowledge_matrix: &'a Path,
    pub corpus: &'a Path,
    pub splits: &'a Path,
    pub split: &'a str,
    pub p_at: Vec<usize>,
    pub threshold: Option<f64>,
    pub out: &'a Path,
}

/// `evaluate`: all five metrics on one split, written as a structured report.
pub fn evaluate(args: EvaluateArgs<'_>) -> Result<MetricsReport> {
    let model = load_model(args.checkpoint, args.knowledge_matrix)?;
    let corpus = load_corpus(args.corpus, Some(model.checkpoint.label_space.clone()))?;
    let assignment = load_splits(args.splits)?;
    let parts = split(&corpus, &assignment)?;
    let chosen = match parse_split(args.split)? {
        Split::Train => &parts.train,
        Split::Dev => &parts.dev,
        Split::Test => &parts.test,
    };
    let docs = prepared_for_eval(&model, chosen)?;
    let scores = score_docs(&model.checkpoint.state, &model.knowledge, &docs)?;
    let gold: Vec<Vec<f64>> = docs.iter().map(|d| d.gold.clone()).collect();
    let threshold = args
        .threshold
        .or(model.checkpoint.threshold)
        .ok_or_else(|| CliError::validation("checkpoint has no threshold; pass --threshold"))?;
    let batch = EvalBatch::new(scores, gold, threshold)?;
    let config_hash =
        model.checkpoint.pipeline.full_hash(&model.checkpoint.vocab_hash);
    let report = evaluate_batch(&batch, &args.p_at, &config_hash)?;
    write_json(args.out, &report)?;
    eprintln!(
        "{} split ({} docs): micro_f1 {:.4} macro_f1 {:.4} -> {}",
        args.split,
        report.n_docs,
        report.micro_f1,
        report.macro_f1,
        args.out.display()
    );
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    scores: Vec<f64>,
    predicted: Vec<String>,
}

/// `predict`: per-document probabilities and thresholded codes.
pub fn predict(
    checkpoint_path: &Path,
    km_path: &Path,
    corpus_path: &Path,
    threshold: Option<f64>,
    out: &Path,
) -> Result<()> {
    let model = load_model(checkpoint_path, km_path)?;
    let corpus = load_corpus(corpus_path, Some(model.checkpoint.label_space.clone()))?;
    let docs = prepared_for_eval(&model, &corpus)?;
    let threshold = threshold.or(model.checkpoint.threshold).unwrap_or(0.5);
    let codes = model.checkpoint.label_space.codes();
    let mut lines = Vec::with_capacity(docs.len());
    for doc in &docs {
        let output = model.checkpoint.state.predict(&model.knowledge, &doc.chunks)?;
        let predicted = codes
            .iter()
            .zip(&output.probs)
            .filter(|(_, p)| **p >= threshold)
            .map(|(c, _)| c.clone())
            .collect();
        lines.push(PredictionLine { id: doc.id.clone(), scores: output.probs, predicted });
    }
    write_jsonl(out, &lines)?;
    eprintln!("predictions for {} docs written to {}", lines.len(), out.display());
    Ok(())
}

/// Output flavors of `trace`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceFormat {
    Structured,
    Readable,
    Both,
}

impl TraceFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "structured" => Ok(TraceFormat::Structured),
            "readable" => Ok(TraceFormat::Readable),
            "both" => Ok(TraceFormat::Both),
            other => Err(CliError::validation(format!(
                "unknown trace format {other:?} (expected structured, readable, or both)"
            ))),
        }
    }
}

pub struct TraceArgs<'a> {
    pub checkpoint: &'a Path,
    pub knowledge_matrix: &'a Path,
    pub corpus: &'a Path,
    pub doc_id: Option<&'a str>,
    pub top_spans: usize,
    pub top_knowledge: usize,
    pub threshold: Option<f64>,
    pub format: TraceFormat,
    pub out_dir: &'a Path,
}

/// `trace`: evidence-grounded reports for one or all documents.
pub fn trace(args: TraceArgs<'_>) -> Result<Vec<PathBuf>> {
    let model = load_model(args.checkpoint, args.knowledge_matrix)?;
    let corpus = load_corpus(args.corpus, Some(model.checkpoint.label_space.clone()))?;
    let docs = prepared_for_eval(&model, &corpus)?;
    let selected: Vec<&PreparedDoc> = match args.doc_id {
        Some(id) => {
            let doc = docs.iter().find(|d| d.id == id).ok_or_else(|| {
                CliError::validation(format!("document id {id:?} not found in the corpus"))
            })?;
            vec![doc]
        }
        None => docs.iter().collect(),
    };
    let threshold = args.threshold.or(model.checkpoint.threshold).unwrap_or(0.5);
    let config_hash = model.checkpoint.pipeline.full_hash(&model.checkpoint.vocab_hash);
    std::fs::create_dir_all(args.out_dir).map_err(|e| crate::error::io_err(args.out_dir, e))?;
    let mut written = Vec::new();
    for doc in selected {
        let output = model.checkpoint.state.predict(&model.knowledge, &doc.chunks)?;
        let report = build_trace(
            &doc.id,
            &output,
            &model.checkpoint.label_space,
            &model.km_set,
            &doc.chunks,
            &model.checkpoint.vocab,
            threshold,
            args.top_spans,
            args.top_knowledge,
            &config_hash,
        )?;
        let doc_text = corpus
            .documents()
            .iter()
            .find(|d| d.id == doc.id)
            .map(|d| d.text.clone())
            .unwrap_or_default();
        if matches!(args.format, TraceFormat::Structured | TraceFormat::Both) {
            let path = args.out_dir.join(format!("trace_{}.json", doc.id));
            render_structured(&report, &path)?;
            written.push(path);
        }
        if matches!(args.format, TraceFormat::Readable | TraceFormat::Both) {
            let path = args.out_dir.join(format!("trace_{}.html", doc.id));
            crate::formats::write_atomic(&path, render_html(&report, &doc_text).as_bytes())?;
            written.push(path);
        }
    }
    eprintln!("{} trace files written to {}", written.len(), args.out_dir.display());
    Ok(written)
}

/// Sources listed on the command line override the config list.
pub fn apply_source_override(config: &mut PipelineConfig, sources: &str) -> Result<()> {
    let parsed: Vec<String> = sources.split(',').map(|s| s.trim().to_string()).collect();
    let mut seen = BTreeSet::new();
    for s in &parsed {
        if Source::parse(s).is_none() {
            return Err(CliError::validation(format!(
                "unknown knowledge source {s:?} (expected umls, wikipedia, llm)"
            )));
        }
        seen.insert(s.clone());
    }
    config.knowledge.sources = seen.into_iter().collect();
    Ok(())
}
