//! File formats: line-delimited JSON for corpora, labels, splits, synonyms,
//! and knowledge exports; JSON containers for knowledge matrices and
//! checkpoints. All writes go through a temp file and atomic rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use icdex_core::corpus::{Corpus, Document, LabelSpace, Split, Vocab};
use icdex_core::diversity::KnowledgeMatrixSet;
use icdex_core::knowledge::KnowledgeEntry;
use icdex_core::model::ModelState;

use crate::config::{sha256_hex, PipelineConfig};
use crate::error::{io_err, CliError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const KNOWLEDGE_MATRIX_VERSION: u32 = 1;

/// One corpus line: `{"id", "text", "codes"}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    pub codes: Vec<String>,
}

/// One label-space line: `{"code", "description"}`; file order is index order.
#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRecord {
    pub code: String,
    pub description: String,
}

/// One split line: `{"id", "split"}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SplitRecord {
    pub id: String,
    pub split: Split,
}

/// One synonym line: `{"code", "synonyms"}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SynonymRecord {
    pub code: String,
    pub synonyms: Vec<String>,
}

/// One code -> Wikipedia page title mapping line.
#[derive(Debug, Serialize, Deserialize)]
pub struct WikiTitleRecord {
    pub code: String,
    pub title: String,
}

/// Read a line-delimited JSON file; parse errors name the line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::validation(format!("{}: {}", path.display(), e)))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| {
            CliError::validation(format!("{}:{}: {}", path.display(), i + 1, e))
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Write items as line-delimited JSON, atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)
            .map_err(|e| CliError::runtime(format!("{}: {}", path.display(), e)))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::runtime(format!("{}: {}", path.display(), e)))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("{}: {}", path.display(), e)))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: {}", path.display(), e)))
}

/// Load a label space; line order defines the index order.
pub fn load_label_space(path: &Path) -> Result<LabelSpace> {
    let records: Vec<LabelRecord> = read_jsonl(path)?;
    Ok(LabelSpace::new(records.into_iter().map(|r| (r.code, r.description)).collect())?)
}

/// Load a corpus, validating against the label space when given.
pub fn load_corpus(path: &Path, label_space: Option<LabelSpace>) -> Result<Corpus> {
    let records: Vec<CorpusRecord> = read_jsonl(path)?;
    let documents: Vec<Document> = records
        .into_iter()
        .map(|r| Document { id: r.id, text: r.text, codes: r.codes.into_iter().collect() })
        .collect();
    Ok(Corpus::new(documents, label_space)?)
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let records: Vec<CorpusRecord> = corpus
        .documents()
        .iter()
        .map(|d| CorpusRecord {
            id: d.id.clone(),
            text: d.text.clone(),
            codes: d.codes.iter().cloned().collect(),
        })
        .collect();
    write_jsonl(path, &records)
}

pub fn write_label_space(path: &Path, ls: &LabelSpace) -> Result<()> {
    let records: Vec<LabelRecord> = ls
        .codes()
        .iter()
        .map(|c| LabelRecord {
            code: c.clone(),
            description: ls.description(c).unwrap_or(c).to_string(),
        })
        .collect();
    write_jsonl(path, &records)
}

pub fn load_splits(path: &Path) -> Result<BTreeMap<String, Split>> {
    let records: Vec<SplitRecord> = read_jsonl(path)?;
    let mut map = BTreeMap::new();
    for r in records {
        if map.insert(r.id.clone(), r.split).is_some() {
            return Err(CliError::validation(format!(
                "{}: duplicate split assignment for id {:?}",
                path.display(),
                r.id
            )));
        }
    }
    Ok(map)
}

pub fn write_splits(path: &Path, splits: &BTreeMap<String, Split>) -> Result<()> {
    let records: Vec<SplitRecord> =
        splits.iter().map(|(id, split)| SplitRecord { id: id.clone(), split: *split }).collect();
    write_jsonl(path, &records)
}

pub fn load_synonyms(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let records: Vec<SynonymRecord> = read_jsonl(path)?;
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in records {
        map.entry(r.code).or_default().extend(r.synonyms);
    }
    Ok(map)
}

/// Knowledge export: one `KnowledgeEntry` per line.
pub fn load_kb_export(path: &Path) -> Result<Vec<KnowledgeEntry>> {
    read_jsonl(path)
}

pub fn write_kb_export(path: &Path, entries: &[KnowledgeEntry]) -> Result<()> {
    write_jsonl(path, entries)
}

/// Stable identifier of one knowledge entry.
pub fn entry_id(entry: &KnowledgeEntry) -> String {
    format!("{}|{}|{}", entry.code, entry.source.as_str(), &sha256_hex(entry.text.as_bytes())[..12])
}

/// On-disk container for the per-code knowledge matrices.
#[derive(Debug, Serialize, Deserialize)]
pub struct KnowledgeMatrixFile {
    pub version: u32,
    /// Per-code ids of the selected entries, in selection order.
    pub entry_ids: BTreeMap<String, Vec<String>>,
    pub set: KnowledgeMatrixSet,
}

pub fn write_knowledge_matrix(path: &Path, set: &KnowledgeMatrixSet) -> Result<()> {
    let entry_ids = set
        .per_code
        .iter()
        .map(|(code, km)| (code.clone(), km.entries.iter().map(entry_id).collect()))
        .collect();
    write_json(path, &KnowledgeMatrixFile {
        version: KNOWLEDGE_MATRIX_VERSION,
        entry_ids,
        set: set.clone(),
    })
}

/// Load a knowledge matrix file, verifying the config hash it was built
/// under matches the caller's.
pub fn load_knowledge_matrix(path: &Path, expected_hash: &str) -> Result<KnowledgeMatrixSet> {
    let file: KnowledgeMatrixFile = read_json(path)?;
    if file.version != KNOWLEDGE_MATRIX_VERSION {
        return Err(CliError::validation(format!(
            "{}: unsupported knowledge-matrix version {}",
            path.display(),
            file.version
        )));
    }
    if file.set.config_hash != expected_hash {
        return Err(CliError::validation(format!(
            "{}: knowledge matrix was built under config hash {} but the current config hashes to {}; rebuild with `icdex select-knowledge`",
            path.display(),
            file.set.config_hash,
            expected_hash
        )));
    }
    Ok(file.set)
}

/// The trained model with everything needed to run it on new text.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub pipeline: PipelineConfig,
    pub vocab: Vocab,
    pub vocab_hash: String,
    pub label_space: LabelSpace,
    pub state: ModelState,
    pub threshold: Option<f64>,
    pub km_config_hash: String,
    pub best_epoch: usize,
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_json(path, checkpoint)
}

/// Load and verify: version supported, stored vocab hash matches the vocab.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let cp: Checkpoint = read_json(path)?;
    if cp.version != CHECKPOINT_VERSION {
        return Err(CliError::validation(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            cp.version
        )));
    }
    let actual = cp.vocab.hash();
    if actual != cp.vocab_hash {
        return Err(CliError::validation(format!(
            "{}: vocab hash mismatch (stored {}, recomputed {})",
            path.display(),
            cp.vocab_hash,
            actual
        )));
    }
    Ok(cp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use icdex_core::knowledge::Source;
    use icdex_core::tensor::Tensor;

    #[test]
    fn jsonl_parse_error_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"id\":\"a\",\"text\":\"x\",\"codes\":[]}\nnot json\n").unwrap();
        let err = read_jsonl::<CorpusRecord>(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn corpus_round_trip_preserves_documents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"id\":\"d1\",\"text\":\"alpha beta\",\"codes\":[\"B\",\"A\"]}\n{\"id\":\"d2\",\"text\":\"gamma\",\"codes\":[\"A\"]}\n",
        )
        .unwrap();
        let corpus = load_corpus(&path, None).unwrap();
        assert_eq!(corpus.len(), 2);
        let out = dir.path().join("c2.jsonl");
        write_corpus(&out, &corpus).unwrap();
        let reloaded = load_corpus(&out, None).unwrap();
        assert_eq!(corpus, reloaded);
    }

    #[test]
    fn duplicate_corpus_id_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"id\":\"d1\",\"text\":\"x\",\"codes\":[\"A\"]}\n{\"id\":\"d1\",\"text\":\"y\",\"codes\":[\"A\"]}\n",
        )
        .unwrap();
        let err = load_corpus(&path, None).unwrap_err();
        assert!(err.to_string().contains("d1"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn unknown_code_lists_the_offender() {
        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("l.jsonl");
        fs::write(&labels, "{\"code\":\"A\",\"description\":\"alpha\"}\n").unwrap();
        let corpus = dir.path().join("c.jsonl");
        fs::write(&corpus, "{\"id\":\"d1\",\"text\":\"x\",\"codes\":[\"A\",\"X99\"]}\n").unwrap();
        let ls = load_label_space(&labels).unwrap();
        let err = load_corpus(&corpus, Some(ls)).unwrap_err();
        assert!(err.to_string().contains("X99"), "{err}");
    }

    #[test]
    fn knowledge_matrix_reloads_bit_exactly_and_checks_hash() {
        use std::collections::BTreeMap as Map;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("km.json");
        let entry = KnowledgeEntry {
            code: "A".into(),
            source: Source::Umls,
            text: "alpha".into(),
            provenance: "p".into(),
        };
        let km = icdex_core::diversity::KnowledgeMatrix {
            entries: vec![entry],
            matrix: Tensor::from_vec(&[2, 3], vec![0.1, -0.2, 0.3, 0.1, -0.2, 0.3]).unwrap(),
            avg: vec![0.1, -0.2, 0.3],
        };
        let mut per_code = Map::new();
        per_code.insert("A".to_string(), km);
        let set = KnowledgeMatrixSet { m: 2, d: 3, config_hash: "h1".into(), per_code };
        write_knowledge_matrix(&path, &set).unwrap();
        let loaded = load_knowledge_matrix(&path, "h1").unwrap();
        assert_eq!(loaded, set);
        let err = load_knowledge_matrix(&path, "other").unwrap_err();
        assert!(err.to_string().contains("config hash"), "{err}");
    }
}
