//! Documents, label spaces, vocabularies, chunking, and split application.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

/// A labeled clinical note.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub codes: BTreeSet<String>,
}

/// The fixed, ordered code set every matrix row and metric index refers to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    codes: Vec<String>,
    descriptions: BTreeMap<String, String>,
}

impl LabelSpace {
    /// Build from `(code, description)` pairs; order is preserved and final.
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(CoreError::EmptyLabelSpace);
        }
        let mut codes = Vec::with_capacity(pairs.len());
        let mut descriptions = BTreeMap::new();
        for (code, description) in pairs {
            if description.trim().is_empty() {
                return Err(CoreError::EmptyDescription(code));
            }
            if descriptions.insert(code.clone(), description).is_some() {
                return Err(CoreError::DuplicateLabel(code));
            }
            codes.push(code);
        }
        Ok(LabelSpace { codes, descriptions })
    }

    /// Derive a label space from bare codes; the code doubles as description.
    pub fn from_codes(codes: impl IntoIterator<Item = String>) -> Result<Self> {
        Self::new(codes.into_iter().map(|c| (c.clone(), c)).collect())
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn contains(&self, code: &str) -> bool {
        self.descriptions.contains_key(code)
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.codes.iter().position(|c| c == code)
    }

    pub fn description(&self, code: &str) -> Option<&str> {
        self.descriptions.get(code).map(String::as_str)
    }
}

/// An immutable set of documents over one label space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    documents: Vec<Document>,
    label_space: LabelSpace,
}

impl Corpus {
    /// Validate documents against a provided label space, or derive one from
    /// the union of document codes (sorted) when none is given.
    pub fn new(documents: Vec<Document>, label_space: Option<LabelSpace>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for doc in &documents {
            if !seen.insert(doc.id.clone()) {
                return Err(CoreError::DuplicateDocId(doc.id.clone()));
            }
        }
        let label_space = match label_space {
            Some(ls) => {
                let mut offending: Vec<String> = Vec::new();
                for doc in &documents {
                    for code in &doc.codes {
                        if !ls.contains(code) && !offending.contains(code) {
                            offending.push(code.clone());
                        }
                    }
                }
                if !offending.is_empty() {
                    offending.sort();
                    return Err(CoreError::UnknownCodes(offending));
                }
                ls
            }
            None => {
                let union: BTreeSet<String> =
                    documents.iter().flat_map(|d| d.codes.iter().cloned()).collect();
                LabelSpace::from_codes(union)?
            }
        };
        Ok(Corpus { documents, label_space })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Gold labels of a document as a 0/1 vector in label-space order.
    pub fn gold_vector(&self, doc: &Document) -> Vec<f64> {
        self.label_space
            .codes()
            .iter()
            .map(|c| if doc.codes.contains(c) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Corpus partition names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Result of applying an externally supplied split assignment.
#[derive(Debug)]
pub struct SplitCorpora {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    pub warnings: Vec<String>,
}

/// Partition a corpus by the given id -> split map.
///
/// Every document must be assigned and every assignment must refer to a
/// document. Empty dev/test partitions are permitted with a warning.
pub fn split(corpus: &Corpus, assignment: &BTreeMap<String, Split>) -> Result<SplitCorpora> {
    for id in assignment.keys() {
        if !corpus.documents().iter().any(|d| &d.id == id) {
            return Err(CoreError::UnknownSplitDoc(id.clone()));
        }
    }
    let mut parts: [Vec<Document>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for doc in corpus.documents() {
        match assignment.get(&doc.id) {
            Some(Split::Train) => parts[0].push(doc.clone()),
            Some(Split::Dev) => parts[1].push(doc.clone()),
            Some(Split::Test) => parts[2].push(doc.clone()),
            None => return Err(CoreError::UnassignedDoc(doc.id.clone())),
        }
    }
    let mut warnings = Vec::new();
    for (name, part) in [("dev", &parts[1]), ("test", &parts[2])] {
        if part.is_empty() {
            warnings.push(format!("{} split is empty", name));
        }
    }
    let ls = corpus.label_space().clone();
    let [train, dev, test] = parts;
    Ok(SplitCorpora {
        train: Corpus { documents: train, label_space: ls.clone() },
        dev: Corpus { documents: dev, label_space: ls.clone() },
        test: Corpus { documents: test, label_space: ls },
        warnings,
    })
}

/// Special token ids are fixed: pad 0, unknown 1, cls 2.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;

/// Lowercase whitespace vocabulary with dense ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Build over lowercased whitespace tokens occurring at least `min_freq`
    /// times, plus the three specials. Token ids follow lexicographic order.
    pub fn build(corpus: &Corpus, min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(CoreError::EmptyCorpus);
        }
        let min_freq = min_freq.max(1);
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for doc in corpus.documents() {
            for tok in doc.text.split_whitespace() {
                *freq.entry(tok.to_lowercase()).or_insert(0) += 1;
            }
        }
        let mut id_to_token: Vec<String> =
            vec!["<pad>".to_string(), "<unk>".to_string(), "<cls>".to_string()];
        id_to_token.extend(freq.into_iter().filter(|(_, n)| *n >= min_freq).map(|(t, _)| t));
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { token_to_id, id_to_token })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Lowercased whitespace tokens mapped to ids; unknown tokens map to
    /// [`UNK_ID`]. Empty text gives an empty sequence.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.id(&t.to_lowercase()).unwrap_or(UNK_ID))
            .collect()
    }

    /// Content hash binding checkpoints and knowledge matrices to a vocab.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for tok in &self.id_to_token {
            h.update(tok.as_bytes());
            h.update([0u8]);
        }
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{:02x}", b));
    }
    s
}

/// A fixed-length token window of one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub index: usize,
    pub token_ids: Vec<usize>,
    /// True at real-token positions, false on padding.
    pub mask: Vec<bool>,
}

impl Chunk {
    pub fn content_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Cut a token sequence into consecutive non-overlapping windows.
///
/// The sequence is truncated to `max_length`; the last window is padded with
/// [`PAD_ID`]. An empty sequence still yields one all-padding chunk so batch
/// shapes stay uniform.
pub fn chunk(
    doc_id: &str,
    token_ids: &[usize],
    chunk_size: usize,
    max_length: usize,
) -> Result<Vec<Chunk>> {
    chunk_with_stride(doc_id, token_ids, chunk_size, chunk_size, max_length)
}

/// Chunking with an explicit stride (stride == chunk_size means no overlap).
pub fn chunk_with_stride(
    doc_id: &str,
    token_ids: &[usize],
    chunk_size: usize,
    stride: usize,
    max_length: usize,
) -> Result<Vec<Chunk>> {
    if chunk_size == 0 || max_length == 0 || max_length % chunk_size != 0 {
        return Err(CoreError::BadChunkConfig { chunk_size, max_length });
    }
    if stride == 0 || stride > chunk_size {
        return Err(CoreError::BadStride { stride, chunk_size });
    }
    let len = token_ids.len().min(max_length);
    let ids = &token_ids[..len];
    let mut chunks = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + chunk_size).min(len);
        let mut window: Vec<usize> = ids[start..end].to_vec();
        let content = window.len();
        window.resize(chunk_size, PAD_ID);
        let mut mask = vec![true; content];
        mask.resize(chunk_size, false);
        chunks.push(Chunk {
            doc_id: doc_id.to_string(),
            index: chunks.len(),
            token_ids: window,
            mask,
        });
        start += stride;
        if start >= len {
            break;
        }
    }
    Ok(chunks)
}
