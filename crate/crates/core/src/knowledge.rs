//! Knowledge entries from UMLS synonyms, Wikipedia prose, and LLM output,
//! normalized into one per-code store.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSpace;
use crate::error::{CoreError, Result};

/// Where a knowledge entry came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Umls,
    Wikipedia,
    Llm,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Umls => "umls",
            Source::Wikipedia => "wikipedia",
            Source::Llm => "llm",
        }
    }

    pub fn parse(s: &str) -> Option<Source> {
        match s {
            "umls" => Some(Source::Umls),
            "wikipedia" => Some(Source::Wikipedia),
            "llm" => Some(Source::Llm),
            _ => None,
        }
    }

    pub const ALL: [Source; 3] = [Source::Umls, Source::Wikipedia, Source::Llm];
}

/// One textual knowledge item for one code.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub code: String,
    pub source: Source,
    pub text: String,
    pub provenance: String,
}

/// Synonym cleanup: keep letters, digits, spaces, hyphens, and parentheses;
/// drop standalone "and"/"or" tokens; collapse whitespace.
///
/// Returns `None` when nothing survives, which tells the caller to discard
/// the entry. Idempotent.
pub fn preprocess_synonym(text: &str) -> Option<String> {
    let filtered: String = text
        .chars()
        .filter(|c| {
            c.is_alphanumeric() || *c == '-' || *c == '(' || *c == ')' || c.is_whitespace()
        })
        .collect();
    let kept: Vec<&str> = filtered
        .split_whitespace()
        .filter(|t| !t.eq_ignore_ascii_case("and") && !t.eq_ignore_ascii_case("or"))
        .collect();
    if kept.is_empty() {
        None
    } else {
        Some(kept.join(" "))
    }
}

/// Naive sentence splitter for Wikipedia/LLM prose.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch == '.' || ch == '!' || ch == '?' || ch == '\n' {
            let s = current.trim();
            if !s.is_empty() {
                sentences.push(s.to_string());
            }
            current.clear();
        } else {
            current.push(ch);
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        sentences.push(s.to_string());
    }
    sentences
}

fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() <= max_tokens {
        text.trim().to_string()
    } else {
        toks[..max_tokens].join(" ")
    }
}

/// Build UMLS-tagged entries from a code -> raw synonym list map.
///
/// Synonyms are preprocessed, empties dropped, codes outside the label space
/// skipped (and counted).
pub fn umls_entries_from_synonyms(
    label_space: &LabelSpace,
    synonyms: &BTreeMap<String, Vec<String>>,
    provenance: &str,
) -> (Vec<KnowledgeEntry>, usize) {
    let mut entries = Vec::new();
    let mut skipped = 0;
    for (code, raws) in synonyms {
        if !label_space.contains(code) {
            skipped += 1;
            continue;
        }
        for raw in raws {
            if let Some(text) = preprocess_synonym(raw) {
                entries.push(KnowledgeEntry {
                    code: code.clone(),
                    source: Source::Umls,
                    text,
                    provenance: provenance.to_string(),
                });
            }
        }
    }
    (entries, skipped)
}

/// Split prose into sentence-level entries for one code.
///
/// `max_tokens` truncates each sentence (used by the LLM source). Sentences
/// whose preprocessed form is empty are dropped.
pub fn entries_from_prose(
    code: &str,
    source: Source,
    text: &str,
    provenance: &str,
    max_tokens: Option<usize>,
) -> Vec<KnowledgeEntry> {
    split_sentences(text)
        .into_iter()
        .map(|s| match max_tokens {
            Some(m) => truncate_tokens(&s, m),
            None => s,
        })
        .filter(|s| preprocess_synonym(s).is_some())
        .map(|s| KnowledgeEntry {
            code: code.to_string(),
            source,
            text: s,
            provenance: provenance.to_string(),
        })
        .collect()
}

/// Per-code knowledge store with per-source counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    entries: BTreeMap<String, Vec<KnowledgeEntry>>,
    counts: BTreeMap<String, BTreeMap<Source, usize>>,
}

impl KnowledgeBase {
    /// Merge entries from the enabled sources, deduplicate on
    /// `(code, source, text)`, and inject the code description as a fallback
    /// entry for every label-space code. Output order is canonical
    /// (sorted by code, source, text) regardless of input order.
    pub fn build(
        label_space: &LabelSpace,
        sources: &BTreeSet<Source>,
        raw: Vec<KnowledgeEntry>,
    ) -> Result<KnowledgeBase> {
        if label_space.is_empty() {
            return Err(CoreError::EmptyLabelSpace);
        }
        let mut dedup: BTreeSet<(String, Source, String)> = BTreeSet::new();
        let mut entries: BTreeMap<String, Vec<KnowledgeEntry>> = BTreeMap::new();
        for code in label_space.codes() {
            entries.insert(code.clone(), Vec::new());
        }
        let mut selected: Vec<KnowledgeEntry> = raw
            .into_iter()
            .filter(|e| sources.contains(&e.source) && label_space.contains(&e.code))
            .collect();
        // Fallback description entries, always present.
        for code in label_space.codes() {
            let description = label_space.description(code).unwrap_or(code);
            let text = preprocess_synonym(description).unwrap_or_else(|| code.clone());
            selected.push(KnowledgeEntry {
                code: code.clone(),
                source: Source::Umls,
                text,
                provenance: "fallback:description".to_string(),
            });
        }
        selected.sort();
        let mut counts: BTreeMap<String, BTreeMap<Source, usize>> = BTreeMap::new();
        for entry in selected {
            let key = (entry.code.clone(), entry.source, entry.text.clone());
            if !dedup.insert(key) {
                continue;
            }
            *counts
                .entry(entry.code.clone())
                .or_default()
                .entry(entry.source)
                .or_insert(0) += 1;
            entries.get_mut(&entry.code).expect("code pre-seeded").push(entry);
        }
        Ok(KnowledgeBase { entries, counts })
    }

    pub fn codes(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn entries_for(&self, code: &str) -> &[KnowledgeEntry] {
        self.entries.get(code).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all_entries(&self) -> impl Iterator<Item = &KnowledgeEntry> {
        self.entries.values().flatten()
    }

    pub fn count(&self, code: &str, source: Source) -> usize {
        self.counts.get(code).and_then(|m| m.get(&source)).copied().unwrap_or(0)
    }

    /// Total entries per source across all codes.
    pub fn source_totals(&self) -> BTreeMap<Source, usize> {
        let mut totals = BTreeMap::new();
        for per_code in self.counts.values() {
            for (s, n) in per_code {
                *totals.entry(*s).or_insert(0) += n;
            }
        }
        totals
    }

    pub fn total_entries(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}
