//! Evidence extraction: turn a forward pass into a trace report that grounds
//! each predicted code in weighted text spans and attributed knowledge
//! entries.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, LabelSpace, Vocab};
use crate::diversity::KnowledgeMatrixSet;
use crate::error::{CoreError, Result};
use crate::knowledge::Source;
use crate::model::ForwardOutput;
use crate::tensor::Tensor;

/// Which attention mechanism produced a text span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Lsa,
    Lcca,
}

/// A contiguous high-attention token run inside one chunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanEvidence {
    pub chunk_index: usize,
    /// Token span `[start, end)` in chunk-local positions.
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub mechanism: Mechanism,
    /// Sum of the span's per-token attention weights.
    pub weight: f64,
}

/// One knowledge-matrix row with its aggregated attention score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEvidence {
    pub text: String,
    pub source: Source,
    pub provenance: String,
    /// Peak attention weight of this entry's query row over the document.
    pub weight: f64,
}

/// Evidence for one predicted code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeTrace {
    pub code: String,
    pub description: String,
    pub probability: f64,
    pub text_evidence: Vec<SpanEvidence>,
    pub knowledge_evidence: Vec<KnowledgeEvidence>,
}

/// The full per-document report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub doc_id: String,
    pub threshold: f64,
    pub top_k_spans: usize,
    pub top_k_knowledge: usize,
    pub config_hash: String,
    pub codes: Vec<CodeTrace>,
}

/// Lower-interpolation 90th-percentile cutoff; tokens must score strictly
/// above it. The lower variant keeps short documents from degenerating to
/// "cutoff == max, no spans".
fn percentile_90(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    let idx = 9 * (values.len() - 1) / 10;
    values[idx]
}

fn spans_for_mechanism(
    label: usize,
    weights: &[Tensor],
    chunks: &[Chunk],
    vocab: &Vocab,
    mechanism: Mechanism,
    top_k: usize,
) -> Vec<SpanEvidence> {
    let mut all: Vec<f64> = Vec::new();
    for (w, chunk) in weights.iter().zip(chunks) {
        for (pos, keep) in chunk.mask.iter().enumerate() {
            if *keep {
                all.push(w.at2(label, pos));
            }
        }
    }
    if all.is_empty() {
        return Vec::new();
    }
    let cutoff = percentile_90(all);
    let mut spans = Vec::new();
    for (w, chunk) in weights.iter().zip(chunks) {
        let mut start = None;
        let mut weight_sum = 0.0;
        for pos in 0..chunk.mask.len() {
            let selected = chunk.mask[pos] && w.at2(label, pos) > cutoff;
            if selected {
                if start.is_none() {
                    start = Some(pos);
                    weight_sum = 0.0;
                }
                weight_sum += w.at2(label, pos);
            }
            let at_end = pos + 1 == chunk.mask.len();
            if let Some(s) = start {
                if !selected || at_end {
                    let end = if selected && at_end { pos + 1 } else { pos };
                    let text: Vec<&str> = chunk.token_ids[s..end]
                        .iter()
                        .map(|&id| vocab.token(id).unwrap_or("<unk>"))
                        .collect();
                    spans.push(SpanEvidence {
                        chunk_index: chunk.index,
                        start: s,
                        end,
                        text: text.join(" "),
                        mechanism,
                        weight: weight_sum,
                    });
                    start = None;
                }
            }
        }
    }
    spans.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .expect("finite weights")
            .then(a.chunk_index.cmp(&b.chunk_index))
            .then(a.start.cmp(&b.start))
    });
    spans.truncate(top_k);
    spans
}

/// Build the trace for one document from its forward-pass artifacts.
///
/// Codes with probability at or above the threshold are included. Text
/// evidence keeps, per mechanism, the `top_k_spans` maximal token runs whose
/// per-token weight exceeds the code's 90th-percentile weight. Knowledge
/// evidence ranks the code's knowledge rows by their peak attention weight
/// over the document.
#[allow(clippy::too_many_arguments)]
pub fn build_trace(
    doc_id: &str,
    output: &ForwardOutput,
    label_space: &LabelSpace,
    knowledge: &KnowledgeMatrixSet,
    chunks: &[Chunk],
    vocab: &Vocab,
    threshold: f64,
    top_k_spans: usize,
    top_k_knowledge: usize,
    config_hash: &str,
) -> Result<TraceReport> {
    if output.probs.len() != label_space.len() {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "{} probabilities vs {} labels",
            output.probs.len(),
            label_space.len()
        )));
    }
    let mut order: Vec<usize> = (0..label_space.len())
        .filter(|&l| output.probs[l] >= threshold)
        .collect();
    order.sort_by(|&a, &b| {
        output.probs[b].partial_cmp(&output.probs[a]).expect("finite probs").then(a.cmp(&b))
    });

    let mut codes = Vec::new();
    for l in order {
        let code = &label_space.codes()[l];
        let mut text_evidence =
            spans_for_mechanism(l, &output.lsa_weights, chunks, vocab, Mechanism::Lsa, top_k_spans);
        text_evidence.extend(spans_for_mechanism(
            l,
            &output.lcca_weights,
            chunks,
            vocab,
            Mechanism::Lcca,
            top_k_spans,
        ));
        text_evidence.sort_by(|a, b| b.weight.partial_cmp(&a.weight).expect("finite weights"));

        let mut knowledge_evidence = Vec::new();
        if let Some(kw) = &output.kcca_weights {
            let km = knowledge
                .get(code)
                .ok_or_else(|| CoreError::MissingKnowledge(code.clone()))?;
            let positions = kw.shape()[2];
            for r in 0..kw.shape()[1] {
                let mut peak = 0.0f64;
                for p in 0..positions {
                    peak = peak.max(kw.at3(l, r, p));
                }
                let entry = km.entry_for_row(r);
                knowledge_evidence.push(KnowledgeEvidence {
                    text: entry.text.clone(),
                    source: entry.source,
                    provenance: entry.provenance.clone(),
                    weight: peak,
                });
            }
            knowledge_evidence
                .sort_by(|a, b| b.weight.partial_cmp(&a.weight).expect("finite weights"));
            knowledge_evidence.truncate(top_k_knowledge);
        }

        codes.push(CodeTrace {
            code: code.clone(),
            description: label_space.description(code).unwrap_or("").to_string(),
            probability: output.probs[l],
            text_evidence,
            knowledge_evidence,
        });
    }
    Ok(TraceReport {
        doc_id: doc_id.to_string(),
        threshold,
        top_k_spans,
        top_k_knowledge,
        config_hash: config_hash.to_string(),
        codes,
    })
}

/// Case-insensitive token overlap between a span and a knowledge entry
/// (presentation feature for the readable report).
pub fn lexical_overlap(span_text: &str, entry_text: &str) -> Vec<String> {
    let entry_tokens: alloc::collections::BTreeSet<String> =
        entry_text.split_whitespace().map(|t| t.to_lowercase()).collect();
    let mut seen = alloc::collections::BTreeSet::new();
    span_text
        .split_whitespace()
        .map(|t| t.to_lowercase())
        .filter(|t| entry_tokens.contains(t) && seen.insert(t.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Document};

    #[test]
    fn percentile_uses_lower_interpolation() {
        assert_eq!(percentile_90((1..=10).map(|v| v as f64).collect()), 9.0);
        assert_eq!(percentile_90(alloc::vec![5.0]), 5.0);
        assert_eq!(percentile_90(alloc::vec![2.0, 1.0]), 1.0);
    }

    fn test_vocab() -> Vocab {
        let doc = Document {
            id: "d".to_string(),
            text: "aa bb cc dd ee ff gg hh".to_string(),
            codes: ["X".to_string()].into_iter().collect(),
        };
        Vocab::build(&Corpus::new(alloc::vec![doc], None).unwrap(), 1).unwrap()
    }

    #[test]
    fn spans_merge_contiguous_high_weight_runs() {
        let vocab = test_vocab();
        let ids = vocab.tokenize("aa bb cc dd ee ff gg hh");
        let chunks = crate::corpus::chunk("d", &ids, 8, 8).unwrap();
        // weights: positions 2,3 high, 6 high, rest low
        let mut w = Tensor::zeros(&[1, 8]);
        for (pos, v) in [(0, 0.01), (1, 0.02), (2, 0.3), (3, 0.25), (4, 0.01), (5, 0.02), (6, 0.28), (7, 0.01)] {
            w.set2(0, pos, v);
        }
        let spans = spans_for_mechanism(0, &[w], &chunks, &vocab, Mechanism::Lsa, 5);
        // cutoff over 8 weights = 7th smallest = 0.28; only 0.3 survives
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start, spans[0].end), (2, 3));
        assert_eq!(spans[0].text, "cc");
    }

    #[test]
    fn spans_ignore_padding_positions() {
        let vocab = test_vocab();
        let ids = vocab.tokenize("aa bb cc");
        let chunks = crate::corpus::chunk("d", &ids, 8, 8).unwrap();
        let mut w = Tensor::zeros(&[1, 8]);
        w.set2(0, 0, 0.5);
        w.set2(0, 1, 0.3);
        w.set2(0, 2, 0.2);
        // padding positions keep weight zero by construction upstream
        let spans = spans_for_mechanism(0, &[w], &chunks, &vocab, Mechanism::Lcca, 5);
        for s in &spans {
            assert!(s.end <= 3);
        }
    }

    #[test]
    fn lexical_overlap_is_case_insensitive() {
        let overlap = lexical_overlap("Elevated Glucose level", "glucose elevated daily");
        assert_eq!(overlap, alloc::vec!["elevated".to_string(), "glucose".to_string()]);
    }
}
