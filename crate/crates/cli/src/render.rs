//! Trace report rendering: machine-readable JSON and a static page with
//! source-colored knowledge entries and highlighted text spans.

use std::path::Path;

use icdex_core::knowledge::Source;
use icdex_core::trace::{lexical_overlap, TraceReport};

use crate::error::Result;
use crate::formats::{write_atomic, write_json};

/// JSON render mirroring `TraceReport` exactly.
pub fn render_structured(report: &TraceReport, path: &Path) -> Result<()> {
    write_json(path, report)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Embolden tokens of `text` that also occur in any evidence span.
fn bold_overlaps(text: &str, span_texts: &[String]) -> String {
    let overlap: std::collections::BTreeSet<String> = span_texts
        .iter()
        .flat_map(|s| lexical_overlap(s, text))
        .collect();
    text.split_whitespace()
        .map(|tok| {
            if overlap.contains(&tok.to_lowercase()) {
                format!("<b><u>{}</u></b>", escape(tok))
            } else {
                escape(tok)
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn source_class(source: Source) -> &'static str {
    match source {
        Source::Umls => "umls",
        Source::Wikipedia => "wikipedia",
        Source::Llm => "llm",
    }
}

/// Static page: document text, then per predicted code the weighted spans
/// (one `<mark>` per span) and knowledge entries colored by source
/// (umls red, wikipedia blue, llm green).
pub fn render_html(report: &TraceReport, doc_text: &str) -> String {
    let mut page = String::new();
    page.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">\n");
    page.push_str(&format!("<title>trace {}</title>\n", escape(&report.doc_id)));
    page.push_str(
        "<style>\n\
         body { font-family: sans-serif; margin: 2em; max-width: 70em; }\n\
         .doc { background: #f7f7f7; padding: 1em; white-space: pre-wrap; }\n\
         mark.lsa { background: #ffe08a; }\n\
         mark.lcca { background: #b5e2ff; }\n\
         li.umls { color: #b02020; }\n\
         li.wikipedia { color: #2040b0; }\n\
         li.llm { color: #207530; }\n\
         .weight { color: #666; font-size: 0.85em; }\n\
         </style></head><body>\n",
    );
    page.push_str(&format!("<h1>Document {}</h1>\n", escape(&report.doc_id)));
    page.push_str(&format!(
        "<p>decision threshold {:.2}; {} predicted code(s)</p>\n",
        report.threshold,
        report.codes.len()
    ));
    page.push_str(&format!("<div class=\"doc\">{}</div>\n", escape(doc_text)));
    for code in &report.codes {
        page.push_str(&format!(
            "<h2>{} — {} <span class=\"weight\">p = {:.4}</span></h2>\n",
            escape(&code.code),
            escape(&code.description),
            code.probability
        ));
        page.push_str("<h3>Text evidence</h3>\n<ul>\n");
        for span in &code.text_evidence {
            page.push_str(&format!(
                "<li><mark class=\"{}\">{}</mark> <span class=\"weight\">chunk {}, tokens [{}, {}), {:?}, weight {:.6}</span></li>\n",
                match span.mechanism {
                    icdex_core::trace::Mechanism::Lsa => "lsa",
                    icdex_core::trace::Mechanism::Lcca => "lcca",
                },
                escape(&span.text),
                span.chunk_index,
                span.start,
                span.end,
                span.mechanism,
                span.weight
            ));
        }
        page.push_str("</ul>\n");
        let span_texts: Vec<String> =
            code.text_evidence.iter().map(|s| s.text.clone()).collect();
        page.push_str("<h3>Knowledge evidence</h3>\n<ul>\n");
        for k in &code.knowledge_evidence {
            page.push_str(&format!(
                "<li class=\"{}\">{} <span class=\"weight\">[{}] {} weight {:.6}</span></li>\n",
                source_class(k.source),
                bold_overlaps(&k.text, &span_texts),
                k.source.as_str(),
                escape(&k.provenance),
                k.weight
            ));
        }
        page.push_str("</ul>\n");
    }
    page.push_str("</body></html>\n");
    page
}

/// Write the readable report.
pub fn render_readable(report: &TraceReport, doc_text: &str, path: &Path) -> Result<()> {
    write_atomic(path, render_html(report, doc_text).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use icdex_core::trace::{CodeTrace, KnowledgeEvidence, Mechanism, SpanEvidence};

    fn sample_report() -> TraceReport {
        TraceReport {
            doc_id: "doc1".into(),
            threshold: 0.4,
            top_k_spans: 3,
            top_k_knowledge: 4,
            config_hash: "h".into(),
            codes: vec![CodeTrace {
                code: "C001".into(),
                description: "w3 w4 w5".into(),
                probability: 0.91,
                text_evidence: vec![
                    SpanEvidence {
                        chunk_index: 0,
                        start: 2,
                        end: 4,
                        text: "w3 w4".into(),
                        mechanism: Mechanism::Lsa,
                        weight: 0.42,
                    },
                    SpanEvidence {
                        chunk_index: 1,
                        start: 0,
                        end: 1,
                        text: "w5".into(),
                        mechanism: Mechanism::Lcca,
                        weight: 0.3,
                    },
                ],
                knowledge_evidence: vec![KnowledgeEvidence {
                    text: "w3 w4 syndrome".into(),
                    source: Source::Llm,
                    provenance: "llm:test".into(),
                    weight: 0.8,
                }],
            }],
        }
    }

    #[test]
    fn structured_render_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let report = sample_report();
        render_structured(&report, &path).unwrap();
        let loaded: TraceReport = crate::formats::read_json(&path).unwrap();
        assert_eq!(loaded, report);
    }

    #[test]
    fn readable_render_has_one_mark_per_span_and_source_colors() {
        let report = sample_report();
        let html = render_html(&report, "w0 w1 w3 w4 w5");
        assert_eq!(html.matches("<mark").count(), report.codes[0].text_evidence.len());
        assert!(html.contains("li.umls") && html.contains("li.wikipedia") && html.contains("li.llm"));
        assert!(html.contains("class=\"llm\""));
        // overlap tokens bolded inside knowledge entries
        assert!(html.contains("<b><u>w3</u></b>"));
    }

    #[test]
    fn empty_report_is_still_a_valid_page() {
        let report = TraceReport {
            doc_id: "d".into(),
            threshold: 1.0,
            top_k_spans: 3,
            top_k_knowledge: 3,
            config_hash: "h".into(),
            codes: vec![],
        };
        let html = render_html(&report, "text");
        assert!(html.contains("0 predicted code(s)"));
        assert_eq!(html.matches("<mark").count(), 0);
    }
}
