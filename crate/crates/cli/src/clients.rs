//! Remote knowledge clients: a Wikipedia summary fetcher and an LLM prompt
//! client, both behind an injectable transport and a disk cache that is
//! always consulted before the network, so warm-cache runs are offline and
//! reproducible.

use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use icdex_core::knowledge::{entries_from_prose, KnowledgeEntry, Source};

use crate::config::{sha256_hex, LlmSection, WikipediaSection};
use crate::error::{CliError, Result};
use crate::formats::write_atomic;

/// Transport outcome distinguishing "page missing" from real failures.
#[derive(Debug)]
pub enum TransportError {
    NotFound,
    Failed(String),
}

/// Minimal HTTP surface the clients need.
pub trait Transport {
    fn get(&self, url: &str, timeout: Duration) -> std::result::Result<String, TransportError>;
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> std::result::Result<String, TransportError>;
}

/// Production transport backed by ureq.
pub struct HttpTransport;

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into()
}

impl Transport for HttpTransport {
    fn get(&self, url: &str, timeout: Duration) -> std::result::Result<String, TransportError> {
        match agent(timeout).get(url).call() {
            Ok(mut res) => res
                .body_mut()
                .read_to_string()
                .map_err(|e| TransportError::Failed(e.to_string())),
            Err(ureq::Error::StatusCode(404)) => Err(TransportError::NotFound),
            Err(e) => Err(TransportError::Failed(e.to_string())),
        }
    }

    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> std::result::Result<String, TransportError> {
        let mut req = agent(timeout).post(url).header("content-type", "application/json");
        if let Some(key) = bearer {
            req = req.header("authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(mut res) => res
                .body_mut()
                .read_to_string()
                .map_err(|e| TransportError::Failed(e.to_string())),
            Err(ureq::Error::StatusCode(404)) => Err(TransportError::NotFound),
            Err(e) => Err(TransportError::Failed(e.to_string())),
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn cache_read<T: serde::de::DeserializeOwned>(path: &Path) -> Option<T> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn cache_write<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::runtime(format!("cache encode: {e}")))?;
    write_atomic(path, &bytes)
}

fn retry<T>(
    retries: usize,
    mut attempt: impl FnMut() -> std::result::Result<T, TransportError>,
) -> std::result::Result<T, TransportError> {
    let mut last = None;
    for _ in 0..=retries {
        match attempt() {
            Ok(v) => return Ok(v),
            Err(TransportError::NotFound) => return Err(TransportError::NotFound),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or(TransportError::Failed("no attempts made".into())))
}

/// Wikipedia page titles with spaces use underscores; everything outside the
/// unreserved set is percent-encoded.
fn encode_title(title: &str) -> String {
    let mut out = String::new();
    for b in title.replace(' ', "_").bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => {
                out.push(b as char)
            }
            _ => out.push_str(&format!("%{:02X}", b)),
        }
    }
    out
}

fn cache_file_for_title(dir: &Path, title: &str) -> PathBuf {
    let safe: String = title
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    dir.join(format!("{}_{}.json", safe, &sha256_hex(title.as_bytes())[..8]))
}

#[derive(Serialize, Deserialize)]
struct WikiCacheEntry {
    title: String,
    url: String,
    /// Empty extract records a miss (404), so misses are cached too.
    extract: String,
    fetched_at: u64,
}

/// Per-title summary fetcher with a disk cache.
pub struct WikipediaClient<'a> {
    pub config: &'a WikipediaSection,
    pub cache_dir: PathBuf,
    pub transport: &'a dyn Transport,
    /// Cache-only mode: misses are recorded, the network is never touched.
    pub offline: bool,
}

/// Outcome counters surfaced by build-kb.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct FetchStats {
    pub hits: usize,
    pub fetched: usize,
    pub misses: usize,
}

impl<'a> WikipediaClient<'a> {
    /// Sentence-level entries for one code's page title.
    pub fn fetch(
        &self,
        code: &str,
        title: &str,
        stats: &mut FetchStats,
    ) -> Result<Vec<KnowledgeEntry>> {
        let cache_path = cache_file_for_title(&self.cache_dir, title);
        let cached: Option<WikiCacheEntry> = cache_read(&cache_path);
        let entry = match cached {
            Some(e) => {
                stats.hits += 1;
                e
            }
            None if self.offline => {
                stats.misses += 1;
                return Ok(Vec::new());
            }
            None => {
                let url = format!("{}/{}", self.config.endpoint.trim_end_matches('/'), encode_title(title));
                let timeout = Duration::from_secs(self.config.timeout_s);
                let body = retry(self.config.retries, || self.transport.get(&url, timeout));
                let extract = match body {
                    Ok(text) => {
                        let json: serde_json::Value = serde_json::from_str(&text)
                            .map_err(|e| CliError::runtime(format!("wikipedia {title:?}: {e}")))?;
                        json.get("extract").and_then(|v| v.as_str()).unwrap_or("").to_string()
                    }
                    Err(TransportError::NotFound) => String::new(),
                    Err(TransportError::Failed(e)) => {
                        return Err(CliError::runtime(format!(
                            "wikipedia fetch failed for code {code} title {title:?} after {} retries: {e}",
                            self.config.retries
                        )))
                    }
                };
                let entry = WikiCacheEntry {
                    title: title.to_string(),
                    url,
                    extract,
                    fetched_at: unix_now(),
                };
                cache_write(&cache_path, &entry)?;
                stats.fetched += 1;
                entry
            }
        };
        if entry.extract.is_empty() {
            stats.misses += 1;
            return Ok(Vec::new());
        }
        let provenance = format!("wikipedia:{}@{}", entry.url, entry.fetched_at);
        Ok(entries_from_prose(code, Source::Wikipedia, &entry.extract, &provenance, None))
    }
}

/// Shipped default prompt; a versioned template file can replace it.
pub const DEFAULT_PROMPT_TEMPLATE: &str = "List the clinical definition, typical symptoms, and characteristic laboratory findings for ICD code {code} ({description}). Answer in short factual sentences.";

#[derive(Serialize, Deserialize)]
struct LlmCacheEntry {
    model: String,
    template_hash: String,
    code: String,
    request: serde_json::Value,
    response_text: String,
    fetched_at: u64,
}

/// Prompting client with a disk cache keyed by (model, template hash, code).
pub struct LlmClient<'a> {
    pub config: &'a LlmSection,
    pub cache_dir: PathBuf,
    pub transport: &'a dyn Transport,
    pub offline: bool,
    pub template: String,
    pub max_sentence_tokens: usize,
}

impl<'a> LlmClient<'a> {
    pub fn new(
        config: &'a LlmSection,
        cache_dir: PathBuf,
        transport: &'a dyn Transport,
        offline: bool,
        max_sentence_tokens: usize,
    ) -> Result<Self> {
        let template = match &config.prompt_template_path {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| CliError::validation(format!("{}: {}", path.display(), e)))?,
            None => DEFAULT_PROMPT_TEMPLATE.to_string(),
        };
        if !template.contains("{code}") || !template.contains("{description}") {
            return Err(CliError::validation(
                "prompt template must contain {code} and {description} placeholders".to_string(),
            ));
        }
        Ok(LlmClient { config, cache_dir, transport, offline, template, max_sentence_tokens })
    }

    pub fn template_hash(&self) -> String {
        sha256_hex(self.template.as_bytes())
    }

    fn cache_path(&self, code: &str) -> PathBuf {
        let key = sha256_hex(
            format!("{}|{}|{}", self.config.model, self.template_hash(), code).as_bytes(),
        );
        self.cache_dir.join(format!("{}.json", &key[..24]))
    }

    /// Sentence-level entries (each capped in token length) for one code.
    pub fn query(
        &self,
        code: &str,
        description: &str,
        stats: &mut FetchStats,
    ) -> Result<Vec<KnowledgeEntry>> {
        let cache_path = self.cache_path(code);
        let cached: Option<LlmCacheEntry> = cache_read(&cache_path);
        let entry = match cached {
            Some(e) => {
                stats.hits += 1;
                e
            }
            None if self.offline => {
                stats.misses += 1;
                return Ok(Vec::new());
            }
            None => {
                let prompt = self
                    .template
                    .replace("{code}", code)
                    .replace("{description}", description);
                let request = serde_json::json!({
                    "model": self.config.model,
                    "messages": [{"role": "user", "content": prompt}],
                    "temperature": self.config.temperature,
                    "max_tokens": self.config.max_tokens,
                });
                let key = std::env::var(&self.config.api_key_env).map_err(|_| {
                    CliError::validation(format!(
                        "environment variable {} (llm api key) is not set; rerun with --offline to use the cache only",
                        self.config.api_key_env
                    ))
                })?;
                let timeout = Duration::from_secs(self.config.timeout_s);
                let body = retry(self.config.retries, || {
                    self.transport.post_json(&self.config.endpoint, Some(&key), &request, timeout)
                })
                .map_err(|e| match e {
                    TransportError::NotFound => {
                        CliError::runtime(format!("llm endpoint not found for code {code}"))
                    }
                    TransportError::Failed(msg) => CliError::runtime(format!(
                        "llm request failed for code {code} after {} retries: {msg}",
                        self.config.retries
                    )),
                })?;
                let json: serde_json::Value = serde_json::from_str(&body)
                    .map_err(|e| CliError::runtime(format!("llm response for {code}: {e}")))?;
                let text = json
                    .pointer("/choices/0/message/content")
                    .and_then(|v| v.as_str())
                    .unwrap_or("")
                    .to_string();
                let entry = LlmCacheEntry {
                    model: self.config.model.clone(),
                    template_hash: self.template_hash(),
                    code: code.to_string(),
                    request,
                    response_text: text,
                    fetched_at: unix_now(),
                };
                cache_write(&cache_path, &entry)?;
                stats.fetched += 1;
                entry
            }
        };
        if entry.response_text.is_empty() {
            stats.misses += 1;
            return Ok(Vec::new());
        }
        let provenance =
            format!("llm:{}:{}@{}", entry.model, &entry.template_hash[..12], entry.fetched_at);
        Ok(entries_from_prose(
            code,
            Source::Llm,
            &entry.response_text,
            &provenance,
            Some(self.max_sentence_tokens),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    /// Canned transport that counts calls.
    struct MockTransport {
        responses: RefCell<Vec<std::result::Result<String, TransportError>>>,
        calls: RefCell<usize>,
    }

    impl MockTransport {
        fn new(responses: Vec<std::result::Result<String, TransportError>>) -> Self {
            MockTransport { responses: RefCell::new(responses), calls: RefCell::new(0) }
        }
        fn calls(&self) -> usize {
            *self.calls.borrow()
        }
        fn next(&self) -> std::result::Result<String, TransportError> {
            *self.calls.borrow_mut() += 1;
            self.responses.borrow_mut().remove(0)
        }
    }

    impl Transport for MockTransport {
        fn get(&self, _: &str, _: Duration) -> std::result::Result<String, TransportError> {
            self.next()
        }
        fn post_json(
            &self,
            _: &str,
            _: Option<&str>,
            _: &serde_json::Value,
            _: Duration,
        ) -> std::result::Result<String, TransportError> {
            self.next()
        }
    }

    fn wiki_config() -> WikipediaSection {
        WikipediaSection { retries: 1, ..Default::default() }
    }

    #[test]
    fn wikipedia_fetch_caches_and_replays_offline() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = wiki_config();
        let transport = MockTransport::new(vec![Ok(
            "{\"extract\": \"Atrial fibrillation is an irregular rhythm. It raises stroke risk.\"}"
                .into(),
        )]);
        let mut stats = FetchStats::default();
        let client = WikipediaClient {
            config: &cfg,
            cache_dir: dir.path().to_path_buf(),
            transport: &transport,
            offline: false,
        };
        let entries = client.fetch("427.31", "Atrial fibrillation", &mut stats).unwrap();
        assert_eq!(entries.len(), 2);
        assert!(entries[0].provenance.starts_with("wikipedia:"));
        assert_eq!(stats.fetched, 1);
        assert_eq!(transport.calls(), 1);

        // second call: cache hit, zero network
        let entries2 = client.fetch("427.31", "Atrial fibrillation", &mut stats).unwrap();
        assert_eq!(entries, entries2);
        assert_eq!(transport.calls(), 1);
        assert_eq!(stats.hits, 1);

        // offline client sees the same cache
        let offline_transport = MockTransport::new(vec![]);
        let offline = WikipediaClient {
            config: &cfg,
            cache_dir: dir.path().to_path_buf(),
            transport: &offline_transport,
            offline: true,
        };
        let entries3 = offline.fetch("427.31", "Atrial fibrillation", &mut stats).unwrap();
        assert_eq!(entries, entries3);
        assert_eq!(offline_transport.calls(), 0);
    }

    #[test]
    fn wikipedia_404_is_a_cached_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = wiki_config();
        let transport = MockTransport::new(vec![Err(TransportError::NotFound)]);
        let client = WikipediaClient {
            config: &cfg,
            cache_dir: dir.path().to_path_buf(),
            transport: &transport,
            offline: false,
        };
        let mut stats = FetchStats::default();
        let entries = client.fetch("1.0", "No Such Page", &mut stats).unwrap();
        assert!(entries.is_empty());
        assert_eq!(stats.misses, 1);
        // miss is cached: no second network call
        let entries = client.fetch("1.0", "No Such Page", &mut stats).unwrap();
        assert!(entries.is_empty());
        assert_eq!(transport.calls(), 1);
    }

    #[test]
    fn wikipedia_failure_after_retries_names_code_and_title() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = wiki_config();
        let transport = MockTransport::new(vec![
            Err(TransportError::Failed("timeout".into())),
            Err(TransportError::Failed("timeout".into())),
        ]);
        let client = WikipediaClient {
            config: &cfg,
            cache_dir: dir.path().to_path_buf(),
            transport: &transport,
            offline: false,
        };
        let mut stats = FetchStats::default();
        let err = client.fetch("427.31", "Atrial fibrillation", &mut stats).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("427.31") && msg.contains("Atrial fibrillation"), "{msg}");
        assert_eq!(err.exit_code(), 2);
        assert_eq!(transport.calls(), 2); // initial try + 1 retry
    }

    #[test]
    fn llm_template_without_placeholders_is_rejected_before_any_request() {
        let dir = tempfile::tempdir().unwrap();
        let template_path = dir.path().join("t.txt");
        std::fs::write(&template_path, "Tell me about {description} only").unwrap();
        let cfg = LlmSection {
            prompt_template_path: Some(template_path),
            ..Default::default()
        };
        let transport = MockTransport::new(vec![]);
        let err = match LlmClient::new(&cfg, dir.path().to_path_buf(), &transport, false, 64) {
            Err(e) => e,
            Ok(_) => panic!("template without {{code}} was accepted"),
        };
        assert!(err.to_string().contains("{code}"), "{err}");
        assert_eq!(err.exit_code(), 1);
        assert_eq!(transport.calls(), 0);
    }

    #[test]
    fn llm_query_parses_sentences_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = LlmSection { api_key_env: "ICDEX_TEST_KEY".into(), ..Default::default() };
        std::env::set_var("ICDEX_TEST_KEY", "k");
        let response = serde_json::json!({
            "choices": [{"message": {"content": "Heart failure causes fluid overload. Elevated BNP is typical."}}]
        });
        let transport = MockTransport::new(vec![Ok(response.to_string())]);
        let client =
            LlmClient::new(&cfg, dir.path().to_path_buf(), &transport, false, 64).unwrap();
        let mut stats = FetchStats::default();
        let entries = client.query("428.0", "Heart failure", &mut stats).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].source, Source::Llm);
        // cache hit with zero further calls
        let entries2 = client.query("428.0", "Heart failure", &mut stats).unwrap();
        assert_eq!(entries, entries2);
        assert_eq!(transport.calls(), 1);
        assert_eq!(stats.hits, 1);
    }

    #[test]
    fn title_encoding_handles_spaces_and_specials() {
        assert_eq!(encode_title("Atrial fibrillation"), "Atrial_fibrillation");
        assert_eq!(encode_title("Crohn's disease"), "Crohn%27s_disease");
    }
}
