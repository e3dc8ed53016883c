//! The TOML configuration surface. Every section rejects unknown keys so a
//! typo fails loudly with the offending key named.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use icdex_core::encoder::EncoderConfig;
use icdex_core::head::BranchSwitches;
use icdex_core::knowledge::Source;
use icdex_core::model::ModelConfig;
use icdex_core::train::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub wiki_titles: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub knowledge_matrix: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub chunk_size: usize,
    pub max_length: usize,
    /// 0 means "equal to chunk_size" (non-overlapping windows).
    pub stride: usize,
    pub min_freq: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { chunk_size: 512, max_length: 5120, stride: 0, min_freq: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection { d: 128, layers: 2, heads: 4, d_ff: 256, dropout: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSection {
    /// 0 means "equal to the hidden size".
    pub d_a: usize,
    pub kcca_literal: bool,
}

impl Default for AttentionSection {
    fn default() -> Self {
        AttentionSection { d_a: 0, kcca_literal: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    pub filters: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection { filters: 64, kernel: 3, leaky_slope: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WikipediaSection {
    pub endpoint: String,
    pub timeout_s: u64,
    pub retries: usize,
    pub concurrency: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for WikipediaSection {
    fn default() -> Self {
        WikipediaSection {
            endpoint: "https://en.wikipedia.org/api/rest_v1/page/summary".into(),
            timeout_s: 10,
            retries: 2,
            concurrency: 1,
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub timeout_s: u64,
    pub retries: usize,
    pub concurrency: usize,
    /// Environment variable holding the API key; never the key itself.
    pub api_key_env: String,
    pub prompt_template_path: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for LlmSection {
    fn default() -> Self {
        LlmSection {
            endpoint: "https://dashscope.aliyuncs.com/compatible-mode/v1/chat/completions".into(),
            model: "qwen-plus".into(),
            temperature: 0.0,
            max_tokens: 512,
            timeout_s: 30,
            retries: 2,
            concurrency: 1,
            api_key_env: "ICDEX_LLM_API_KEY".into(),
            prompt_template_path: None,
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnowledgeSection {
    pub m: usize,
    pub sources: Vec<String>,
    pub exact_solver_cap: usize,
    pub llm_sentence_max_tokens: usize,
    pub wikipedia: WikipediaSection,
    pub llm: LlmSection,
}

impl Default for KnowledgeSection {
    fn default() -> Self {
        KnowledgeSection {
            m: 8,
            sources: vec!["umls".into(), "wikipedia".into(), "llm".into()],
            exact_solver_cap: 16,
            llm_sentence_max_tokens: 64,
            wikipedia: WikipediaSection::default(),
            llm: LlmSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdGridSection {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Default for ThresholdGridSection {
    fn default() -> Self {
        ThresholdGridSection { start: 0.05, end: 0.95, step: 0.01 }
    }
}

impl ThresholdGridSection {
    pub fn expand(&self) -> Vec<f64> {
        let mut grid = Vec::new();
        if self.step <= 0.0 {
            return grid;
        }
        let n = ((self.end - self.start) / self.step).round() as i64;
        for i in 0..=n.max(0) {
            // stay on clean hundredths for the default grid
            let t = self.start + self.step * i as f64;
            let t = (t * 1e9).round() / 1e9;
            if t <= self.end + 1e-12 {
                grid.push(t);
            }
        }
        grid
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub patience: usize,
    pub lsa: bool,
    pub lcca: bool,
    pub kcca: bool,
    pub train_label_matrix: bool,
    pub threshold_grid: ThresholdGridSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 20,
            batch_size: 8,
            learning_rate: 2e-5,
            warmup_steps: 2000,
            patience: 3,
            lsa: true,
            lcca: true,
            kcca: true,
            train_label_matrix: false,
            threshold_grid: ThresholdGridSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub p_at: Vec<usize>,
    pub split: String,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection { p_at: vec![5, 8, 15], split: "test".into() }
    }
}

/// The whole configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub corpus: CorpusSection,
    pub encoder: EncoderSection,
    pub attention: AttentionSection,
    pub head: HeadSection,
    pub knowledge: KnowledgeSection,
    pub train: TrainSection,
    pub evaluate: EvaluateSection,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("{}: {}", path.display(), e)))?;
        toml::from_str(&text)
            .map_err(|e| CliError::validation(format!("{}: {}", path.display(), e)))
    }

    pub fn stride(&self) -> usize {
        if self.corpus.stride == 0 {
            self.corpus.chunk_size
        } else {
            self.corpus.stride
        }
    }

    pub fn d_a(&self) -> usize {
        if self.attention.d_a == 0 {
            self.encoder.d
        } else {
            self.attention.d_a
        }
    }

    pub fn branches(&self) -> BranchSwitches {
        BranchSwitches { lsa: self.train.lsa, lcca: self.train.lcca, kcca: self.train.kcca }
    }

    pub fn sources(&self) -> Result<BTreeSet<Source>> {
        let mut set = BTreeSet::new();
        for s in &self.knowledge.sources {
            let parsed = Source::parse(s).ok_or_else(|| {
                CliError::validation(format!(
                    "unknown knowledge source {s:?} (expected umls, wikipedia, llm)"
                ))
            })?;
            set.insert(parsed);
        }
        if set.is_empty() {
            return Err(CliError::validation("knowledge.sources must not be empty"));
        }
        Ok(set)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.encoder.d,
            layers: self.encoder.layers,
            heads: self.encoder.heads,
            d_ff: self.encoder.d_ff,
            max_pos: self.corpus.chunk_size,
            dropout: self.encoder.dropout,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, n_labels: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder_config(),
            d_a: self.d_a(),
            n_labels,
            m: self.knowledge.m,
            head_filters: self.head.filters,
            head_kernel: self.head.kernel,
            leaky_slope: self.head.leaky_slope,
            branches: self.branches(),
            kcca_literal: self.attention.kcca_literal,
            train_label_matrix: self.train.train_label_matrix,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            warmup_steps: self.train.warmup_steps,
            patience: self.train.patience,
            seed: self.seed,
            max_length: self.corpus.max_length,
            chunk_size: self.corpus.chunk_size,
            stride: self.stride(),
            m: self.knowledge.m,
            sources: self.sources()?.into_iter().collect(),
            branches: self.branches(),
            threshold_grid: self.train.threshold_grid.expand(),
        })
    }

    /// Hash binding a knowledge matrix to the configuration that built it:
    /// m, source set, encoder shape, seed, and the vocabulary.
    pub fn km_config_hash(&self, vocab_hash: &str) -> Result<String> {
        let sources: Vec<&str> = self.sources()?.iter().map(|s| s.as_str()).collect();
        let enc = self.encoder_config();
        let canonical = format!(
            "m={};sources={};d={};layers={};heads={};d_ff={};max_pos={};seed={};vocab={}",
            self.knowledge.m,
            sources.join(","),
            enc.d,
            enc.layers,
            enc.heads,
            enc.d_ff,
            enc.max_pos,
            self.seed,
            vocab_hash,
        );
        Ok(sha256_hex(canonical.as_bytes()))
    }

    /// Hash of the whole effective configuration, stamped into reports.
    pub fn full_hash(&self, vocab_hash: &str) -> String {
        let toml = toml::to_string(self).unwrap_or_default();
        sha256_hex(format!("{toml}\nvocab={vocab_hash}").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{:02x}", b));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyperparameters() {
        let c = PipelineConfig::default();
        assert_eq!(c.corpus.max_length, 5120);
        assert_eq!(c.corpus.chunk_size, 512);
        assert_eq!(c.train.epochs, 20);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.learning_rate, 2e-5);
        assert_eq!(c.train.warmup_steps, 2000);
        assert_eq!(c.train.patience, 3);
        assert_eq!(c.knowledge.m, 8);
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let err = toml::from_str::<PipelineConfig>("[train]\nlr_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lr_rate"), "{err}");
        let err = toml::from_str::<PipelineConfig>("nonsense_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("nonsense_key"), "{err}");
    }

    #[test]
    fn grid_expansion_hits_spec_defaults() {
        let grid = ThresholdGridSection::default().expand();
        assert_eq!(grid.len(), 91);
        assert_eq!(grid[0], 0.05);
        assert_eq!(grid[6], 0.11);
        assert_eq!(grid[90], 0.95);
    }

    #[test]
    fn zero_values_resolve_to_derived_defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.stride(), 512);
        assert_eq!(c.d_a(), 128);
        let c: PipelineConfig =
            toml::from_str("[corpus]\nchunk_size = 64\nstride = 32\n").unwrap();
        assert_eq!(c.stride(), 32);
    }

    #[test]
    fn km_hash_changes_with_m_and_vocab() {
        let c = PipelineConfig::default();
        let h1 = c.km_config_hash("v1").unwrap();
        let h2 = c.km_config_hash("v2").unwrap();
        assert_ne!(h1, h2);
        let mut c2 = c.clone();
        c2.knowledge.m = 4;
        assert_ne!(h1, c2.km_config_hash("v1").unwrap());
        assert_eq!(h1, c.km_config_hash("v1").unwrap());
    }

    #[test]
    fn bad_source_names_are_rejected() {
        let mut c = PipelineConfig::default();
        c.knowledge.sources = vec!["uml".into()];
        assert!(c.sources().is_err());
    }
}
