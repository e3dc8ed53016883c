//! Full model state and the end-to-end document forward pass.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{kcca_vars, lcca_vars, lsa_vars, AttentionParams, AttentionParamsT};
use crate::corpus::{Chunk, LabelSpace};
use crate::diversity::KnowledgeMatrixSet;
use crate::encoder::{encode_chunk_vars, EncoderConfig, EncoderParams, LabelMatrix, Mode};
use crate::error::{CoreError, Result};
use crate::graph::{sigmoid_stable, Graph, VarId};
use crate::head::{fuse_vars, head_logits_vars, BranchSwitches, HeadParams};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Everything needed to rebuild the trainable model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// LSA intermediate width; defaults to the hidden size.
    pub d_a: usize,
    pub n_labels: usize,
    /// Knowledge entries per code (rows of each knowledge matrix).
    pub m: usize,
    pub head_filters: usize,
    pub head_kernel: usize,
    pub leaky_slope: f64,
    pub branches: BranchSwitches,
    /// Strict-literal KCCA (document-blind value choice), for comparison.
    pub kcca_literal: bool,
    /// Unfreeze the label matrix for ablation.
    pub train_label_matrix: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_labels == 0 || self.m == 0 || self.d_a == 0 {
            return Err(CoreError::BadConfig("n_labels, m, d_a must be positive".into()));
        }
        if !self.branches.any() {
            return Err(CoreError::AllBranchesDisabled);
        }
        if self.head_filters == 0 || self.head_kernel % 2 == 0 {
            return Err(CoreError::BadConfig("head needs filters >= 1 and an odd kernel".into()));
        }
        Ok(())
    }
}

/// All trainable parameters plus the frozen label matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
    pub head: HeadParams,
    pub label_matrix: LabelMatrix,
}

impl ModelState {
    /// Fresh state; the label matrix starts as zeros and is filled in by
    /// encoding the label descriptions once a vocabulary exists.
    pub fn init(config: ModelConfig, vocab_size: usize, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::init(&config.encoder, vocab_size, rng);
        let attention =
            AttentionParams::init(config.encoder.d, config.d_a, config.n_labels, rng);
        let head = HeadParams::init(config.head_filters, config.head_kernel, rng)?;
        let label_matrix = LabelMatrix {
            matrix: Tensor::zeros(&[config.n_labels, config.encoder.d]),
            frozen: !config.train_label_matrix,
        };
        Ok(ModelState { config, encoder, attention, head, label_matrix })
    }

    /// Trainable tensors as a named map. The label matrix appears only when
    /// unfrozen.
    pub fn params_map(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        self.encoder.for_each(&mut |name, t| {
            map.insert(name, t.clone());
        });
        self.attention.for_each(&mut |name, t| {
            map.insert(name, t.clone());
        });
        self.head.for_each(&mut |name, t| {
            map.insert(name, t.clone());
        });
        if !self.label_matrix.frozen {
            map.insert("label_matrix".into(), self.label_matrix.matrix.clone());
        }
        map
    }

    /// Replace trainable tensors from a named map (shapes must match).
    pub fn set_params_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut missing: Vec<String> = Vec::new();
        let mut apply = |name: String, t: &mut Tensor| {
            if let Some(new) = map.get(&name) {
                if new.shape() == t.shape() {
                    *t = new.clone();
                } else {
                    missing.push(format!("{name} (shape mismatch)"));
                }
            } else {
                missing.push(name);
            }
        };
        self.encoder.for_each_mut(&mut apply);
        self.attention.for_each_mut(&mut apply);
        self.head.for_each_mut(&mut apply);
        if !self.label_matrix.frozen {
            apply("label_matrix".into(), &mut self.label_matrix.matrix);
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CoreError::BadConfig(format!("parameter map mismatch: {:?}", missing)))
        }
    }
}

/// Per-code knowledge matrices flattened into label order for the forward
/// pass: `kbest_all` is `(L_n*M, d)`, `kavg_all` `(L_n, d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeTensors {
    pub kbest_all: Tensor,
    pub kavg_all: Tensor,
    pub m: usize,
}

/// Stack a knowledge matrix set following the label-space order.
pub fn knowledge_tensors(set: &KnowledgeMatrixSet, label_space: &LabelSpace) -> Result<KnowledgeTensors> {
    let n = label_space.len();
    let (m, d) = (set.m, set.d);
    let mut kbest_all = Tensor::zeros(&[n * m, d]);
    let mut kavg_all = Tensor::zeros(&[n, d]);
    for (l, code) in label_space.codes().iter().enumerate() {
        let km = set.get(code).ok_or_else(|| CoreError::MissingKnowledge(code.clone()))?;
        if km.matrix.rows() != m || km.matrix.cols() != d {
            return Err(CoreError::ShapeMismatch(format!(
                "knowledge matrix for {code} has shape {:?}, expected ({m}, {d})",
                km.matrix.shape()
            )));
        }
        for r in 0..m {
            kbest_all.row_mut(l * m + r).copy_from_slice(km.matrix.row(r));
        }
        kavg_all.row_mut(l).copy_from_slice(&km.avg);
    }
    Ok(KnowledgeTensors { kbest_all, kavg_all, m })
}

/// Values extracted from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Per chunk `(L_n, T)`; empty when the branch is disabled.
    pub lsa_weights: Vec<Tensor>,
    pub lcca_weights: Vec<Tensor>,
    /// `(L_n, M, C*T)` when KCCA is enabled.
    pub kcca_weights: Option<Tensor>,
}

/// A forward pass with its live graph, for attaching a loss.
pub struct DocForward {
    pub graph: Graph,
    pub logits_var: VarId,
    /// Name -> leaf id for every trainable tensor bound into the graph.
    pub named_vars: Vec<(String, VarId)>,
    pub output: ForwardOutput,
}

impl ModelState {
    /// Encode all chunks and run the enabled attention branches and head.
    ///
    /// `train_rng` enables dropout; pass `None` for eval mode. Documents
    /// whose every position is padding are rejected.
    pub fn forward_doc(
        &self,
        knowledge: &KnowledgeTensors,
        chunks: &[Chunk],
        mut train_rng: Option<&mut SeededRng>,
    ) -> Result<DocForward> {
        let cfg = &self.config;
        if chunks.is_empty() {
            return Err(CoreError::NoAttendableContent);
        }
        for c in chunks {
            if c.token_ids.len() != cfg.encoder.max_pos {
                return Err(CoreError::ShapeMismatch(format!(
                    "chunk length {} != encoder max_pos {}",
                    c.token_ids.len(),
                    cfg.encoder.max_pos
                )));
            }
            for &id in &c.token_ids {
                if id >= self.encoder.vocab_size() {
                    return Err(CoreError::TokenIdOutOfRange {
                        id,
                        vocab_size: self.encoder.vocab_size(),
                    });
                }
            }
        }
        let masks: Vec<Vec<bool>> = chunks.iter().map(|c| c.mask.clone()).collect();
        crate::attention::ensure_attendable(&masks)?;
        if knowledge.m != cfg.m || knowledge.kavg_all.rows() != cfg.n_labels {
            return Err(CoreError::ShapeMismatch("knowledge tensors do not match config".into()));
        }

        let mut g = Graph::new();
        let mut named_vars: Vec<(String, VarId)> = Vec::new();
        let enc_vars = self.encoder.bind(&mut g);
        enc_vars.for_each(&mut |name, id| named_vars.push((name, *id)));
        let attn_vars: AttentionParamsT<VarId> = self.attention.bind(&mut g);
        attn_vars.for_each(&mut |name, id| named_vars.push((name, *id)));
        let head_vars = self.head.bind(&mut g);
        head_vars.for_each(&mut |name, id| named_vars.push((name, *id)));
        let label_var = if self.label_matrix.frozen {
            g.constant(self.label_matrix.matrix.clone())
        } else {
            let id = g.leaf(self.label_matrix.matrix.clone());
            named_vars.push(("label_matrix".into(), id));
            id
        };

        let mut mode = match train_rng.as_deref_mut() {
            Some(rng) => Mode::Train { rng },
            None => Mode::Eval,
        };
        let h_chunks: Vec<VarId> = chunks
            .iter()
            .map(|c| encode_chunk_vars(&mut g, &enc_vars, &cfg.encoder, &c.token_ids, &c.mask, &mut mode))
            .collect();

        let d = cfg.encoder.d;
        let (lsa_rep, lsa_w) = if cfg.branches.lsa {
            let (rep, w) = lsa_vars(&mut g, &h_chunks, &masks, &attn_vars);
            (Some(rep), w)
        } else {
            (None, Vec::new())
        };
        let (lcca_rep, lcca_w) = if cfg.branches.lcca {
            let (rep, w) = lcca_vars(&mut g, label_var, &h_chunks, &masks, &attn_vars, d);
            (Some(rep), w)
        } else {
            (None, Vec::new())
        };
        let (kcca_rep, kcca_w) = if cfg.branches.kcca {
            let kb = g.constant(knowledge.kbest_all.clone());
            let ka = g.constant(knowledge.kavg_all.clone());
            let (rep, w) = kcca_vars(
                &mut g,
                kb,
                ka,
                &h_chunks,
                &masks,
                &attn_vars,
                d,
                cfg.m,
                cfg.kcca_literal,
            );
            (Some(rep), Some(w))
        } else {
            (None, None)
        };

        let fused = fuse_vars(&mut g, lsa_rep, lcca_rep, kcca_rep, cfg.n_labels, d)?;
        let logits_var = head_logits_vars(&mut g, fused, &head_vars, cfg.leaky_slope);

        let logits = g.value(logits_var).data().to_vec();
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid_stable(z)).collect();
        let kcca_weights = match kcca_w {
            Some(w) => {
                let t = g.value(w).clone();
                let ct = t.cols();
                Some(t.reshaped(&[cfg.n_labels, cfg.m, ct])?)
            }
            None => None,
        };
        let output = ForwardOutput {
            logits,
            probs,
            lsa_weights: lsa_w.iter().map(|w| g.value(*w).clone()).collect(),
            lcca_weights: lcca_w.iter().map(|w| g.value(*w).clone()).collect(),
            kcca_weights,
        };
        Ok(DocForward { graph: g, logits_var, named_vars, output })
    }

    /// Eval-mode forward pass.
    pub fn predict(&self, knowledge: &KnowledgeTensors, chunks: &[Chunk]) -> Result<ForwardOutput> {
        Ok(self.forward_doc(knowledge, chunks, None)?.output)
    }
}
