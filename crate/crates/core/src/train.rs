//! Training: adaptive-moment gradient descent with linear warmup/decay,
//! early stopping on dev micro-F1, and dev-set threshold optimization.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_with_stride, Chunk, Corpus, Vocab};
use crate::error::{CoreError, Result};
use crate::head::BranchSwitches;
use crate::knowledge::Source;
use crate::metrics::{micro_f1, EvalBatch};
use crate::model::{KnowledgeTensors, ModelState};
use crate::rng::{derive, shuffle};
use crate::tensor::Tensor;

/// The tuning surface of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    pub seed: u64,
    pub max_length: usize,
    pub chunk_size: usize,
    /// Chunk stride; equal to `chunk_size` for non-overlapping windows.
    pub stride: usize,
    /// Knowledge entries per code.
    pub m: usize,
    pub sources: Vec<Source>,
    pub branches: BranchSwitches,
    pub threshold_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 2e-5,
            warmup_steps: 2000,
            patience: 3,
            seed: 0,
            max_length: 5120,
            chunk_size: 512,
            stride: 512,
            m: 8,
            sources: Source::ALL.to_vec(),
            branches: BranchSwitches::default(),
            threshold_grid: default_threshold_grid(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::BadConfig("epochs and batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(CoreError::BadConfig("patience must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::BadConfig("learning_rate must be positive".into()));
        }
        if self.m == 0 {
            return Err(CoreError::BadConfig("m must be >= 1".into()));
        }
        if self.threshold_grid.is_empty()
            || self.threshold_grid.iter().any(|t| !(0.0 < *t && *t < 1.0))
        {
            return Err(CoreError::BadThresholdGrid);
        }
        if !self.branches.any() {
            return Err(CoreError::AllBranchesDisabled);
        }
        Ok(())
    }
}

/// `{0.05, 0.06, ..., 0.95}`.
pub fn default_threshold_grid() -> Vec<f64> {
    (5..=95).map(|i| i as f64 / 100.0).collect()
}

/// Linear warmup to `base` over `warmup` steps, then linear decay to zero at
/// `total` steps. `step` is zero-based.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let remaining = total.saturating_sub(step);
    base * remaining as f64 / (total - warmup) as f64
}

/// Adam with bias correction (decoupled weight decay 0).
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    /// One update over every trainable tensor of the model.
    pub fn step(&mut self, state: &mut ModelState, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        let (m_map, v_map) = (&mut self.m, &mut self.v);
        let mut update = |name: String, tensor: &mut Tensor| {
            let Some(grad) = grads.get(&name) else { return };
            let m = m_map.entry(name.clone()).or_insert_with(|| Tensor::zeros(tensor.shape()));
            let v = v_map.entry(name).or_insert_with(|| Tensor::zeros(tensor.shape()));
            for i in 0..tensor.numel() {
                let g = grad.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                tensor.data_mut()[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        };
        state.encoder.for_each_mut(&mut update);
        state.attention.for_each_mut(&mut update);
        state.head.for_each_mut(&mut update);
        if !state.label_matrix.frozen {
            update("label_matrix".into(), &mut state.label_matrix.matrix);
        }
    }
}

/// Early stopping on strict improvement of a dev metric.
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    strikes: usize,
    pub best_epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::NEG_INFINITY, strikes: 0, best_epoch: 0 }
    }

    /// Returns `(improved, stop)` for this epoch's dev value.
    pub fn observe(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.strikes = 0;
            (true, false)
        } else {
            self.strikes += 1;
            (false, self.strikes >= self.patience)
        }
    }
}

/// A document tokenized, chunked, and paired with its gold vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDoc {
    pub id: String,
    pub chunks: Vec<Chunk>,
    pub gold: Vec<f64>,
}

/// Tokenize and chunk every document of a corpus.
pub fn prepare_docs(corpus: &Corpus, vocab: &Vocab, config: &TrainConfig) -> Result<Vec<PreparedDoc>> {
    corpus
        .documents()
        .iter()
        .map(|doc| {
            let ids = vocab.tokenize(&doc.text);
            let chunks =
                chunk_with_stride(&doc.id, &ids, config.chunk_size, config.stride, config.max_length)?;
            Ok(PreparedDoc { id: doc.id.clone(), chunks, gold: corpus.gold_vector(doc) })
        })
        .collect()
}

/// One structured log line per epoch. Wall time is stamped by the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_micro_f1: f64,
    pub learning_rate: f64,
}

/// The trained model and its log.
pub struct TrainOutcome {
    pub best: ModelState,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Scores for a document list under the current parameters.
pub fn score_docs(
    state: &ModelState,
    knowledge: &KnowledgeTensors,
    docs: &[PreparedDoc],
) -> Result<Vec<Vec<f64>>> {
    docs.iter().map(|doc| Ok(state.predict(knowledge, &doc.chunks)?.probs)).collect()
}

/// Dev micro-F1 at a fixed threshold.
pub fn dev_micro_f1(
    state: &ModelState,
    knowledge: &KnowledgeTensors,
    docs: &[PreparedDoc],
    threshold: f64,
) -> Result<f64> {
    if docs.is_empty() {
        return Ok(0.0);
    }
    let scores = score_docs(state, knowledge, docs)?;
    let gold = docs.iter().map(|d| d.gold.clone()).collect();
    Ok(micro_f1(&EvalBatch::new(scores, gold, threshold)?))
}

/// Mini-batch training with warmup/decay, early stopping on dev micro-F1 at
/// threshold 0.5, and best-dev checkpointing. Deterministic for a fixed
/// seed. The observer runs after each epoch record is produced.
pub fn train(
    mut state: ModelState,
    knowledge: &KnowledgeTensors,
    train_docs: &[PreparedDoc],
    dev_docs: &[PreparedDoc],
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_docs.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    let mut shuffle_rng = derive(config.seed, 1);
    let mut dropout_rng = derive(config.seed, 2);
    let steps_per_epoch = train_docs.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut adam = Adam::new();
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best = state.clone();
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut global_step = 0usize;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_docs.len()).collect();
        shuffle(&mut shuffle_rng, &mut order);
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for &doc_idx in batch {
                let doc = &train_docs[doc_idx];
                let fwd = state.forward_doc(knowledge, &doc.chunks, Some(&mut dropout_rng))?;
                let loss_var = {
                    let mut graph = fwd.graph;
                    let loss = graph.bce_with_logits_mean(fwd.logits_var, &doc.gold);
                    let value = graph.value(loss).data()[0];
                    if !value.is_finite() {
                        return Err(CoreError::Divergence { epoch, batch: batch_idx });
                    }
                    batch_loss += value * scale;
                    let doc_grads = graph.backward(loss);
                    for (name, var) in &fwd.named_vars {
                        if let Some(g) = doc_grads.get(*var) {
                            let slot = grads
                                .entry(name.clone())
                                .or_insert_with(|| Tensor::zeros(g.shape()));
                            for (acc, v) in slot.data_mut().iter_mut().zip(g.data()) {
                                *acc += v * scale;
                            }
                        }
                    }
                };
                let _ = loss_var;
            }
            let lr = lr_at(global_step, total_steps, config.warmup_steps, config.learning_rate);
            last_lr = lr;
            global_step += 1;
            adam.step(&mut state, &grads, lr);
            epoch_loss += batch_loss;
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / steps_per_epoch as f64,
            dev_micro_f1: dev_micro_f1(&state, knowledge, dev_docs, 0.5)?,
            learning_rate: last_lr,
        };
        observer(&record);
        log.push(record);
        if dev_docs.is_empty() {
            // No dev signal: keep the latest parameters, never stop early.
            best = state.clone();
            stopper.best_epoch = epoch;
            continue;
        }
        let (improved, stop) = stopper.observe(epoch, log.last().expect("just pushed").dev_micro_f1);
        if improved {
            best = state.clone();
        }
        if stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome { best, best_epoch: stopper.best_epoch, log, stopped_early })
}

/// Grid search for the global decision threshold maximizing dev micro-F1;
/// ties resolve to the smallest threshold.
pub fn optimize_threshold(
    dev_scores: &[Vec<f64>],
    dev_gold: &[Vec<f64>],
    grid: &[f64],
) -> Result<f64> {
    if grid.is_empty() || grid.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
        return Err(CoreError::BadThresholdGrid);
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    let mut best_t = sorted[0];
    let mut best_f1 = f64::NEG_INFINITY;
    for &t in &sorted {
        let batch = EvalBatch::new(dev_scores.to_vec(), dev_gold.to_vec(), t)?;
        let f1 = micro_f1(&batch);
        if f1 > best_f1 {
            best_f1 = f1;
            best_t = t;
        }
    }
    Ok(best_t)
}
