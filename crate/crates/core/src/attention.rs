//! The three hybrid attention mechanisms.
//!
//! Each produces a label-aligned representation of shape `(L_n, d)` plus the
//! attention weight tensors used by trace reports:
//!
//! * label-wise self-attention (LSA): learned per-label weights over tokens;
//! * label-context cross-attention (LCCA): label embeddings query the
//!   document;
//! * knowledge-context cross-attention (KCCA): selected knowledge embeddings
//!   query the whole document; the average-pooled knowledge vector enters
//!   through a learned residual so the output stays document-dependent.
//!   A strict-literal mode (knowledge vector as the attention value, which
//!   makes the output document-blind) is available for comparison.
//!
//! Linear maps use the right-multiplication convention `y = x · W`, with `W`
//! shaped `(d_in, d_out)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{Graph, VarId};
use crate::rng::{normal_tensor, SeededRng};
use crate::tensor::Tensor;

/// Trainable tensors of all three mechanisms, generic over storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParamsT<T> {
    /// LSA intermediate projection, `(d, d_a)`.
    pub w1: T,
    /// LSA label scoring matrix, `(d_a, L_n)`.
    pub w2: T,
    /// LSA output transform, `(d, d)`.
    pub w3: T,
    /// LCCA output transform, `(d, d)`.
    pub w4: T,
    pub lcca_q: T,
    pub lcca_k: T,
    pub lcca_v: T,
    pub kcca_q: T,
    pub kcca_k: T,
    pub kcca_v: T,
    /// KCCA knowledge residual gate, `(d, d)`.
    pub wg: T,
}

pub type AttentionParams = AttentionParamsT<Tensor>;
pub type AttentionVars = AttentionParamsT<VarId>;

impl<T> AttentionParamsT<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParamsT<U> {
        AttentionParamsT {
            w1: f(&self.w1),
            w2: f(&self.w2),
            w3: f(&self.w3),
            w4: f(&self.w4),
            lcca_q: f(&self.lcca_q),
            lcca_k: f(&self.lcca_k),
            lcca_v: f(&self.lcca_v),
            kcca_q: f(&self.kcca_q),
            kcca_k: f(&self.kcca_k),
            kcca_v: f(&self.kcca_v),
            wg: f(&self.wg),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(String, &T)) {
        f("attention.w1".into(), &self.w1);
        f("attention.w2".into(), &self.w2);
        f("attention.w3".into(), &self.w3);
        f("attention.w4".into(), &self.w4);
        f("attention.lcca.q".into(), &self.lcca_q);
        f("attention.lcca.k".into(), &self.lcca_k);
        f("attention.lcca.v".into(), &self.lcca_v);
        f("attention.kcca.q".into(), &self.kcca_q);
        f("attention.kcca.k".into(), &self.kcca_k);
        f("attention.kcca.v".into(), &self.kcca_v);
        f("attention.wg".into(), &self.wg);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        f("attention.w1".into(), &mut self.w1);
        f("attention.w2".into(), &mut self.w2);
        f("attention.w3".into(), &mut self.w3);
        f("attention.w4".into(), &mut self.w4);
        f("attention.lcca.q".into(), &mut self.lcca_q);
        f("attention.lcca.k".into(), &mut self.lcca_k);
        f("attention.lcca.v".into(), &mut self.lcca_v);
        f("attention.kcca.q".into(), &mut self.kcca_q);
        f("attention.kcca.k".into(), &mut self.kcca_k);
        f("attention.kcca.v".into(), &mut self.kcca_v);
        f("attention.wg".into(), &mut self.wg);
    }
}

impl AttentionParams {
    pub fn init(d: usize, d_a: usize, n_labels: usize, rng: &mut SeededRng) -> Self {
        let xavier = |rng: &mut SeededRng, r: usize, c: usize| {
            let std = libm::sqrt(2.0 / (r + c) as f64);
            normal_tensor(rng, &[r, c], std)
        };
        AttentionParams {
            w1: xavier(rng, d, d_a),
            w2: xavier(rng, d_a, n_labels),
            w3: xavier(rng, d, d),
            w4: xavier(rng, d, d),
            lcca_q: xavier(rng, d, d),
            lcca_k: xavier(rng, d, d),
            lcca_v: xavier(rng, d, d),
            kcca_q: xavier(rng, d, d),
            kcca_k: xavier(rng, d, d),
            kcca_v: xavier(rng, d, d),
            wg: xavier(rng, d, d),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> AttentionVars {
        self.map(&mut |t: &Tensor| g.leaf(t.clone()))
    }

    /// Label-aware initialization: LSA scoring columns start at the label
    /// embeddings and the cross-attention projections at identity, so every
    /// mechanism begins as a semantic matcher in the encoder space instead
    /// of collapsing onto whatever content a random head favors first.
    /// Falls back to the random LSA init when `d_a != d`.
    pub fn init_label_aligned(
        d: usize,
        d_a: usize,
        label_matrix: &Tensor,
        rng: &mut SeededRng,
    ) -> Self {
        let n_labels = label_matrix.rows();
        let mut params = Self::init(d, d_a, n_labels, rng);
        if d_a == d && label_matrix.cols() == d {
            params.w1 = identity(d);
            let mut w2 = Tensor::zeros(&[d_a, n_labels]);
            for l in 0..n_labels {
                for j in 0..d {
                    w2.set2(j, l, label_matrix.at2(l, j));
                }
            }
            params.w2 = w2;
        }
        params.lcca_q = identity(d);
        params.lcca_k = identity(d);
        params.lcca_v = identity(d);
        params.kcca_q = identity(d);
        params.kcca_k = identity(d);
        params.kcca_v = identity(d);
        params
    }
}

fn identity(d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[d, d]);
    for i in 0..d {
        t.set2(i, i, 1.0);
    }
    t
}

/// A label-aligned representation plus the weights that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `(L_n, d)`.
    pub rep: Tensor,
    /// LSA/LCCA: one `(L_n, T)` matrix per chunk. KCCA: a single
    /// `(L_n, M, C*T)` tensor.
    pub weights: Vec<Tensor>,
}

pub(crate) fn ensure_attendable(masks: &[Vec<bool>]) -> Result<()> {
    if masks.iter().all(|m| m.iter().all(|&b| !b)) {
        return Err(CoreError::NoAttendableContent);
    }
    Ok(())
}

/// Graph-level LSA. Returns the rep node and per-chunk weight nodes.
pub fn lsa_vars(
    g: &mut Graph,
    h_chunks: &[VarId],
    masks: &[Vec<bool>],
    vars: &AttentionVars,
) -> (VarId, Vec<VarId>) {
    let mut weight_nodes = Vec::with_capacity(h_chunks.len());
    let mut parts = Vec::with_capacity(h_chunks.len());
    for (h, mask) in h_chunks.iter().zip(masks) {
        // scores = W2^T · tanh(H_c · W1)^T : (L_n, T)
        let inter = g.matmul(*h, vars.w1);
        let inter = g.tanh(inter);
        let scores = g.matmul_t(vars.w2, true, inter, true);
        let alpha = g.softmax_rows_masked(scores, mask);
        weight_nodes.push(alpha);
        let chunk_rep = g.matmul(alpha, *h); // (L_n, d)
        parts.push(g.matmul(chunk_rep, vars.w3));
    }
    let rep = g.add_n(parts);
    (rep, weight_nodes)
}

/// Graph-level LCCA over the (possibly frozen) label matrix node.
pub fn lcca_vars(
    g: &mut Graph,
    label_matrix: VarId,
    h_chunks: &[VarId],
    masks: &[Vec<bool>],
    vars: &AttentionVars,
    d: usize,
) -> (VarId, Vec<VarId>) {
    let scale = 1.0 / libm::sqrt(d as f64);
    let q = g.matmul(label_matrix, vars.lcca_q); // (L_n, d)
    let mut weight_nodes = Vec::with_capacity(h_chunks.len());
    let mut parts = Vec::with_capacity(h_chunks.len());
    for (h, mask) in h_chunks.iter().zip(masks) {
        let k = g.matmul(*h, vars.lcca_k); // (T, d)
        let v = g.matmul(*h, vars.lcca_v);
        let scores = g.matmul_t(q, false, k, true); // (L_n, T)
        let scores = g.scale(scores, scale);
        let beta = g.softmax_rows_masked(scores, mask);
        weight_nodes.push(beta);
        let out = g.matmul(beta, v); // (L_n, d)
        parts.push(g.matmul(out, vars.w4));
    }
    let rep = g.add_n(parts);
    (rep, weight_nodes)
}

/// Graph-level KCCA over the whole document.
///
/// `kbest_all` is `(L_n*M, d)` (per-code knowledge matrices stacked in label
/// order), `kavg_all` is `(L_n, d)`. In literal mode the rep is exactly the
/// average-pooled knowledge (document-blind); otherwise values are document
/// projections and the knowledge enters through the `wg` residual.
#[allow(clippy::too_many_arguments)]
pub fn kcca_vars(
    g: &mut Graph,
    kbest_all: VarId,
    kavg_all: VarId,
    h_chunks: &[VarId],
    masks: &[Vec<bool>],
    vars: &AttentionVars,
    d: usize,
    m: usize,
    literal: bool,
) -> (VarId, VarId) {
    let scale = 1.0 / libm::sqrt(d as f64);
    let h_all = g.concat_rows(h_chunks.to_vec()); // (C*T, d)
    let mask_all: Vec<bool> = masks.iter().flatten().copied().collect();
    let q = g.matmul(kbest_all, vars.kcca_q); // (L_n*M, d)
    let k = g.matmul(h_all, vars.kcca_k);
    let scores = g.matmul_t(q, false, k, true); // (L_n*M, C*T)
    let scores = g.scale(scores, scale);
    let weights = g.softmax_rows_masked(scores, &mask_all);
    let rep = if literal {
        // CA(Q=K_best, K=H, V=K_avg) taken literally: weights sum to one over
        // identical values, so the output is K_avg itself.
        kavg_all
    } else {
        let v = g.matmul(h_all, vars.kcca_v);
        let out = g.matmul(weights, v); // (L_n*M, d)
        let pooled = g.row_mean_groups(out, m); // (L_n, d)
        let residual = g.matmul(kavg_all, vars.wg);
        g.add(pooled, residual)
    };
    (rep, weights)
}

fn constant_chunks(g: &mut Graph, h_chunks: &[Tensor]) -> Vec<VarId> {
    h_chunks.iter().map(|t| g.constant(t.clone())).collect()
}

fn validate_chunks(h_chunks: &[Tensor], masks: &[Vec<bool>]) -> Result<()> {
    if h_chunks.is_empty() || h_chunks.len() != masks.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} chunks vs {} masks",
            h_chunks.len(),
            masks.len()
        )));
    }
    for (h, m) in h_chunks.iter().zip(masks) {
        if h.rows() != m.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "chunk rows {} vs mask length {}",
                h.rows(),
                m.len()
            )));
        }
    }
    ensure_attendable(masks)
}

/// Standalone LSA on plain tensors (eval path and tests).
pub fn lsa(h_chunks: &[Tensor], masks: &[Vec<bool>], params: &AttentionParams) -> Result<AttentionOutput> {
    validate_chunks(h_chunks, masks)?;
    let mut g = Graph::new();
    let vars = params.map(&mut |t: &Tensor| g.constant(t.clone()));
    let hs = constant_chunks(&mut g, h_chunks);
    let (rep, weights) = lsa_vars(&mut g, &hs, masks, &vars);
    Ok(AttentionOutput {
        rep: g.value(rep).clone(),
        weights: weights.into_iter().map(|w| g.value(w).clone()).collect(),
    })
}

/// Standalone LCCA on plain tensors.
pub fn lcca(
    label_matrix: &Tensor,
    h_chunks: &[Tensor],
    masks: &[Vec<bool>],
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    validate_chunks(h_chunks, masks)?;
    let d = h_chunks[0].cols();
    let mut g = Graph::new();
    let vars = params.map(&mut |t: &Tensor| g.constant(t.clone()));
    let l = g.constant(label_matrix.clone());
    let hs = constant_chunks(&mut g, h_chunks);
    let (rep, weights) = lcca_vars(&mut g, l, &hs, masks, &vars, d);
    Ok(AttentionOutput {
        rep: g.value(rep).clone(),
        weights: weights.into_iter().map(|w| g.value(w).clone()).collect(),
    })
}

/// Standalone KCCA on plain tensors. `kbest_all` is `(L_n*M, d)` and
/// `kavg_all` `(L_n, d)`; the weight tensor comes back as `(L_n, M, C*T)`.
pub fn kcca(
    kbest_all: &Tensor,
    kavg_all: &Tensor,
    h_chunks: &[Tensor],
    masks: &[Vec<bool>],
    params: &AttentionParams,
    m: usize,
    literal: bool,
) -> Result<AttentionOutput> {
    validate_chunks(h_chunks, masks)?;
    let d = h_chunks[0].cols();
    let n_labels = kavg_all.rows();
    if kbest_all.rows() != n_labels * m {
        return Err(CoreError::ShapeMismatch(format!(
            "kbest rows {} != n_labels {} * m {}",
            kbest_all.rows(),
            n_labels,
            m
        )));
    }
    let mut g = Graph::new();
    let vars = params.map(&mut |t: &Tensor| g.constant(t.clone()));
    let kb = g.constant(kbest_all.clone());
    let ka = g.constant(kavg_all.clone());
    let hs = constant_chunks(&mut g, h_chunks);
    let (rep, weights) = kcca_vars(&mut g, kb, ka, &hs, masks, &vars, d, m, literal);
    let w = g.value(weights).clone();
    let ct = w.cols();
    Ok(AttentionOutput {
        rep: g.value(rep).clone(),
        weights: alloc::vec![w.reshaped(&[n_labels, m, ct])?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;
    use crate::tensor::matmul;
    use alloc::vec;

    fn rand_t(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        normal_tensor(rng, shape, 1.0)
    }

    #[test]
    fn lsa_uniform_scores_average_content_rows() {
        // With W2 = 0 the pre-softmax scores are constant, so attention is
        // uniform over non-padding rows and the label vector is
        // mean(content rows) · W3, summed over chunks.
        let mut rng = derive(21, 0);
        let d = 6;
        let t = 5;
        let params = {
            let mut p = AttentionParams::init(d, d, 1, &mut rng);
            p.w2 = Tensor::zeros(&[d, 1]);
            p
        };
        let h = rand_t(&mut rng, &[t, d]);
        let mask = vec![true, true, true, false, false];
        let out = lsa(&[h.clone()], &[mask], &params).unwrap();
        let mut mean = Tensor::zeros(&[1, d]);
        for i in 0..3 {
            for j in 0..d {
                let v = mean.at2(0, j) + h.at2(i, j) / 3.0;
                mean.set2(0, j, v);
            }
        }
        let expected = matmul(&mean, false, &params.w3, false);
        assert!(out.rep.max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn lsa_single_content_position_is_one_point_attention() {
        let mut rng = derive(22, 0);
        let d = 4;
        let n_labels = 3;
        let params = AttentionParams::init(d, d, n_labels, &mut rng);
        let h = rand_t(&mut rng, &[4, d]);
        let mask = vec![false, false, true, false];
        let out = lsa(&[h.clone()], &[mask], &params).unwrap();
        let mut row = Tensor::zeros(&[1, d]);
        row.row_mut(0).copy_from_slice(h.row(2));
        let expected = matmul(&row, false, &params.w3, false);
        for l in 0..n_labels {
            for j in 0..d {
                assert!((out.rep.at2(l, j) - expected.at2(0, j)).abs() < 1e-9);
            }
            assert!((out.weights[0].at2(l, 2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lcca_single_position_ignores_query_and_identical_labels_match() {
        let mut rng = derive(23, 0);
        let d = 6;
        let params = AttentionParams::init(d, d, 2, &mut rng);
        let h = rand_t(&mut rng, &[3, d]);
        let mask = vec![false, true, false];
        let mut labels = rand_t(&mut rng, &[2, d]);
        let first = labels.row(0).to_vec();
        labels.row_mut(1).copy_from_slice(&first);
        let out = lcca(&labels, &[h.clone()], &[mask], &params).unwrap();
        // softmax over one element: output row = (H[1] · Wv) · W4 for all rows
        let mut row = Tensor::zeros(&[1, d]);
        row.row_mut(0).copy_from_slice(h.row(1));
        let v = matmul(&row, false, &params.lcca_v, false);
        let expected = matmul(&v, false, &params.w4, false);
        for l in 0..2 {
            for j in 0..d {
                assert!((out.rep.at2(l, j) - expected.at2(0, j)).abs() < 1e-9);
            }
        }
        assert_eq!(out.rep.row(0), out.rep.row(1));
    }

    #[test]
    fn lcca_identical_label_rows_give_identical_outputs_generally() {
        let mut rng = derive(29, 0);
        let d = 6;
        let params = AttentionParams::init(d, d, 2, &mut rng);
        let h0 = rand_t(&mut rng, &[4, d]);
        let h1 = rand_t(&mut rng, &[4, d]);
        let masks = vec![vec![true, true, false, true], vec![true, false, false, false]];
        let mut labels = rand_t(&mut rng, &[2, d]);
        let first = labels.row(0).to_vec();
        labels.row_mut(1).copy_from_slice(&first);
        let out = lcca(&labels, &[h0, h1], &masks, &params).unwrap();
        assert_eq!(out.rep.row(0), out.rep.row(1));
    }

    #[test]
    fn kcca_one_token_document_reduces_to_projection_plus_residual() {
        let mut rng = derive(24, 0);
        let d = 5;
        let m = 2;
        let n_labels = 2;
        let params = AttentionParams::init(d, d, n_labels, &mut rng);
        let h = rand_t(&mut rng, &[3, d]);
        let mask = vec![false, false, true];
        let kbest = rand_t(&mut rng, &[n_labels * m, d]);
        let kavg = rand_t(&mut rng, &[n_labels, d]);
        let out = kcca(&kbest, &kavg, &[h.clone()], &[mask], &params, m, false).unwrap();
        let mut row = Tensor::zeros(&[1, d]);
        row.row_mut(0).copy_from_slice(h.row(2));
        let u = matmul(&row, false, &params.kcca_v, false);
        let residual = matmul(&kavg, false, &params.wg, false);
        for l in 0..n_labels {
            for j in 0..d {
                let expected = u.at2(0, j) + residual.at2(l, j);
                assert!((out.rep.at2(l, j) - expected).abs() < 1e-9);
            }
        }
        // weights: every (label, entry) row is a one-point distribution
        let w = &out.weights[0];
        for l in 0..n_labels {
            for q in 0..m {
                assert!((w.at3(l, q, 2) - 1.0).abs() < 1e-12);
                assert_eq!(w.at3(l, q, 0), 0.0);
            }
        }
    }

    #[test]
    fn kcca_identical_knowledge_gives_identical_rows() {
        let mut rng = derive(25, 0);
        let d = 5;
        let m = 2;
        let params = AttentionParams::init(d, d, 2, &mut rng);
        let h = rand_t(&mut rng, &[4, d]);
        let block = rand_t(&mut rng, &[m, d]);
        let mut kbest = Tensor::zeros(&[2 * m, d]);
        for l in 0..2 {
            for r in 0..m {
                kbest.row_mut(l * m + r).copy_from_slice(block.row(r));
            }
        }
        let mut kavg = Tensor::zeros(&[2, d]);
        let avg_row: Vec<f64> =
            (0..d).map(|j| (block.at2(0, j) + block.at2(1, j)) / 2.0).collect();
        kavg.row_mut(0).copy_from_slice(&avg_row);
        kavg.row_mut(1).copy_from_slice(&avg_row);
        let out =
            kcca(&kbest, &kavg, &[h], &[vec![true, true, true, false]], &params, m, false).unwrap();
        assert_eq!(out.rep.row(0), out.rep.row(1));
    }

    #[test]
    fn kcca_literal_mode_is_document_blind() {
        let mut rng = derive(26, 0);
        let d = 4;
        let m = 2;
        let params = AttentionParams::init(d, d, 2, &mut rng);
        let kbest = rand_t(&mut rng, &[2 * m, d]);
        let kavg = rand_t(&mut rng, &[2, d]);
        let h1 = rand_t(&mut rng, &[3, d]);
        let h2 = rand_t(&mut rng, &[3, d]);
        let mask = vec![vec![true, true, false]];
        let o1 = kcca(&kbest, &kavg, &[h1], &mask, &params, m, true).unwrap();
        let o2 = kcca(&kbest, &kavg, &[h2], &mask, &params, m, true).unwrap();
        assert_eq!(o1.rep, o2.rep);
        assert_eq!(o1.rep, kavg);
    }

    #[test]
    fn all_padding_everywhere_is_an_error() {
        let mut rng = derive(27, 0);
        let d = 4;
        let params = AttentionParams::init(d, d, 2, &mut rng);
        let h = rand_t(&mut rng, &[3, d]);
        let masks = vec![vec![false, false, false]];
        assert!(matches!(
            lsa(&[h.clone()], &masks, &params),
            Err(CoreError::NoAttendableContent)
        ));
        let labels = rand_t(&mut rng, &[2, d]);
        assert!(matches!(
            lcca(&labels, &[h.clone()], &masks, &params),
            Err(CoreError::NoAttendableContent)
        ));
        let kbest = rand_t(&mut rng, &[4, d]);
        let kavg = rand_t(&mut rng, &[2, d]);
        assert!(matches!(
            kcca(&kbest, &kavg, &[h], &masks, &params, 2, false),
            Err(CoreError::NoAttendableContent)
        ));
    }

    #[test]
    fn weight_rows_are_distributions_with_zero_padding_mass() {
        let mut rng = derive(28, 0);
        let d = 6;
        let n_labels = 4;
        let m = 3;
        let params = AttentionParams::init(d, d, n_labels, &mut rng);
        let h0 = rand_t(&mut rng, &[5, d]);
        let h1 = rand_t(&mut rng, &[5, d]);
        let masks = vec![vec![true, true, true, false, false], vec![true, false, true, false, false]];
        let labels = rand_t(&mut rng, &[n_labels, d]);
        let kbest = rand_t(&mut rng, &[n_labels * m, d]);
        let kavg = rand_t(&mut rng, &[n_labels, d]);

        let lsa_out = lsa(&[h0.clone(), h1.clone()], &masks, &params).unwrap();
        let lcca_out = lcca(&labels, &[h0.clone(), h1.clone()], &masks, &params).unwrap();
        let kcca_out = kcca(&kbest, &kavg, &[h0, h1], &masks, &params, m, false).unwrap();

        for (w, mask) in lsa_out.weights.iter().zip(&masks).chain(lcca_out.weights.iter().zip(&masks)) {
            for l in 0..n_labels {
                let s: f64 = w.row(l).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                for (j, &keep) in mask.iter().enumerate() {
                    if !keep {
                        assert_eq!(w.at2(l, j), 0.0);
                    }
                }
            }
        }
        let w = &kcca_out.weights[0];
        let flat_mask: Vec<bool> = masks.iter().flatten().copied().collect();
        for l in 0..n_labels {
            for q in 0..m {
                let mut s = 0.0;
                for (p, &keep) in flat_mask.iter().enumerate() {
                    let v = w.at3(l, q, p);
                    s += v;
                    if !keep {
                        assert_eq!(v, 0.0);
                    }
                }
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
