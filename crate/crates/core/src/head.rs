//! Fusion of the three attention representations and the lightweight
//! convolutional prediction head.
//!
//! Each label is an independent instance: its three `(d)` representations
//! stack into channels, a same-padded 1-D convolution runs along the feature
//! axis, and the mean over that axis is the label's logit.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{sigmoid_stable, Graph, VarId, BCE_EPS};
use crate::rng::{normal_tensor, SeededRng};
use crate::tensor::Tensor;

/// Which attention branches feed the head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSwitches {
    pub lsa: bool,
    pub lcca: bool,
    pub kcca: bool,
}

impl Default for BranchSwitches {
    fn default() -> Self {
        BranchSwitches { lsa: true, lcca: true, kcca: true }
    }
}

impl BranchSwitches {
    pub fn any(&self) -> bool {
        self.lsa || self.lcca || self.kcca
    }
}

/// Convolutional head tensors, generic over storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParamsT<T> {
    /// `(filters, 3, kernel)`.
    pub conv1_w: T,
    pub conv1_b: T,
    /// `(1, filters, 1)`.
    pub conv2_w: T,
    pub conv2_b: T,
}

pub type HeadParams = HeadParamsT<Tensor>;
pub type HeadVars = HeadParamsT<VarId>;

impl<T> HeadParamsT<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> HeadParamsT<U> {
        HeadParamsT {
            conv1_w: f(&self.conv1_w),
            conv1_b: f(&self.conv1_b),
            conv2_w: f(&self.conv2_w),
            conv2_b: f(&self.conv2_b),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(String, &T)) {
        f("head.conv1.weight".into(), &self.conv1_w);
        f("head.conv1.bias".into(), &self.conv1_b);
        f("head.conv2.weight".into(), &self.conv2_w);
        f("head.conv2.bias".into(), &self.conv2_b);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        f("head.conv1.weight".into(), &mut self.conv1_w);
        f("head.conv1.bias".into(), &mut self.conv1_b);
        f("head.conv2.weight".into(), &mut self.conv2_w);
        f("head.conv2.bias".into(), &mut self.conv2_b);
    }
}

impl HeadParams {
    /// Kernel must be odd so same padding is well defined.
    pub fn init(filters: usize, kernel: usize, rng: &mut SeededRng) -> Result<Self> {
        if filters == 0 || kernel % 2 == 0 {
            return Err(CoreError::BadConfig(
                "head needs filters >= 1 and an odd kernel".into(),
            ));
        }
        let std1 = libm::sqrt(2.0 / (3 * kernel) as f64);
        let std2 = libm::sqrt(2.0 / filters as f64);
        Ok(HeadParams {
            conv1_w: normal_tensor(rng, &[filters, 3, kernel], std1),
            conv1_b: Tensor::zeros(&[filters]),
            conv2_w: normal_tensor(rng, &[1, filters, 1], std2),
            conv2_b: Tensor::zeros(&[1]),
        })
    }

    pub fn bind(&self, g: &mut Graph) -> HeadVars {
        self.map(&mut |t: &Tensor| g.leaf(t.clone()))
    }
}

/// Stack the branch representations into channels; a disabled branch
/// contributes an all-zero channel. All three disabled is a config error.
pub fn fuse_vars(
    g: &mut Graph,
    h_lsa: Option<VarId>,
    h_lcca: Option<VarId>,
    h_kcca: Option<VarId>,
    n_labels: usize,
    d: usize,
) -> Result<VarId> {
    if h_lsa.is_none() && h_lcca.is_none() && h_kcca.is_none() {
        return Err(CoreError::AllBranchesDisabled);
    }
    let mut zero = || {
        let t = Tensor::zeros(&[n_labels, d]);
        g.constant(t)
    };
    let a = h_lsa.unwrap_or_else(&mut zero);
    let b = h_lcca.unwrap_or_else(&mut zero);
    let c = h_kcca.unwrap_or_else(&mut zero);
    Ok(g.stack_channels3(a, b, c))
}

/// Head on the graph: fused `(L_n, 3, d)` to one logit per label.
pub fn head_logits_vars(g: &mut Graph, fused: VarId, head: &HeadVars, leaky_slope: f64) -> VarId {
    let c1 = g.conv1d_same(fused, head.conv1_w, head.conv1_b);
    let a = g.leaky_relu(c1, leaky_slope);
    let c2 = g.conv1d_same(a, head.conv2_w, head.conv2_b); // (L_n, 1, d)
    let shape = g.value(c2).shape().to_vec();
    let flat = g.reshape(c2, &[shape[0], shape[2]]);
    g.row_means(flat) // (L_n)
}

/// Plain-tensor fusion (spec surface): channel 0 LSA, 1 LCCA, 2 KCCA.
pub fn fuse(
    h_lsa: Option<&Tensor>,
    h_lcca: Option<&Tensor>,
    h_kcca: Option<&Tensor>,
    n_labels: usize,
    d: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bind = |g: &mut Graph, t: Option<&Tensor>| t.map(|t| g.constant(t.clone()));
    let a = bind(&mut g, h_lsa);
    let b = bind(&mut g, h_lcca);
    let c = bind(&mut g, h_kcca);
    let fused = fuse_vars(&mut g, a, b, c, n_labels, d)?;
    Ok(g.value(fused).clone())
}

/// Per-label probabilities from a fused representation (eval path).
pub fn forward_head(fused: &Tensor, head: &HeadParams, leaky_slope: f64) -> Result<Vec<f64>> {
    if fused.shape().len() != 3 || fused.shape()[1] != 3 {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "fused representation must be (labels, 3, d), got {:?}",
            fused.shape()
        )));
    }
    let mut g = Graph::new();
    let vars = head.map(&mut |t: &Tensor| g.constant(t.clone()));
    let f = g.constant(fused.clone());
    let logits = head_logits_vars(&mut g, f, &vars, leaky_slope);
    Ok(g.value(logits).data().iter().map(|&z| sigmoid_stable(z)).collect())
}

/// Mean binary cross-entropy over labels with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probs: &[f64], gold: &[f64]) -> Result<f64> {
    if probs.len() != gold.len() {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "{} probabilities vs {} targets",
            probs.len(),
            gold.len()
        )));
    }
    let n = probs.len() as f64;
    let mut loss = 0.0;
    for (p, y) in probs.iter().zip(gold) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p);
    }
    Ok(loss / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;
    use alloc::vec;

    #[test]
    fn fuse_stacks_and_zeroes_disabled_channels() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = Tensor::from_vec(&[2, 2], vec![9.0, 10.0, 11.0, 12.0]).unwrap();
        let fused = fuse(Some(&a), Some(&b), Some(&c), 2, 2).unwrap();
        assert_eq!(fused.at3(0, 0, 1), 2.0);
        assert_eq!(fused.at3(1, 1, 0), 7.0);
        assert_eq!(fused.at3(1, 2, 1), 12.0);

        let fused = fuse(Some(&a), Some(&b), None, 2, 2).unwrap();
        for l in 0..2 {
            for j in 0..2 {
                assert_eq!(fused.at3(l, 2, j), 0.0);
            }
        }
        let fused = fuse(Some(&a), None, None, 2, 2).unwrap();
        for l in 0..2 {
            for j in 0..2 {
                assert_eq!(fused.at3(l, 1, j), 0.0);
                assert_eq!(fused.at3(l, 2, j), 0.0);
            }
        }
        assert!(matches!(fuse(None, None, None, 2, 2), Err(CoreError::AllBranchesDisabled)));
    }

    #[test]
    fn zero_input_zero_bias_gives_half_probability() {
        let mut rng = derive(31, 0);
        let head = HeadParams::init(4, 3, &mut rng).unwrap();
        let fused = Tensor::zeros(&[50, 3, 16]);
        let probs = forward_head(&fused, &head, 0.01).unwrap();
        assert_eq!(probs.len(), 50);
        for p in probs {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_stay_in_unit_interval() {
        let mut rng = derive(32, 0);
        let head = HeadParams::init(8, 3, &mut rng).unwrap();
        let fused = normal_tensor(&mut rng, &[50, 3, 128], 3.0);
        let probs = forward_head(&fused, &head, 0.01).unwrap();
        assert_eq!(probs.len(), 50);
        assert!(probs.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn head_rejects_even_kernels() {
        let mut rng = derive(33, 0);
        assert!(HeadParams::init(4, 2, &mut rng).is_err());
        assert!(HeadParams::init(0, 3, &mut rng).is_err());
    }

    #[test]
    fn bce_known_values() {
        // perfect prediction
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() <= 1e-6);
        // coin flip
        let l = bce_loss(&[0.5, 0.5, 0.5], &[1.0, 0.0, 1.0]).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() <= 1e-9);
        // hand-evaluated case
        let l = bce_loss(&[0.9, 0.2], &[1.0, 0.0]).unwrap();
        let expected = -(libm::log(0.9) + libm::log(0.8)) / 2.0;
        assert!((l - expected).abs() <= 1e-12);
        // shape mismatch
        assert!(bce_loss(&[0.5], &[1.0, 0.0]).is_err());
    }
}
