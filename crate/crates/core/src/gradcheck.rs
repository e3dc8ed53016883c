//! Central finite-difference gradient verification.
//!
//! The checker treats the loss as a black-box function of a named parameter
//! map, so it stays independent of the reverse-mode path it verifies.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Spec'd step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Spec'd per-tensor relative error bound.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Gradients with norms below this are under the resolution of central
/// differences in f64 (rounding noise ~1e-16 / step) and compare as equal.
pub const FD_NOISE_FLOOR: f64 = 1e-8;

/// Norm-based relative error between an analytic and a numeric gradient.
///
/// `||a - b|| / max(||a||, ||b||)`, zero when both norms sit below the
/// finite-difference noise floor.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let mut diff = 0.0;
    for (a, b) in analytic.data().iter().zip(numeric.data()) {
        diff += (a - b) * (a - b);
    }
    let diff = libm::sqrt(diff);
    let denom = analytic.norm().max(numeric.norm());
    if denom < FD_NOISE_FLOOR {
        0.0
    } else {
        diff / denom
    }
}

/// Central finite differences of `loss` over every entry of every tensor.
pub fn finite_difference<F>(
    loss: &mut F,
    at: &BTreeMap<String, Tensor>,
    step: f64,
) -> BTreeMap<String, Tensor>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> f64,
{
    let mut grads = BTreeMap::new();
    for (name, tensor) in at {
        let mut grad = Tensor::zeros(tensor.shape());
        let mut work = at.clone();
        for i in 0..tensor.numel() {
            let original = tensor.data()[i];
            work.get_mut(name).expect("key from same map").data_mut()[i] = original + step;
            let plus = loss(&work);
            work.get_mut(name).expect("key from same map").data_mut()[i] = original - step;
            let minus = loss(&work);
            work.get_mut(name).expect("key from same map").data_mut()[i] = original;
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        grads.insert(name.clone(), grad);
    }
    grads
}

/// One tensor's verdict.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub relative_error: f64,
}

/// Full report over a parameter set.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_tensor: Vec<TensorCheck>,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.relative_error.partial_cmp(&b.relative_error).expect("finite errors"))
    }
}

/// Compare analytic gradients against central finite differences of `loss`.
pub fn check_gradients<F>(
    loss: &mut F,
    at: &BTreeMap<String, Tensor>,
    analytic: &BTreeMap<String, Tensor>,
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&BTreeMap<String, Tensor>) -> f64,
{
    let numeric = finite_difference(loss, at, step);
    let mut per_tensor = Vec::new();
    let mut max_relative_error: f64 = 0.0;
    for (name, fd) in &numeric {
        let zero = Tensor::zeros(fd.shape());
        let an = analytic.get(name).unwrap_or(&zero);
        let err = relative_error(an, fd);
        max_relative_error = max_relative_error.max(err);
        per_tensor.push(TensorCheck { name: name.clone(), relative_error: err });
    }
    GradCheckReport { per_tensor, max_relative_error, tolerance }
}
