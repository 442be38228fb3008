//! Central finite differences, for checking analytic gradients.
//!
//! These helpers only ever evaluate forward passes, so they are independent
//! of the backward implementations they are used to verify.

use crate::params::{ParamId, ParamStore};
use crate::Tensor;

/// `(f(p + h) - f(p - h)) / 2h` for every element of parameter `id`.
pub fn numeric_gradient(store: &mut ParamStore, id: ParamId, h: f64, f: &mut dyn FnMut(&ParamStore) -> f64) -> Tensor {
    let n = store.value(id).numel();
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + h;
        let plus = f(store);
        store.value_mut(id).data_mut()[i] = orig - h;
        let minus = f(store);
        store.value_mut(id).data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * h);
    }
    Tensor::new(store.value(id).shape().to_vec(), out)
}

/// Central differences with respect to an input tensor.
pub fn numeric_gradient_input(x: &Tensor, h: f64, f: &mut dyn FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let diff = analytic.zip_map(numeric, |a, b| a - b).norm();
    let scale = analytic.norm().max(numeric.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
