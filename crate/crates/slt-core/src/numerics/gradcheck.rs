//! Finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::param::ParamStore;
use super::scalar::{s, to_f64, Scalar};
use super::tensor::Tensor;

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest |analytic − central difference| over all checked elements.
    pub max_abs_diff: f64,
    /// `name[index]` of the element attaining the maximum.
    pub worst: String,
    /// Elements checked (all elements of all trainable parameters).
    pub elements: usize,
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` per trainable element, against
/// the analytic map from `Graph::backward`. The `loss` closure must evaluate
/// the model afresh on the perturbed store (a new graph per call). Meaningful
/// for f64 stores; single precision drowns an h of 1e-5 in rounding noise.
pub fn finite_difference_check<S: Scalar>(
    store: &mut ParamStore<S>,
    analytic: &BTreeMap<String, Tensor<S>>,
    h: f64,
    mut loss: impl FnMut(&ParamStore<S>) -> Result<f64>,
) -> Result<GradCheck> {
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    let mut report = GradCheck {
        max_abs_diff: 0.0,
        worst: String::new(),
        elements: 0,
    };
    for name in &names {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Config(format!("no analytic gradient for {name}")))?
            .clone();
        let numel = store.tensor(name)?.numel();
        for idx in 0..numel {
            let orig = store.tensor(name)?.data()[idx];
            store.get_mut(name)?.value.data_mut()[idx] = orig + s::<S>(h);
            let f_plus = loss(store)?;
            store.get_mut(name)?.value.data_mut()[idx] = orig - s::<S>(h);
            let f_minus = loss(store)?;
            store.get_mut(name)?.value.data_mut()[idx] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite {
                    op: "finite_difference_check",
                });
            }
            let fd = (f_plus - f_minus) / (2.0 * h);
            let diff = (fd - to_f64(grad.data()[idx])).abs();
            if diff > report.max_abs_diff {
                report.max_abs_diff = diff;
                report.worst = format!("{name}[{idx}]");
            }
            report.elements += 1;
        }
    }
    Ok(report)
}
