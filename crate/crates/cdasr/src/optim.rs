//! Adam optimizer over a [`ParameterSet`], with the standard bias-corrected
//! first and second moment estimates.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::network::ParameterSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates for every parameter plus the update counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first: BTreeMap<String, ArrayD<f64>>,
    second: BTreeMap<String, ArrayD<f64>>,
    step: u64,
}

impl OptimizerState {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new(params: &ParameterSet) -> Self {
        let first = params
            .iter()
            .map(|(n, p)| (n.to_string(), ArrayD::zeros(p.value.raw_dim())))
            .collect::<BTreeMap<_, _>>();
        let second = first.clone();
        OptimizerState {
            first,
            second,
            step: 0,
        }
    }

    /// Rebuild state from checkpointed arrays, validating coverage and
    /// shapes against `params`.
    pub fn from_parts(
        step: u64,
        first: BTreeMap<String, ArrayD<f64>>,
        second: BTreeMap<String, ArrayD<f64>>,
        params: &ParameterSet,
    ) -> Result<Self> {
        for (label, map) in [("first", &first), ("second", &second)] {
            if map.len() != params.len() {
                return Err(Error::invalid(format!(
                    "optimizer {label} moments cover {} parameters, expected {}",
                    map.len(),
                    params.len()
                )));
            }
            for (name, arr) in map {
                if !params.contains(name) {
                    return Err(Error::invalid(format!(
                        "optimizer {label} moment for unknown parameter {name}"
                    )));
                }
                if arr.shape() != params.get(name).shape() {
                    return Err(Error::ShapeMismatch {
                        name: format!("opt.{label}.{name}"),
                        expected: params.get(name).shape().to_vec(),
                        found: arr.shape().to_vec(),
                    });
                }
            }
        }
        Ok(OptimizerState {
            first,
            second,
            step,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment pairs in stable name order, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>, &ArrayD<f64>)> {
        self.first
            .iter()
            .map(|(n, m)| (n.as_str(), m, &self.second[n]))
    }
}

/// One Adam update from the gradients currently stored in `params`.
///
/// Gradient slots are left untouched; callers zero them between steps.
pub fn optimizer_step(
    params: &mut ParameterSet,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if opt.first.len() != params.len() {
        return Err(Error::invalid(format!(
            "optimizer state covers {} parameters, expected {}",
            opt.first.len(),
            params.len()
        )));
    }
    opt.step += 1;
    let t = opt.step as f64;
    let bias1 = 1.0 - BETA1.powf(t);
    let bias2 = 1.0 - BETA2.powf(t);
    for (name, p) in params.iter_mut() {
        if !p.grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        let m = opt
            .first
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("optimizer state missing {name}")))?;
        let v = opt.second.get_mut(name).expect("first/second keys agree");
        ndarray::Zip::from(&mut p.value)
            .and(m)
            .and(v)
            .and(&p.grad)
            .for_each(|w, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            });
    }
    Ok(())
}
