//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::io::{atomic_write_json, read_json, FORMAT_VERSION};
use crate::tensor::Shape;

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub shape: Shape,
    pub data: Vec<f64>,
}

/// Name-sorted parameter collection; iteration order is the lexicographic
/// name order, which keeps optimizer updates deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Shape, data: Vec<f64>) -> Result<()> {
        if data.len() != shape.0 * shape.1 {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::insert",
                expected: format!("{} values", shape.0 * shape.1),
                got: format!("{}", data.len()),
            });
        }
        self.params.insert(name.to_string(), Parameter { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn total_len(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }
}

/// Adam optimizer state with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First/second moment per parameter name.
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One Adam update over all parameters present in `grads`. Parameters
/// without a gradient entry are left untouched. NaN or infinite gradients
/// abort with an error naming the parameter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
) -> Result<()> {
    for (name, grad) in grads {
        let param = params
            .params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name:?}")))?;
        if grad.len() != param.data.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                expected: format!("{} gradient values for {name:?}", param.data.len()),
                got: format!("{}", grad.len()),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NanGradient {
                param: name.clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, grad) in grads {
        let param = params.params.get_mut(name).expect("validated above");
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        if m.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step moments",
                expected: format!("{} values for {name:?}", grad.len()),
                got: format!("{}", m.len()),
            });
        }
        for i in 0..grad.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param.data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    format_version: String,
    params: ParamStore,
}

/// Persists a parameter store as a versioned document.
pub fn save_params(path: &Path, params: &ParamStore) -> Result<()> {
    atomic_write_json(
        path,
        &ParamsDoc {
            format_version: FORMAT_VERSION.to_string(),
            params: params.clone(),
        },
    )
}

/// Loads a parameter store saved by `save_params`.
pub fn load_params(path: &Path) -> Result<ParamStore> {
    let doc: ParamsDoc = read_json(path)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!(
                "unsupported format_version {:?}, expected {FORMAT_VERSION:?}",
                doc.format_version
            ),
        });
    }
    for (name, p) in &doc.params.params {
        if p.data.len() != p.shape.0 * p.shape.1 {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!(
                    "parameter {name:?} has {} values for shape ({}, {})",
                    p.data.len(),
                    p.shape.0,
                    p.shape.1
                ),
            });
        }
    }
    Ok(doc.params)
}
