use std::collections::BTreeMap;

use super::fusion::FusionMap;
use super::EvalError;
use crate::datagen::featurize_matrix;
use crate::model::{forward, ModelParams};
use crate::primitives::CsrMatrix;

/// Row-major predictions for a set of output columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub columns: Vec<usize>,
    pub n_rows: usize,
    pub values: Vec<f64>,
}

impl Predictions {
    pub fn get(&self, row: usize, k: usize) -> f64 {
        self.values[row * self.columns.len() + k]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, k)).collect()
    }
}

fn resolve_columns(n_outputs: usize, tasks: Option<&[usize]>) -> Result<Vec<usize>, EvalError> {
    match tasks {
        None => Ok((0..n_outputs).collect()),
        Some(t) => {
            if let Some(&bad) = t.iter().find(|&&c| c >= n_outputs) {
                return Err(EvalError::TaskOutOfRange { task_idx: bad, n_outputs });
            }
            Ok(t.to_vec())
        }
    }
}

/// Raw outputs (logits for classification columns) of one trunk+head stack.
pub fn predict(model: &ModelParams, x: &CsrMatrix, tasks: Option<&[usize]>) -> Result<Predictions, EvalError> {
    let columns = resolve_columns(model.n_outputs(), tasks)?;
    let pass = forward(model, x)?;
    let mut values = Vec::with_capacity(pass.n_rows * columns.len());
    for i in 0..pass.n_rows {
        values.extend(columns.iter().map(|&c| pass.output(i, c)));
    }
    Ok(Predictions {
        columns,
        n_rows: pass.n_rows,
        values,
    })
}

/// Routes each task to the model the fusion map selected for it. Tasks the
/// map does not mention fall back to `default_model` when given.
pub fn predict_fused(
    models: &BTreeMap<u32, ModelParams>,
    fusion: &FusionMap,
    default_model: Option<u32>,
    x: &CsrMatrix,
    tasks: Option<&[usize]>,
) -> Result<Predictions, EvalError> {
    let first = models.values().next().ok_or(EvalError::Empty)?;
    if models.values().any(|m| m.n_outputs() != first.n_outputs()) {
        return Err(EvalError::Model(crate::model::ModelError::Shape(
            "fused models disagree on output count".into(),
        )));
    }
    let columns = match tasks {
        Some(t) => resolve_columns(first.n_outputs(), Some(t))?,
        None if default_model.is_some() => (0..first.n_outputs()).collect(),
        None => fusion.selection.keys().copied().collect(),
    };
    let mut routes = Vec::with_capacity(columns.len());
    for &c in &columns {
        let id = fusion
            .model_for(c)
            .or(default_model)
            .ok_or(EvalError::Unrouted { task_idx: c })?;
        if !models.contains_key(&id) {
            return Err(EvalError::UnknownModel { model_id: id });
        }
        routes.push(id);
    }
    let mut per_model = BTreeMap::new();
    for &id in &routes {
        if let std::collections::btree_map::Entry::Vacant(e) = per_model.entry(id) {
            e.insert(forward(&models[&id], x)?);
        }
    }
    let n_rows = x.n_rows();
    let mut values = Vec::with_capacity(n_rows * columns.len());
    for i in 0..n_rows {
        for (&c, id) in columns.iter().zip(&routes) {
            values.push(per_model[id].output(i, c));
        }
    }
    Ok(Predictions { columns, n_rows, values })
}

/// Featurizes new compounds the way training data was featurized.
pub fn featurize_compounds(ids: &[u64], feature_dim: usize, n_active: usize) -> CsrMatrix {
    featurize_matrix(ids, feature_dim, n_active)
}
