//! Metrics, per-task model fusion and prediction with trained stacks.

mod fusion;
mod metrics;
mod predict;

pub use fusion::{fuse, fused_scores, FusionMap};
pub use metrics::{auroc, rmse, Metric, TaskScore};
pub use predict::{featurize_compounds, predict, predict_fused, Predictions};

use crate::datagen::prepare::{fold_counts, meets_quorum_in_fold};
use crate::datagen::{DatasetBundle, Qualifier};
use crate::model::{forward, ModelError, ModelParams};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("metric needs both classes")]
    SingleClass,
    #[error("no values to score")]
    Empty,
    #[error("non-finite score")]
    NonFinite,
    #[error("length mismatch: {expected} vs {got}")]
    Length { expected: usize, got: usize },
    #[error("task {task_idx} has no score from model {model_id}")]
    MissingCandidate { task_idx: usize, model_id: u32 },
    #[error("task {task_idx} scored twice by model {model_id}")]
    DuplicateScore { task_idx: usize, model_id: u32 },
    #[error("task {task_idx} mixes metrics across candidates")]
    MixedMetrics { task_idx: usize },
    #[error("unknown model id {model_id}")]
    UnknownModel { model_id: u32 },
    #[error("task {task_idx} is not routed to any model")]
    Unrouted { task_idx: usize },
    #[error("task {task_idx} out of range ({n_outputs} outputs)")]
    TaskOutOfRange { task_idx: usize, n_outputs: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Scores every evaluable task of `bundle` on one fold.
///
/// Auxiliary tasks and tasks whose labels in this fold miss the quorum are
/// skipped, so they produce no score at all. Regression columns are scored on
/// uncensored values only.
pub fn evaluate(
    model: &ModelParams,
    bundle: &DatasetBundle,
    fold: u8,
    quorum: usize,
    n_folds: u8,
    model_id: u32,
) -> Result<Vec<TaskScore>, EvalError> {
    let rows = bundle.rows_in_folds(&[fold]);
    let sub = bundle
        .select_rows(&rows)
        .map_err(|e| EvalError::Model(ModelError::Shape(e.to_string())))?;
    let pass = forward(model, &sub.x)?;
    let mut out = Vec::new();
    for (col, task) in bundle.tasks.iter().enumerate() {
        if !task.eval_included {
            continue;
        }
        let cls = task.kind.is_classification();
        let counts = fold_counts(bundle, col, n_folds);
        if !counts
            .get(fold as usize)
            .is_some_and(|&c| meets_quorum_in_fold(c, cls, quorum))
        {
            continue;
        }
        let (mut pred, mut target) = (Vec::new(), Vec::new());
        for i in 0..sub.n_rows() {
            if cls {
                if let Some(y) = sub.labels.cls.get(i, col) {
                    pred.push(pass.output(i, col));
                    target.push(y);
                }
            } else if let Some(v) = sub.labels.reg.get(i, col) {
                let q = Qualifier::from_code(sub.labels.censor.get(i, col).unwrap_or(0.0));
                if q == Qualifier::Eq {
                    pred.push(pass.output(i, col));
                    target.push(v);
                }
            }
        }
        let value = if cls {
            auroc(&pred, &target)
        } else if pred.is_empty() {
            continue;
        } else {
            rmse(&pred, &target)
        }?;
        out.push(TaskScore {
            task_idx: col,
            metric: fusion::metric_for(cls),
            value,
            fold,
            model_id,
        });
    }
    Ok(out)
}
