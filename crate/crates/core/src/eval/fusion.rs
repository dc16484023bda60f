use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::metrics::{Metric, TaskScore};
use super::EvalError;

/// Selected model per task.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionMap {
    pub selection: BTreeMap<usize, u32>,
}

impl FusionMap {
    pub fn model_for(&self, task_idx: usize) -> Option<u32> {
        self.selection.get(&task_idx).copied()
    }

    pub fn model_ids(&self) -> BTreeSet<u32> {
        self.selection.values().copied().collect()
    }
}

/// Picks the best candidate per task from validation scores.
///
/// Every task that appears must be scored by every candidate that appears
/// anywhere. Ties go to the lowest model id.
pub fn fuse(validation: &[TaskScore]) -> Result<FusionMap, EvalError> {
    let models: BTreeSet<u32> = validation.iter().map(|s| s.model_id).collect();
    let mut per_task: BTreeMap<usize, BTreeMap<u32, &TaskScore>> = BTreeMap::new();
    for s in validation {
        if per_task.entry(s.task_idx).or_default().insert(s.model_id, s).is_some() {
            return Err(EvalError::DuplicateScore {
                task_idx: s.task_idx,
                model_id: s.model_id,
            });
        }
    }
    let mut selection = BTreeMap::new();
    for (task, scores) in per_task {
        if let Some(&m) = models.iter().find(|m| !scores.contains_key(m)) {
            return Err(EvalError::MissingCandidate { task_idx: task, model_id: m });
        }
        let metric = scores.values().next().expect("non-empty").metric;
        if scores.values().any(|s| s.metric != metric) {
            return Err(EvalError::MixedMetrics { task_idx: task });
        }
        let mut best: Option<&TaskScore> = None;
        // BTreeMap iteration is by ascending model id, so strict improvement keeps the lowest id on ties
        for s in scores.values() {
            let better = match best {
                None => true,
                Some(b) if metric.higher_is_better() => s.value > b.value,
                Some(b) => s.value < b.value,
            };
            if better {
                best = Some(s);
            }
        }
        selection.insert(task, best.expect("non-empty").model_id);
    }
    Ok(FusionMap { selection })
}

/// Scores of the fused model: for each task, the selected candidate's score.
pub fn fused_scores(map: &FusionMap, scores: &[TaskScore], fused_id: u32) -> Vec<TaskScore> {
    scores
        .iter()
        .filter(|s| map.model_for(s.task_idx) == Some(s.model_id))
        .map(|s| TaskScore {
            model_id: fused_id,
            ..s.clone()
        })
        .collect()
}

pub(crate) fn metric_for(kind_is_cls: bool) -> Metric {
    if kind_is_cls {
        Metric::Auroc
    } else {
        Metric::Rmse
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(task: usize, model: u32, v: f64) -> TaskScore {
        TaskScore {
            task_idx: task,
            metric: Metric::Auroc,
            value: v,
            fold: 3,
            model_id: model,
        }
    }

    #[test]
    fn hand_argmax_with_tie() {
        let v = [[0.7, 0.6, 0.9], [0.8, 0.5, 0.9]];
        let scores: Vec<_> = (0..2)
            .flat_map(|m| (0..3).map(move |t| s(t, m as u32 + 1, v[m][t])))
            .collect();
        let map = fuse(&scores).unwrap();
        assert_eq!(map.selection, BTreeMap::from([(0, 2), (1, 1), (2, 1)]));
    }

    #[test]
    fn single_candidate_is_identity() {
        let map = fuse(&[s(0, 5, 0.6), s(4, 5, 0.7)]).unwrap();
        assert_eq!(map.selection, BTreeMap::from([(0, 5), (4, 5)]));
    }

    #[test]
    fn rmse_prefers_lower_and_missing_is_error() {
        let mut a = s(0, 1, 1.2);
        let mut b = s(0, 2, 0.9);
        a.metric = Metric::Rmse;
        b.metric = Metric::Rmse;
        assert_eq!(fuse(&[a.clone(), b]).unwrap().model_for(0), Some(2));
        assert!(matches!(
            fuse(&[a, s(1, 2, 0.5), s(1, 1, 0.5)]),
            Err(EvalError::MissingCandidate { task_idx: 0, model_id: 2 })
        ));
    }
}
