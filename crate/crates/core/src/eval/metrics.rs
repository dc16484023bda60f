use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "auroc")]
    Auroc,
    #[serde(rename = "rmse")]
    Rmse,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Rmse => "rmse",
        }
    }

    /// Whether a larger value is better.
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Auroc)
    }
}

/// One metric of one model on one task and fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_idx: usize,
    pub metric: Metric,
    pub value: f64,
    pub fold: u8,
    pub model_id: u32,
}

/// Rank-based AUROC; tied scores get their average rank, so ties count half.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks are 1-based; the tie group shares the mean of start+1..=end
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] > 0.0).count();
        pos_rank_sum += mid_rank * pos_in_group as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != target.len() {
        return Err(EvalError::Length {
            expected: pred.len(),
            got: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_hand_cases() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[-1.0, -1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[-1.0, -1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 6], &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]).unwrap(), 0.5);
        // one discordant pair of 2·2
        assert_eq!(auroc(&[0.1, 0.3, 0.2, 0.4], &[-1.0, -1.0, 1.0, 1.0]).unwrap(), 0.75);
        // a tie between a positive and a negative counts half: (3 + 0.5)/4
        assert_eq!(auroc(&[0.1, 0.3, 0.3, 0.4], &[-1.0, -1.0, 1.0, 1.0]).unwrap(), 0.875);
        assert!(matches!(auroc(&[0.1, 0.2], &[1.0, 1.0]), Err(EvalError::SingleClass)));
    }

    #[test]
    fn rmse_hand_case() {
        assert!((rmse(&[1.0, 2.0], &[1.0, 4.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(rmse(&[], &[]), Err(EvalError::Empty)));
    }
}
