//! Pooled-data reference training, used to check federated rounds.
//!
//! All partners' batches are stacked into one batch and trained with a single
//! model whose head is the column-wise concatenation of the private heads.
//! With per-sample loss normalization and data-proportional weighting, the
//! pooled trunk gradient equals the weighted sum of partner gradients. Each
//! partner's head block receives `n_p/N` of its local gradient from the
//! pooled loss, so it steps with learning rate `lr·N/n_p`.

use crate::datagen::{Labels, TaskMeta};
use crate::model::{backward, Dense, ModelError, ModelParams};
use crate::primitives::CsrMatrix;

/// One partner's contribution to a pooled step.
pub struct PooledBatch<'a> {
    pub x: CsrMatrix,
    pub labels: Labels,
    pub tasks: &'a [TaskMeta],
}

pub struct PooledOracle {
    pub trunk: ModelParams,
    pub heads: Vec<Dense>,
}

fn concat_heads(heads: &[Dense]) -> Dense {
    let n_in = heads[0].n_in;
    let n_out: usize = heads.iter().map(|h| h.n_out).sum();
    let mut w = Vec::with_capacity(n_in * n_out);
    for k in 0..n_in {
        for h in heads {
            w.extend_from_slice(&h.w[k * h.n_out..(k + 1) * h.n_out]);
        }
    }
    let b = heads.iter().flat_map(|h| h.b.iter().copied()).collect();
    Dense { n_in, n_out, w, b }
}

impl PooledOracle {
    /// Starts from a shared trunk (taken from `start`) and every partner's head.
    pub fn new(start: &ModelParams, heads: Vec<Dense>) -> Self {
        Self {
            trunk: start.clone(),
            heads,
        }
    }

    /// One SGD step on the union of the partners' batches.
    pub fn step(&mut self, batches: &[PooledBatch<'_>], lr: f64) -> Result<(), ModelError> {
        let n_cols: usize = self.heads.iter().map(|h| h.n_out).sum();
        let mut xs = Vec::new();
        let (mut cls, mut reg, mut cen) = (Vec::new(), Vec::new(), Vec::new());
        let mut tasks = Vec::new();
        let mut offset = 0;
        for (b, h) in batches.iter().zip(&self.heads) {
            xs.push(&b.x);
            let shift = |m: &CsrMatrix| m.shift_cols(offset, n_cols).map_err(|e| ModelError::Shape(e.to_string()));
            cls.push(shift(&b.labels.cls)?);
            reg.push(shift(&b.labels.reg)?);
            cen.push(shift(&b.labels.censor)?);
            tasks.extend_from_slice(b.tasks);
            offset += h.n_out;
        }
        let stack = |parts: &[CsrMatrix]| {
            CsrMatrix::vstack(&parts.iter().collect::<Vec<_>>()).map_err(|e| ModelError::Shape(e.to_string()))
        };
        let x = CsrMatrix::vstack(&xs).map_err(|e| ModelError::Shape(e.to_string()))?;
        let labels = Labels {
            cls: stack(&cls)?,
            reg: stack(&reg)?,
            censor: stack(&cen)?,
        };
        let model = ModelParams {
            head: concat_heads(&self.heads),
            catalogue_head: None,
            ..self.trunk.clone()
        };
        let (_, g) = backward(&model, &x, &labels, &tasks)?;
        let total = x.n_rows() as f64;
        let no_head = vec![0.0; self.trunk.head.n_params()];
        self.trunk = self.trunk.apply_update(&g.trunk_grad, &no_head, lr)?;

        // head gradient is laid out like the concatenated head: W rows, then b
        let n_in = self.heads[0].n_in;
        let mut col = 0;
        for (b, h) in batches.iter().zip(self.heads.iter_mut()) {
            let n = b.x.n_rows() as f64;
            if n > 0.0 {
                let step = lr * total / n;
                for k in 0..n_in {
                    for j in 0..h.n_out {
                        h.w[k * h.n_out + j] -= step * g.head_grad[k * n_cols + col + j];
                    }
                }
                for j in 0..h.n_out {
                    h.b[j] -= step * g.head_grad[n_in * n_cols + col + j];
                }
            }
            col += h.n_out;
        }
        Ok(())
    }
}
