//! Forward pass, multi-task loss and exact backpropagation.

use super::params::{Dense, ModelParams};
use super::ModelError;
use crate::datagen::{Labels, Qualifier, TaskKind, TaskMeta};
use crate::primitives::CsrMatrix;

/// Activations of every trunk layer plus the task outputs, all row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPass {
    pub n_rows: usize,
    /// Post-activation values per trunk layer (`n_rows × width`).
    pub hidden: Vec<Vec<f64>>,
    /// Head outputs followed by catalogue outputs (`n_rows × n_outputs`).
    pub outputs: Vec<f64>,
    pub n_outputs: usize,
}

impl ForwardPass {
    pub fn output(&self, row: usize, col: usize) -> f64 {
        self.outputs[row * self.n_outputs + col]
    }

    pub fn last_hidden(&self) -> &[f64] {
        self.hidden.last().expect("trunk has at least one layer")
    }
}

fn dense_forward(layer: &Dense, input: &[f64], n_rows: usize, out: &mut [f64]) {
    for i in 0..n_rows {
        let x = &input[i * layer.n_in..(i + 1) * layer.n_in];
        let y = &mut out[i * layer.n_out..(i + 1) * layer.n_out];
        y.copy_from_slice(&layer.b);
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let wrow = &layer.w[k * layer.n_out..(k + 1) * layer.n_out];
            y.iter_mut().zip(wrow).for_each(|(a, w)| *a += xk * w);
        }
    }
}

pub fn forward(params: &ModelParams, x: &CsrMatrix) -> Result<ForwardPass, ModelError> {
    if x.n_cols() != params.feature_dim() {
        return Err(ModelError::ShapeMismatch {
            expected: params.feature_dim(),
            got: x.n_cols(),
        });
    }
    let n = x.n_rows();
    let act = params.nonlinearity;
    let first = &params.trunk[0];
    let mut h = vec![0.0; n * first.n_out];
    for i in 0..n {
        let y = &mut h[i * first.n_out..(i + 1) * first.n_out];
        y.copy_from_slice(&first.b);
        for (j, v) in x.row_iter(i) {
            let wrow = &first.w[j * first.n_out..(j + 1) * first.n_out];
            y.iter_mut().zip(wrow).for_each(|(a, w)| *a += v * w);
        }
    }
    h.iter_mut().for_each(|z| *z = act.apply(*z));
    let mut hidden = vec![h];
    for layer in &params.trunk[1..] {
        let mut next = vec![0.0; n * layer.n_out];
        dense_forward(layer, hidden.last().unwrap(), n, &mut next);
        next.iter_mut().for_each(|z| *z = act.apply(*z));
        hidden.push(next);
    }

    let last = hidden.last().unwrap();
    let n_head = params.n_head();
    let n_out = params.n_outputs();
    let mut outputs = vec![0.0; n * n_out];
    let mut head_out = vec![0.0; n * n_head];
    dense_forward(&params.head, last, n, &mut head_out);
    for i in 0..n {
        outputs[i * n_out..i * n_out + n_head].copy_from_slice(&head_out[i * n_head..(i + 1) * n_head]);
    }
    if let Some(cat) = &params.catalogue_head {
        let mut cat_out = vec![0.0; n * cat.n_out];
        dense_forward(cat, last, n, &mut cat_out);
        for i in 0..n {
            outputs[i * n_out + n_head..(i + 1) * n_out]
                .copy_from_slice(&cat_out[i * cat.n_out..(i + 1) * cat.n_out]);
        }
    }
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("activation"));
    }
    Ok(ForwardPass {
        n_rows: n,
        hidden,
        outputs,
        n_outputs: n_out,
    })
}

/// Loss of a batch: the total and each task's share of it.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_task: Vec<f64>,
    /// Observed label entries in the batch.
    pub n_observed: usize,
}

/// Per-entry loss and its derivative w.r.t. the prediction.
pub fn logistic_loss(y: f64, pred: f64) -> (f64, f64) {
    // log(1 + exp(−m)) evaluated stably
    let m = y * pred;
    let loss = if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    };
    let sig_neg = 1.0 / (1.0 + m.exp());
    (loss, -y * sig_neg)
}

/// Squared error with one-sided censoring: a `<` bound is satisfied by any
/// prediction at or below it, a `>` bound by any prediction at or above it.
pub fn censored_squared_loss(value: f64, qualifier: Qualifier, pred: f64) -> (f64, f64) {
    let satisfied = match qualifier {
        Qualifier::Eq => false,
        Qualifier::Lt => pred <= value,
        Qualifier::Gt => pred >= value,
    };
    if satisfied {
        (0.0, 0.0)
    } else {
        let d = pred - value;
        (d * d, 2.0 * d)
    }
}

fn check_labels(
    n_rows: usize,
    n_outputs: usize,
    labels: &Labels,
    tasks: &[TaskMeta],
) -> Result<(), ModelError> {
    if labels.n_rows() != n_rows {
        return Err(ModelError::ShapeMismatch {
            expected: n_rows,
            got: labels.n_rows(),
        });
    }
    if labels.n_cols() != n_outputs || tasks.len() != n_outputs {
        return Err(ModelError::ShapeMismatch {
            expected: n_outputs,
            got: labels.n_cols().min(tasks.len()),
        });
    }
    Ok(())
}

/// Loss and `∂L/∂ŷ` (row-major, same shape as the outputs).
///
/// `L = (1/n_rows) Σ w_t · ℓ(y, ŷ)` over observed entries, with logistic
/// loss on classification columns and censored squared error on regression
/// columns.
pub fn loss_and_output_grad(
    pass: &ForwardPass,
    labels: &Labels,
    tasks: &[TaskMeta],
) -> Result<(LossValue, Vec<f64>), ModelError> {
    check_labels(pass.n_rows, pass.n_outputs, labels, tasks)?;
    let n = pass.n_rows;
    let norm = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut per_task = vec![0.0; tasks.len()];
    let mut grad = vec![0.0; pass.outputs.len()];
    let mut observed = 0;
    for i in 0..n {
        for (c, y) in labels.cls.row_iter(i) {
            if !tasks[c].kind.is_classification() {
                return Err(ModelError::KindMismatch { col: c });
            }
            let (l, d) = logistic_loss(y, pass.output(i, c));
            let w = tasks[c].train_weight * norm;
            per_task[c] += w * l;
            grad[i * pass.n_outputs + c] += w * d;
            observed += 1;
        }
        let (cols, vals) = labels.reg.row(i);
        let (_, codes) = labels.censor.row(i);
        for ((&c, &v), &code) in cols.iter().zip(vals).zip(codes) {
            if tasks[c].kind != TaskKind::Reg {
                return Err(ModelError::KindMismatch { col: c });
            }
            let (l, d) = censored_squared_loss(v, Qualifier::from_code(code), pass.output(i, c));
            let w = tasks[c].train_weight * norm;
            per_task[c] += w * l;
            grad[i * pass.n_outputs + c] += w * d;
            observed += 1;
        }
    }
    Ok((
        LossValue {
            total: per_task.iter().sum(),
            per_task,
            n_observed: observed,
        },
        grad,
    ))
}

pub fn loss(pass: &ForwardPass, labels: &Labels, tasks: &[TaskMeta]) -> Result<LossValue, ModelError> {
    loss_and_output_grad(pass, labels, tasks).map(|(l, _)| l)
}

/// Gradient of the batch loss, split into what may leave the partner
/// (trunk and catalogue parts, masked) and what may not (head).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientUpdate {
    pub trunk_grad: Vec<f64>,
    pub head_grad: Vec<f64>,
    pub catalogue_grad: Option<Vec<f64>>,
    pub n_samples: usize,
    /// Observed label entries in the batch.
    pub nnz: usize,
}

/// Accumulates `inputᵀ · upstream` into `dw` and column sums into `db`;
/// returns `upstream · Wᵀ` when `want_input_grad` is set.
fn dense_backward(
    layer: &Dense,
    input: &[f64],
    upstream: &[f64],
    n_rows: usize,
    dw: &mut [f64],
    db: &mut [f64],
    want_input_grad: bool,
) -> Vec<f64> {
    let mut dinput = if want_input_grad {
        vec![0.0; n_rows * layer.n_in]
    } else {
        Vec::new()
    };
    for i in 0..n_rows {
        let g = &upstream[i * layer.n_out..(i + 1) * layer.n_out];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        db.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        let x = &input[i * layer.n_in..(i + 1) * layer.n_in];
        for (k, &xk) in x.iter().enumerate() {
            let wrow = &layer.w[k * layer.n_out..(k + 1) * layer.n_out];
            if xk != 0.0 {
                let drow = &mut dw[k * layer.n_out..(k + 1) * layer.n_out];
                drow.iter_mut().zip(g).for_each(|(a, b)| *a += xk * b);
            }
            if want_input_grad {
                dinput[i * layer.n_in + k] = wrow.iter().zip(g).map(|(w, b)| w * b).sum();
            }
        }
    }
    dinput
}

/// Exact gradient of [`loss`] w.r.t. every parameter.
///
/// The first-layer gradient only touches rows of features active in the
/// batch; every other row stays exactly zero.
pub fn backward(
    params: &ModelParams,
    x: &CsrMatrix,
    labels: &Labels,
    tasks: &[TaskMeta],
) -> Result<(LossValue, GradientUpdate), ModelError> {
    let pass = forward(params, x)?;
    let (loss, out_grad) = loss_and_output_grad(&pass, labels, tasks)?;
    let n = pass.n_rows;
    let n_out = pass.n_outputs;
    let n_head = params.n_head();
    let last = pass.last_hidden();
    let width = params.trunk.last().unwrap().n_out;

    let split = |lo: usize, hi: usize| -> Vec<f64> {
        let k = hi - lo;
        let mut g = vec![0.0; n * k];
        for i in 0..n {
            g[i * k..(i + 1) * k].copy_from_slice(&out_grad[i * n_out + lo..i * n_out + hi]);
        }
        g
    };

    let g_head = split(0, n_head);
    let mut head_dw = vec![0.0; params.head.w.len()];
    let mut head_db = vec![0.0; params.head.b.len()];
    let mut dh = dense_backward(&params.head, last, &g_head, n, &mut head_dw, &mut head_db, true);
    if dh.is_empty() {
        dh = vec![0.0; n * width];
    }

    let catalogue_grad = params.catalogue_head.as_ref().map(|cat| {
        let g_cat = split(n_head, n_out);
        let mut dw = vec![0.0; cat.w.len()];
        let mut db = vec![0.0; cat.b.len()];
        let dh_cat = dense_backward(cat, last, &g_cat, n, &mut dw, &mut db, true);
        dh.iter_mut().zip(&dh_cat).for_each(|(a, b)| *a += b);
        dw.extend(db);
        dw
    });

    let act = params.nonlinearity;
    let mut layer_grads: Vec<(Vec<f64>, Vec<f64>)> = params
        .trunk
        .iter()
        .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
        .collect();
    let mut upstream = dh;
    for li in (0..params.trunk.len()).rev() {
        let h = &pass.hidden[li];
        upstream
            .iter_mut()
            .zip(h)
            .for_each(|(g, &hv)| *g *= act.derivative_from_output(hv));
        let layer = &params.trunk[li];
        let (dw, db) = &mut layer_grads[li];
        if li == 0 {
            for i in 0..n {
                let g = &upstream[i * layer.n_out..(i + 1) * layer.n_out];
                db.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                for (j, v) in x.row_iter(i) {
                    let drow = &mut dw[j * layer.n_out..(j + 1) * layer.n_out];
                    drow.iter_mut().zip(g).for_each(|(a, b)| *a += v * b);
                }
            }
        } else {
            upstream = dense_backward(layer, &pass.hidden[li - 1], &upstream, n, dw, db, true);
        }
    }

    let mut trunk_grad = Vec::with_capacity(params.trunk_len());
    for (dw, db) in layer_grads {
        trunk_grad.extend(dw);
        trunk_grad.extend(db);
    }
    head_dw.extend(head_db);

    let finite = |v: &[f64]| v.iter().all(|g| g.is_finite());
    if !finite(&trunk_grad) || !finite(&head_dw) || !catalogue_grad.as_deref().map_or(true, finite) {
        return Err(ModelError::NonFinite("gradient"));
    }
    Ok((
        loss.clone(),
        GradientUpdate {
            trunk_grad,
            head_grad: head_dw,
            catalogue_grad,
            n_samples: n,
            nnz: loss.n_observed,
        },
    ))
}
