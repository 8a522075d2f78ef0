//! Composite differentiable operations built from tape primitives.

use crate::tape::{Tape, Var};
use crate::{Result, TensorError};

fn grouped(tape: &mut Tape, x: Var, classes: usize) -> Result<(Var, Vec<usize>)> {
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).len();
    if classes < 2 || !n.is_multiple_of(classes) {
        return Err(TensorError::Dimension(format!("{shape:?} does not split into categorical rows of {classes}")));
    }
    let rows = tape.reshape(x, &[n / classes, classes])?;
    Ok((rows, shape))
}

/// Per-variable softmax over consecutive groups of `classes` logits. The
/// result keeps the input shape.
pub fn softmax_categorical(tape: &mut Tape, logits: Var, classes: usize) -> Result<Var> {
    let (rows, shape) = grouped(tape, logits, classes)?;
    let p = tape.softmax(rows)?;
    tape.reshape(p, &shape)
}

/// `KL(q || p)` for every categorical row of `classes`, shape `[rows]`.
/// Logs are taken with the shared epsilon clamp.
pub fn kl_rows(tape: &mut Tape, q: Var, p: Var, classes: usize) -> Result<Var> {
    let (q, _) = grouped(tape, q, classes)?;
    let (p, _) = grouped(tape, p, classes)?;
    let lq = tape.log(q);
    let lp = tape.log(p);
    let diff = tape.sub(lq, lp)?;
    let terms = tape.mul(q, diff)?;
    Ok(tape.sum_last(terms))
}

/// Sum over variables of the categorical KL divergence.
pub fn kl_categorical(tape: &mut Tape, q: Var, p: Var, classes: usize) -> Result<Var> {
    let rows = kl_rows(tape, q, p, classes)?;
    Ok(tape.sum(rows))
}

/// Cross-entropy of soft `targets` against `logits`, one value per row of
/// `classes`.
pub fn soft_cross_entropy_rows(tape: &mut Tape, logits: Var, targets: Var, classes: usize) -> Result<Var> {
    let (l, _) = grouped(tape, logits, classes)?;
    let (t, _) = grouped(tape, targets, classes)?;
    let logp = tape.log_softmax(l)?;
    let prod = tape.mul(t, logp)?;
    let s = tape.sum_last(prod);
    Ok(tape.neg(s))
}

/// Elementwise binary cross-entropy on logits: `softplus(x) - y * x`.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, labels: Var) -> Result<Var> {
    let sp = tape.softplus(logits);
    let yx = tape.mul(labels, logits)?;
    tape.sub(sp, yx)
}

/// Affine map `x * w + b` with a row-broadcast bias.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Row-wise one-hot matrix `[indices.len(), classes]`.
pub fn one_hot(indices: &[usize], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; indices.len() * classes];
    for (r, &i) in indices.iter().enumerate() {
        out[r * classes + i] = 1.0;
    }
    out
}
