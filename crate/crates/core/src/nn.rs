//! Small dense-network helpers over named parameters.

use latentdrive_autodiff::ops::linear;
use latentdrive_autodiff::{Bound, ParameterSet, SeededRng, Tape, Var};

use crate::Result;

pub fn add_dense(set: &mut ParameterSet, name: &str, input: usize, output: usize, rng: &mut SeededRng) {
    set.insert_glorot(format!("{name}.w"), input, output, rng);
    set.insert_zeros(format!("{name}.b"), &[1, output]);
}

/// A dense layer whose weights start at zero.
pub fn add_dense_zero(set: &mut ParameterSet, name: &str, input: usize, output: usize) {
    set.insert_zeros(format!("{name}.w"), &[input, output]);
    set.insert_zeros(format!("{name}.b"), &[1, output]);
}

pub fn dense(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let (w, b) = (p.get(&format!("{name}.w")), p.get(&format!("{name}.b")));
    Ok(linear(tape, x, w, b)?)
}

/// `input -> hidden (ELU) -> ... -> output` with layer names `{prefix}.{i}`.
pub fn add_mlp(set: &mut ParameterSet, prefix: &str, sizes: &[usize], zero_last: bool, rng: &mut SeededRng) {
    let last = sizes.len() - 2;
    for (i, pair) in sizes.windows(2).enumerate() {
        let name = format!("{prefix}.{i}");
        if zero_last && i == last {
            add_dense_zero(set, &name, pair[0], pair[1]);
        } else {
            add_dense(set, &name, pair[0], pair[1], rng);
        }
    }
}

pub fn mlp(tape: &mut Tape, p: &Bound, prefix: &str, layers: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = dense(tape, p, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers {
            h = tape.elu(h);
        }
    }
    Ok(h)
}

/// Mixes `share` of a uniform distribution into each row of `classes`
/// probabilities.
pub fn unimix(tape: &mut Tape, probs: Var, share: f64, classes: usize) -> Var {
    if share == 0.0 {
        return probs;
    }
    let scaled = tape.scale(probs, 1.0 - share);
    tape.add_scalar(scaled, share / classes as f64)
}

/// Row-major `[rows, cols]` helper for building constants.
pub fn constant(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
    Ok(tape.constant_from(&[rows, cols], data)?)
}

pub fn check_finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(crate::Error::Numeric(format!("{what} is not finite ({v})")))
    }
}

/// Concatenates two row-major matrices with equal row counts column-wise.
pub fn hcat(a: &[f64], a_cols: usize, b: &[f64], b_cols: usize) -> Vec<f64> {
    let rows = if a_cols == 0 { b.len() / b_cols.max(1) } else { a.len() / a_cols };
    let mut out = Vec::with_capacity(rows * (a_cols + b_cols));
    for r in 0..rows {
        out.extend_from_slice(&a[r * a_cols..(r + 1) * a_cols]);
        out.extend_from_slice(&b[r * b_cols..(r + 1) * b_cols]);
    }
    out
}
