//! Central finite-difference checks of tape adjoints.

use rand::Rng;

use crate::ops::{bce_with_logits, kl_categorical, linear, soft_cross_entropy_rows, softmax_categorical};
use crate::{seeded, Result, SeededRng, Tape, Tensor, Var};

const STEP: f64 = 1e-5;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error `|g - g_fd| / max(|g|, |g_fd|)` for each input of `f`,
/// where `f` maps the inputs to a scalar.
pub fn relative_errors<F>(inputs: &[Tensor], f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut errs = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        let mut probe = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            *slot = (plus - minus) / (2.0 * STEP);
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-12);
        errs.push(norm(&diff) / scale);
    }
    Ok(errs)
}

/// Weighted sum so that every output element carries a distinct adjoint.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = seeded(seed);
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(random_tensor(&shape, -1.0, 1.0, &mut rng));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

type Unary = fn(&mut Tape, Var) -> Var;

/// Runs every differentiable operation on randomly drawn shapes and returns
/// the worst relative error per operation.
pub fn op_suite(seed: u64, trials: usize) -> Result<Vec<(String, f64)>> {
    let mut rng = seeded(seed);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, errs: Vec<f64>| {
        let e = errs.into_iter().fold(0.0, f64::max);
        match worst.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = slot.1.max(e),
            None => worst.push((name.to_string(), e)),
        }
    };
    for trial in 0..trials {
        let ws = seed.wrapping_mul(1000).wrapping_add(trial as u64);
        let rows = rng.gen_range(1..5);
        let cols = rng.gen_range(1..6);
        let inner = rng.gen_range(1..5);
        let x = random_tensor(&[rows, cols], -2.0, 2.0, &mut rng);
        let y = random_tensor(&[rows, cols], -2.0, 2.0, &mut rng);
        let pos = random_tensor(&[rows, cols], 0.2, 3.0, &mut rng);
        let row = random_tensor(&[1, cols], -1.0, 1.0, &mut rng);
        // Keep kinked functions away from their kinks.
        let off_kink = Tensor::new(
            vec![rows, cols],
            (0..rows * cols)
                .map(|_| {
                    let m = rng.gen_range(0.05..2.0);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect(),
        )?;

        let unaries: [(&str, Unary); 9] = [
            ("tanh", |t, v| t.tanh(v)),
            ("sigmoid", |t, v| t.sigmoid(v)),
            ("exp", |t, v| t.exp(v)),
            ("square", |t, v| t.square(v)),
            ("softplus", |t, v| t.softplus(v)),
            ("elu", |t, v| t.elu(v)),
            ("scale", |t, v| t.scale(v, -0.7)),
            ("add_scalar", |t, v| t.add_scalar(v, 3.0)),
            ("neg", |t, v| t.neg(v)),
        ];
        for (name, op) in unaries {
            record(
                name,
                relative_errors(std::slice::from_ref(&x), |t, v| {
                    let y = op(t, v[0]);
                    weighted_sum(t, y, ws)
                })?,
            );
        }
        record(
            "relu",
            relative_errors(std::slice::from_ref(&off_kink), |t, v| {
                let y = t.relu(v[0]);
                weighted_sum(t, y, ws)
            })?,
        );
        record(
            "clamp_min",
            relative_errors(std::slice::from_ref(&off_kink), |t, v| {
                let y = t.clamp_min(v[0], 0.0);
                weighted_sum(t, y, ws)
            })?,
        );
        record(
            "log",
            relative_errors(std::slice::from_ref(&pos), |t, v| {
                let y = t.log(v[0]);
                weighted_sum(t, y, ws)
            })?,
        );

        type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;
        let binaries: [(&str, Binary); 3] =
            [("add", |t, a, b| t.add(a, b)), ("sub", |t, a, b| t.sub(a, b)), ("mul", |t, a, b| t.mul(a, b))];
        for (name, op) in binaries {
            record(
                name,
                relative_errors(&[x.clone(), y.clone()], |t, v| {
                    let z = op(t, v[0], v[1])?;
                    weighted_sum(t, z, ws)
                })?,
            );
            record(
                &format!("{name} (broadcast)"),
                relative_errors(&[x.clone(), row.clone()], |t, v| {
                    let z = op(t, v[0], v[1])?;
                    weighted_sum(t, z, ws)
                })?,
            );
        }

        let w = random_tensor(&[cols, inner], -1.0, 1.0, &mut rng);
        let b = random_tensor(&[1, inner], -1.0, 1.0, &mut rng);
        record(
            "matmul",
            relative_errors(&[x.clone(), w.clone()], |t, v| {
                let z = t.matmul(v[0], v[1])?;
                weighted_sum(t, z, ws)
            })?,
        );
        record(
            "linear",
            relative_errors(&[x.clone(), w, b], |t, v| {
                let z = linear(t, v[0], v[1], v[2])?;
                weighted_sum(t, z, ws)
            })?,
        );

        for (name, reduce) in [("sum", 0), ("mean", 1), ("sum_last", 2)] {
            record(
                name,
                relative_errors(std::slice::from_ref(&x), |t, v| {
                    let sq = t.tanh(v[0]);
                    let r = match reduce {
                        0 => t.sum(sq),
                        1 => t.mean(sq),
                        _ => t.sum_last(sq),
                    };
                    weighted_sum(t, r, ws)
                })?,
            );
        }

        let classes = rng.gen_range(2..5);
        let groups = rng.gen_range(1..4);
        let lq = random_tensor(&[rows, classes * groups], -3.0, 3.0, &mut rng);
        let lp = random_tensor(&[rows, classes * groups], -3.0, 3.0, &mut rng);
        record(
            "softmax",
            relative_errors(std::slice::from_ref(&lq), |t, v| {
                let p = t.softmax(v[0])?;
                weighted_sum(t, p, ws)
            })?,
        );
        record(
            "log_softmax",
            relative_errors(std::slice::from_ref(&lq), |t, v| {
                let p = t.log_softmax(v[0])?;
                weighted_sum(t, p, ws)
            })?,
        );
        record(
            "categorical kl",
            relative_errors(&[lq.clone(), lp.clone()], |t, v| {
                let q = softmax_categorical(t, v[0], classes)?;
                let p = softmax_categorical(t, v[1], classes)?;
                kl_categorical(t, q, p, classes)
            })?,
        );
        record(
            "soft cross-entropy",
            relative_errors(&[lq.clone(), lp.clone()], |t, v| {
                let target = softmax_categorical(t, v[1], classes)?;
                let ce = soft_cross_entropy_rows(t, v[0], target, classes)?;
                weighted_sum(t, ce, ws)
            })?,
        );
        let labels = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect())?;
        record(
            "bce with logits",
            relative_errors(std::slice::from_ref(&x), |t, v| {
                let l = t.constant(labels.clone());
                let b = bce_with_logits(t, v[0], l)?;
                weighted_sum(t, b, ws)
            })?,
        );

        let c = random_tensor(&[inner, cols], -1.0, 1.0, &mut rng);
        record(
            "concat/slice",
            relative_errors(&[x.clone(), y.clone(), c], |t, v| {
                let cc = t.concat_cols(&[v[0], v[1]])?;
                let sc = t.slice_cols(cc, cols / 2, cols)?;
                let rr = t.concat_rows(&[sc, v[2]])?;
                let sr = t.slice_rows(rr, inner.div_ceil(2), rows)?;
                let flat = t.reshape(sr, &[rows * cols])?;
                let sq = t.square(flat);
                weighted_sum(t, sq, ws)
            })?,
        );

        let n = rng.gen_range(1..3);
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let k = rng.gen_range(1..4);
        let stride = rng.gen_range(1..3);
        let side = k + stride * rng.gen_range(0..3);
        let img = random_tensor(&[n, cin, side, side], -1.0, 1.0, &mut rng);
        let kern = random_tensor(&[cout, cin, k, k], -0.5, 0.5, &mut rng);
        let bias = random_tensor(&[cout], -0.5, 0.5, &mut rng);
        record(
            "conv2d",
            relative_errors(&[img, kern, bias], |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride)?;
                let y = t.tanh(y);
                weighted_sum(t, y, ws)
            })?,
        );
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_operation_within_tolerance() {
        let worst = op_suite(3, 2).unwrap();
        assert!(worst.len() >= 30);
        for (name, e) in worst {
            assert!(e < 1e-4, "{name}: {e:e}");
        }
    }
}
