//! Finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::Tensor;

/// Relative error used throughout: `|a − b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let den = a.abs().max(b.abs()).max(1e-12);
    (a - b).abs() / den
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Input index and flat element index of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

/// Compares reverse-mode gradients of the scalar returned by `f` with
/// central differences of step `h`, over every element of every input.
/// `f` receives one variable per input, in order.
pub fn gradient_check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t, false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, analytic: 0.0, numeric: 0.0, elements: 0 };
    for k in 0..inputs.len() {
        for e in 0..inputs[k].len() {
            let x0 = inputs[k].data()[e];
            work[k].data_mut()[e] = x0 + h;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = x0 - h;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[e];
            if !numeric.is_finite() {
                return Err(Error::NonFinite { op: "gradient_check" });
            }
            let err = relative_error(a, numeric);
            report.elements += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report = GradCheckReport { max_relative_error: err, worst: Some((k, e)), analytic: a, numeric, ..report };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor<f64> {
        Tensor::new(shape, (0..shape[0] * shape[1]).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_layer_is_exact_to_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inputs = [random(&mut rng, [3, 4]), random(&mut rng, [4, 2]), random(&mut rng, [1, 2])];
        let r = gradient_check(&inputs, 1e-5, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.add_row(y, v[2])?;
            let c = t.constant(Tensor::from_f64([3, 2], &[1.0, -2.0, 0.5, 3.0, -1.0, 0.25]).unwrap());
            let y = t.mul(y, c)?;
            t.sum(y)
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-7, "{r:?}");
        assert_eq!(r.elements, 12 + 8 + 2);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let inputs = [Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap()];
        let r = gradient_check(&inputs, 1e-5, |t, _| Ok(t.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, [3, 4]);
        let b = random(&mut rng, [3, 4]);
        let w = random(&mut rng, [4, 4]);
        let r = random(&mut rng, [1, 4]);
        type Case = fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;
        let cases: [(&str, Case); 20] = [
            ("matmul", |t, v| { let y = t.matmul(v[0], v[2])?; let s = t.sigmoid(y)?; t.sum(s) }),
            ("matmul_bt", |t, v| { let y = t.matmul_bt(v[0], v[1])?; let s = t.sigmoid(y)?; t.sum(s) }),
            ("add_sub_mul", |t, v| { let x = t.add(v[0], v[1])?; let y = t.sub(x, v[1])?; let z = t.mul(y, v[1])?; let z = t.mul(z, x)?; t.sum(z) }),
            ("rows", |t, v| { let x = t.add_row(v[0], v[3])?; let y = t.mul_row(x, v[3])?; let y = t.mul(y, y)?; t.mean(y) }),
            ("scale_neg", |t, v| { let x = t.scale(v[0], 2.5)?; let y = t.neg(x)?; let y = t.mul(y, v[1])?; t.sum(y) }),
            ("relu", |t, v| { let x = t.relu(v[0])?; let y = t.mul(x, v[1])?; t.sum(y) }),
            ("sigmoid", |t, v| { let x = t.sigmoid(v[0])?; let y = t.mul(x, v[1])?; t.sum(y) }),
            ("softmax", |t, v| { let x = t.softmax_rows(v[0])?; let y = t.mul(x, v[1])?; t.sum(y) }),
            ("masked_softmax", |t, v| { let x = t.masked_fill(v[0], &[true, false, true, true])?; let x = t.softmax_rows(x)?; let y = t.mul(x, v[1])?; t.sum(y) }),
            ("embedding", |t, v| { let x = t.embedding(v[2], &[3, 0, 3, 1])?; let y = t.mul(x, x)?; t.sum(y) }),
            ("sum_cols", |t, v| { let x = t.sum_cols(v[0])?; let y = t.mul(x, x)?; t.sum(y) }),
            ("concat_slice", |t, v| { let x = t.concat_cols(&[v[0], v[1]])?; let y = t.slice_cols(x, 2, 7)?; let y = t.mul(y, y)?; t.sum(y) }),
            ("layer_norm", |t, v| { let x = t.layer_norm(v[0], 1e-6)?; let y = t.mul(x, v[1])?; t.sum(y) }),
            ("transpose_reshape", |t, v| { let x = t.transpose(v[0])?; let x = t.reshape(x, &[2, 6])?; let y = t.sigmoid(x)?; t.sum(y) }),
            ("normalize_rows", |t, v| { let x = t.normalize_rows(v[0])?; let g = t.matmul_bt(x, x)?; let y = t.mul(g, g)?; t.sum(y) }),
            ("bce_with_logits", |t, v| { let x = t.matmul(v[0], v[2])?; t.bce_with_logits(x, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]) }),
            ("bce", |t, v| { let x = t.sigmoid(v[0])?; t.bce(x, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 1e-7) }),
            ("dropout", |t, v| { let x = t.dropout(v[0], 0.3, true, 5)?; let y = t.mul(x, v[1])?; t.sum(y) }),
            ("fan_out", |t, v| { let x = t.mul(v[0], v[0])?; let y = t.add(x, v[0])?; let y = t.mul(y, v[0])?; t.sum(y) }),
            ("mean", |t, v| { let x = t.mul(v[0], v[1])?; t.mean(x) }),
        ];
        let inputs = [a, b, w, r];
        for (name, f) in cases {
            let rep = gradient_check(&inputs, 1e-5, f).unwrap();
            assert!(rep.max_relative_error < 1e-5, "{name}: {rep:?}");
        }
    }
}
