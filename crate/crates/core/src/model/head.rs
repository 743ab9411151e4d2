use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::kernels::sigmoid;
use crate::tape::{Tape, Var};
use crate::{Scalar, Tensor};

/// Sum over decoder layers of the per-label inner products
/// `⟨u_i^l, v_i^T⟩`, as an L×1 logit column.
pub fn vote_logits<S: Scalar>(tape: &mut Tape<'_, S>, layers: &[Var], vt: Var) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &u in layers {
        let prod = tape.mul(u, vt)?;
        let score = tape.sum_cols(prod)?;
        total = Some(match total {
            None => score,
            Some(t) => tape.add(t, score)?,
        });
    }
    total.ok_or_else(|| shape_err!("vote_logits", "no decoder layers"))
}

/// Plain-tensor form of the head: `σ(Σ_l ⟨u_i^l, v_i^T⟩)` per label.
pub fn predict<S: Scalar>(layers: &[Tensor<S>], vt: &Tensor<S>) -> Result<Vec<S>> {
    let (l, d) = vt.dims2("predict")?;
    let mut logits = alloc::vec![S::zero(); l];
    for u in layers {
        if u.shape() != vt.shape() {
            return Err(shape_err!("predict", "{:?} vs {:?}", u.shape(), vt.shape()));
        }
        for (i, logit) in logits.iter_mut().enumerate() {
            let (a, b) = (&u.data()[i * d..(i + 1) * d], &vt.data()[i * d..(i + 1) * d]);
            *logit += a.iter().zip(b).map(|(&x, &y)| x * y).sum::<S>();
        }
    }
    Ok(logits.into_iter().map(sigmoid).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_layers_give_one_half() {
        let vt = Tensor::<f64>::full([3, 2], 0.7);
        let y = predict(&[Tensor::zeros([3, 2])], &vt).unwrap();
        assert_eq!(y, [0.5; 3]);
    }

    #[test]
    fn unit_vectors_give_sigmoid_one() {
        let e = Tensor::<f64>::from_f64([1, 3], &[0.0, 1.0, 0.0]).unwrap();
        let y = predict(core::slice::from_ref(&e), &e).unwrap();
        assert!((y[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn tape_head_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (l, d) = (5, 4);
        let mut draw = || Tensor::<f64>::new([l, d], (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (u1, u2, vt) = (draw(), draw(), draw());
        let mut oracle = [0.0; 5];
        for (i, o) in oracle.iter_mut().enumerate() {
            for k in 0..d {
                *o += u1.at(i, k) * vt.at(i, k) + u2.at(i, k) * vt.at(i, k);
            }
        }
        let mut tape = Tape::new();
        let vars = [tape.leaf(&u1, false), tape.leaf(&u2, false)];
        let v = tape.leaf(&vt, false);
        let logits = vote_logits(&mut tape, &vars, v).unwrap();
        let probs = predict(&[u1.clone(), u2.clone()], &vt).unwrap();
        for i in 0..l {
            assert!((tape.value(logits).data()[i] - oracle[i]).abs() < 1e-12);
            assert!((probs[i] - 1.0 / (1.0 + (-oracle[i]).exp())).abs() < 1e-12);
        }
    }
}
