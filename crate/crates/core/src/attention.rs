//! Scaled dot-product multi-head attention recorded on a [`Tape`].

use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::error::{CdtError, Result};
use crate::tensor::Scalar;

/// Training-time dropout source. Absent means eval mode.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.dropout(x, self.p, &mut *self.rng)
    }
}

/// Applies dropout when training, identity otherwise.
pub fn maybe_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

/// Projection weights of one attention layer, already bound to a tape.
/// Weight matrices are `[d_in, d]`, biases `[d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

fn affine<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Multi-head attention of `q [Lq, d]` over `k, v [Lk, d]`.
///
/// Each head uses scale `1/sqrt(d/H)`. Returns the projected output
/// `[Lq, d]` and the softmax weights `[H, Lq, Lk]` taken before dropout.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionVars,
    heads: usize,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Var, Var)> {
    let d = *tape.shape(p.wq).last().unwrap();
    if heads == 0 || d % heads != 0 {
        return Err(CdtError::Config(format!(
            "model dim {d} is not divisible by {heads} heads"
        )));
    }
    if tape.shape(k)[0] != tape.shape(v)[0] {
        return Err(CdtError::shape("attention keys/values", tape.shape(k), tape.shape(v)));
    }
    let head_dim = d / heads;
    let qp = affine(tape, q, p.wq, p.bq)?;
    let kp = affine(tape, k, p.wk, p.bk)?;
    let vp = affine(tape, v, p.wv, p.bv)?;
    let qh = tape.split_heads(qp, heads)?;
    let kh = tape.split_heads(kp, heads)?;
    let vh = tape.split_heads(vp, heads)?;
    let scores = tape.matmul_bt(qh, kh)?;
    let scores = tape.scale(scores, T::lit(1.0 / (head_dim as f64).sqrt()));
    let weights = tape.softmax(scores, 2)?;
    let dropped = maybe_dropout(tape, weights, dropout)?;
    let ctx = tape.matmul(dropped, vh)?;
    let merged = tape.merge_heads(ctx)?;
    let out = affine(tape, merged, p.wo, p.bo)?;
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn bind(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, d_in: usize, d: usize) -> AttentionVars {
        let mut w = |tape: &mut Tape<f64>, s: Vec<usize>| tape.param(rand_tensor(rng, s));
        AttentionVars {
            wq: w(tape, vec![d_in, d]),
            bq: w(tape, vec![d]),
            wk: w(tape, vec![d_in, d]),
            bk: w(tape, vec![d]),
            wv: w(tape, vec![d_in, d]),
            bv: w(tape, vec![d]),
            wo: w(tape, vec![d, d]),
            bo: w(tape, vec![d]),
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &mut rng, 8, 8);
        let q = tape.constant(rand_tensor(&mut rng, vec![5, 8]));
        let kv = tape.constant(rand_tensor(&mut rng, vec![7, 8]));
        let (_, w) = multi_head_attention(&mut tape, q, kv, kv, &p, 2, &mut None).unwrap();
        let wt = tape.value(w);
        assert_eq!(wt.shape(), &[2, 5, 7]);
        for row in wt.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn single_key_weights_are_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &mut rng, 4, 4);
        let q = tape.constant(rand_tensor(&mut rng, vec![3, 4]));
        let kv_t = rand_tensor(&mut rng, vec![1, 4]);
        let kv = tape.constant(kv_t.clone());
        let (out, w) = multi_head_attention(&mut tape, q, kv, kv, &p, 2, &mut None).unwrap();
        assert!(tape.value(w).data().iter().all(|&x| x == 1.0));
        // out = (v Wv + bv) Wo + bo for every query row
        let mut t2 = Tape::new();
        let v = t2.constant(kv_t);
        let wv = t2.constant(tape.value(p.wv).clone());
        let bv = t2.constant(tape.value(p.bv).clone());
        let wo = t2.constant(tape.value(p.wo).clone());
        let bo = t2.constant(tape.value(p.bo).clone());
        let vp = affine(&mut t2, v, wv, bv).unwrap();
        let expect = affine(&mut t2, vp, wo, bo).unwrap();
        let e = t2.value(expect).data().to_vec();
        for row in tape.value(out).data().chunks(4) {
            for (a, b) in row.iter().zip(&e) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &mut rng, 6, 6);
        let q = tape.constant(rand_tensor(&mut rng, vec![2, 6]));
        let err = multi_head_attention(&mut tape, q, q, q, &p, 4, &mut None).unwrap_err();
        assert!(matches!(err, CdtError::Config(_)));
    }

    #[test]
    fn single_head_matches_hand_rolled() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (lq, lk, d) = (2, 3, 2);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &mut rng, d, d);
        let qt = rand_tensor(&mut rng, vec![lq, d]);
        let kt = rand_tensor(&mut rng, vec![lk, d]);
        let q = tape.constant(qt.clone());
        let k = tape.constant(kt.clone());
        let (out, _) = multi_head_attention(&mut tape, q, k, k, &p, 1, &mut None).unwrap();

        let get = |v: Var| tape.value(v).data().to_vec();
        let proj = |x: &[f64], rows: usize, w: &[f64], b: &[f64]| -> Vec<f64> {
            let mut y = vec![0.0; rows * d];
            for r in 0..rows {
                for j in 0..d {
                    y[r * d + j] = b[j] + (0..d).map(|i| x[r * d + i] * w[i * d + j]).sum::<f64>();
                }
            }
            y
        };
        let qp = proj(qt.data(), lq, &get(p.wq), &get(p.bq));
        let kp = proj(kt.data(), lk, &get(p.wk), &get(p.bk));
        let vp = proj(kt.data(), lk, &get(p.wv), &get(p.bv));
        let mut ctx = vec![0.0; lq * d];
        for i in 0..lq {
            let s: Vec<f64> = (0..lk)
                .map(|j| (0..d).map(|e| qp[i * d + e] * kp[j * d + e]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for j in 0..lk {
                let a = (s[j] - m).exp() / z;
                for e in 0..d {
                    ctx[i * d + e] += a * vp[j * d + e];
                }
            }
        }
        let expect = proj(&ctx, lq, &get(p.wo), &get(p.bo));
        for (a, b) in tape.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
