//! Multi-head scaled dot-product attention, composed from tape primitives.

use super::{Result, Scalar, Tape, TensorError, Var};

/// Projection weights for one attention block. All four maps are `C x C`
/// square with per-output biases.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product attention with `n_heads` heads.
///
/// `q` has shape `[.., Sq, C]`, `k` and `v` share `[.., Skv, C]`; batch
/// prefixes broadcast against each other. Scores are scaled by
/// `1/sqrt(C / n_heads)`, heads are concatenated, and the output projection
/// is applied.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    params: &AttentionParams,
    n_heads: usize,
) -> Result<Var> {
    let c = *tape.shape(q).last().ok_or(TensorError::BadAxis { axis: 0, rank: 0 })?;
    if n_heads == 0 || c % n_heads != 0 {
        return Err(TensorError::HeadSplit {
            dim: c,
            heads: n_heads,
        });
    }
    if tape.shape(k) != tape.shape(v) {
        return Err(TensorError::ShapeMismatch {
            context: "attention keys vs values",
            lhs: tape.shape(k).to_vec(),
            rhs: tape.shape(v).to_vec(),
        });
    }
    let dh = c / n_heads;

    let qp = project(tape, q, params.wq, params.bq)?;
    let kp = project(tape, k, params.wk, params.bk)?;
    let vp = project(tape, v, params.wv, params.bv)?;

    let qh = split_heads(tape, qp, n_heads, dh)?;
    let kh = split_heads(tape, kp, n_heads, dh)?;
    let vh = split_heads(tape, vp, n_heads, dh)?;

    // [.., h, Sq, Skv]
    let scores = tape.matmul_nt(qh, kh)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let last = tape.shape(scores).len() - 1;
    let attn = tape.softmax(scores, last)?;
    let ctx = tape.matmul(attn, vh)?;

    let merged = merge_heads(tape, ctx, c)?;
    project(tape, merged, params.wo, params.bo)
}

fn project<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// `[.., S, C] -> [.., h, S, dh]`
fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, h: usize, dh: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let rank = shape.len();
    let s = shape[rank - 2];
    let mut split = shape[..rank - 1].to_vec();
    split.push(h);
    split.push(dh);
    let x = tape.reshape(x, split)?;
    // [.., S, h, dh] -> [.., h, S, dh]
    let new_rank = rank + 1;
    let mut perm: Vec<usize> = (0..new_rank).collect();
    perm.swap(new_rank - 3, new_rank - 2);
    let x = tape.permute(x, &perm)?;
    debug_assert_eq!(tape.shape(x)[new_rank - 2], s);
    Ok(x)
}

/// `[.., h, S, dh] -> [.., S, C]`
fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, c: usize) -> Result<Var> {
    let rank = tape.shape(x).len();
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 3, rank - 2);
    let x = tape.permute(x, &perm)?;
    let shape = tape.shape(x).to_vec();
    let mut merged = shape[..rank - 2].to_vec();
    merged.push(c);
    tape.reshape(x, merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};

    fn identity_params(tape: &mut Tape<f64>, c: usize) -> AttentionParams {
        let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let zero = Tensor::zeros(&[c]);
        AttentionParams {
            wq: tape.constant(eye.clone()),
            bq: tape.constant(zero.clone()),
            wk: tape.constant(eye.clone()),
            bk: tape.constant(zero.clone()),
            wv: tape.constant(eye.clone()),
            bv: tape.constant(zero.clone()),
            wo: tape.constant(eye),
            bo: tape.constant(zero),
        }
    }

    #[test]
    fn single_key_value_pair_returns_that_value() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::new();
        let params = identity_params(&mut tape, 4);
        let q = tape.constant(Tensor::<f64>::randn(&[1, 4], &mut rng));
        let kv = Tensor::<f64>::randn(&[1, 4], &mut rng);
        let k = tape.constant(kv.clone());
        let v = tape.constant(kv.clone());
        let out = multi_head_attention(&mut tape, q, k, v, &params, 2).unwrap();
        for (got, want) in tape.value(out).data().iter().zip(kv.data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_logit_keys_average_values() {
        // All-zero keys make every logit zero, so attention is uniform and
        // the output is the mean of the values.
        let mut rng = Rng::new(2);
        let mut tape = Tape::new();
        let params = identity_params(&mut tape, 4);
        let q = tape.constant(Tensor::<f64>::randn(&[1, 4], &mut rng));
        let k = tape.constant(Tensor::zeros(&[3, 4]));
        let values = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let v = tape.constant(values.clone());
        let out = multi_head_attention(&mut tape, q, k, v, &params, 2).unwrap();
        for j in 0..4 {
            let mean = (values.data()[j] + values.data()[4 + j] + values.data()[8 + j]) / 3.0;
            assert!((tape.value(out).data()[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_key_value_pairs_leaves_output_unchanged() {
        let mut rng = Rng::new(3);
        let keys = Tensor::<f64>::randn(&[5, 8], &mut rng);
        let values = Tensor::<f64>::randn(&[5, 8], &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let permute_rows = |t: &Tensor<f64>| {
            Tensor::from_fn(&[5, 8], |i| t.data()[perm[i / 8] * 8 + i % 8])
        };
        let run = |k: &Tensor<f64>, v: &Tensor<f64>, rng: &mut Rng| {
            let mut tape = Tape::new();
            let wq = tape.constant(Tensor::<f64>::randn(&[8, 8], rng));
            let base = AttentionParams {
                wq,
                bq: tape.constant(Tensor::zeros(&[8])),
                wk: tape.constant(Tensor::<f64>::randn(&[8, 8], rng)),
                bk: tape.constant(Tensor::zeros(&[8])),
                wv: tape.constant(Tensor::<f64>::randn(&[8, 8], rng)),
                bv: tape.constant(Tensor::zeros(&[8])),
                wo: tape.constant(Tensor::<f64>::randn(&[8, 8], rng)),
                bo: tape.constant(Tensor::zeros(&[8])),
            };
            let q = tape.constant(Tensor::from_fn(&[1, 8], |i| 0.1 * i as f64));
            let kv = tape.constant(k.clone());
            let vv = tape.constant(v.clone());
            let out = multi_head_attention(&mut tape, q, kv, vv, &base, 4).unwrap();
            tape.value(out).data().to_vec()
        };
        // Same projection weights for both runs, via the same seed.
        let a = run(&keys, &values, &mut Rng::new(77));
        let b = run(&permute_rows(&keys), &permute_rows(&values), &mut Rng::new(77));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn indivisible_heads_error() {
        let mut tape = Tape::<f64>::new();
        let params = identity_params(&mut tape, 4);
        let q = tape.constant(Tensor::zeros(&[1, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 4]));
        let v = tape.constant(Tensor::zeros(&[1, 4]));
        let err = multi_head_attention(&mut tape, q, k, v, &params, 3).unwrap_err();
        assert!(matches!(err, TensorError::HeadSplit { .. }));
    }
}
