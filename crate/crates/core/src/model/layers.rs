//! Attention and feed-forward building blocks on the tape.

use alloc::vec::Vec;

use crate::autodiff::{Segment, Tape, Var};
use crate::error::{LensError, Result};
use crate::tensor::{Real, Tensor};

/// Tape handles of one head's projections; `w*` are `d x d/h`, `b*` length `d/h`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
}

/// One multi-head attention block: heads, shared output projection `W^O`
/// and the add & norm that follows it.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub heads: Vec<HeadVars>,
    pub wo: Var,
    pub bo: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// Output of a multi-head block.
#[derive(Clone, Copy, Debug)]
pub struct BlockOut {
    pub hidden: Var,
    /// Attention node; read maps back with [`Tape::attention_map`].
    pub attention: Var,
}

/// Queries from `queries_from` attend over `keys_from` (the same var for
/// self-attention). With `residual_norm` the result is
/// `LayerNorm(queries + concat(heads) W^O)`, otherwise the raw projected
/// concatenation.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_layer<T: Real>(
    tape: &mut Tape<T>,
    queries_from: Var,
    keys_from: Var,
    block: &BlockVars,
    segments: &[Segment],
    pruned: &[bool],
    scale: T,
    residual_norm: bool,
) -> Result<BlockOut> {
    let h = block.heads.len();
    if pruned.len() != h || h == 0 {
        return Err(LensError::Config(alloc::format!(
            "block with {h} heads given {} prune flags",
            pruned.len()
        )));
    }
    let pick = |f: fn(&HeadVars) -> Var| block.heads.iter().map(f).collect::<Vec<_>>();
    let (wq, bq) = (tape.concat_cols(&pick(|x| x.wq))?, tape.concat_cols(&pick(|x| x.bq))?);
    let (wk, bk) = (tape.concat_cols(&pick(|x| x.wk))?, tape.concat_cols(&pick(|x| x.bk))?);
    let (wv, bv) = (tape.concat_cols(&pick(|x| x.wv))?, tape.concat_cols(&pick(|x| x.bv))?);
    let q = tape.matmul(queries_from, wq)?;
    let q = tape.add_row(q, bq)?;
    let k = tape.matmul(keys_from, wk)?;
    let k = tape.add_row(k, bk)?;
    let v = tape.matmul(keys_from, wv)?;
    let v = tape.add_row(v, bv)?;
    let attention = tape.attention(q, k, v, h, scale, segments, pruned)?;
    let o = tape.matmul(attention, block.wo)?;
    let o = tape.add_row(o, block.bo)?;
    let hidden = if residual_norm {
        let r = tape.add(queries_from, o)?;
        tape.layer_norm(r, block.ln_gain, block.ln_bias)?
    } else {
        o
    };
    Ok(BlockOut { hidden, attention })
}

/// `LayerNorm(x + W2 gelu(W1 x + b1) + b2)`.
pub fn feed_forward<T: Real>(tape: &mut Tape<T>, x: Var, ffn: &FfnVars) -> Result<Var> {
    let h = tape.matmul(x, ffn.w1)?;
    let h = tape.add_row(h, ffn.b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, ffn.w2)?;
    let o = tape.add_row(o, ffn.b2)?;
    let r = tape.add(x, o)?;
    tape.layer_norm(r, ffn.ln_gain, ffn.ln_bias)
}

/// Plain tensors of one head, for the single-sequence helpers below.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
}

/// Attention weights of one head over one (query, key) sequence pair.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMap {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
}

impl HeadMap {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }
}

fn head_on_tape(tape: &mut Tape<f32>, p: &HeadParams) -> HeadVars {
    HeadVars {
        wq: tape.constant(p.wq.clone()),
        bq: tape.constant(p.bq.clone()),
        wk: tape.constant(p.wk.clone()),
        bk: tape.constant(p.bk.clone()),
        wv: tape.constant(p.wv.clone()),
        bv: tape.constant(p.bv.clone()),
    }
}

/// Single head of `queries_from` (`n x d`) attending over `keys_from`
/// (`m x d`); returns the `n x d/h` contextualized rows and the `n x m` map.
/// Scores are scaled by `1/sqrt(d)`.
pub fn cross_attention_head(
    queries_from: &Tensor,
    keys_from: &Tensor,
    params: &HeadParams,
    pruned: bool,
) -> Result<(Tensor, HeadMap)> {
    let (n, m) = (queries_from.rows(), keys_from.rows());
    if n == 0 || m == 0 || queries_from.is_empty() || keys_from.is_empty() {
        return Err(LensError::Contract("attention over an empty sequence".into()));
    }
    let d = queries_from.cols();
    let mut tape = Tape::new();
    let hv = head_on_tape(&mut tape, params);
    let a = tape.constant(queries_from.clone());
    let b = tape.constant(keys_from.clone());
    let q = tape.matmul(a, hv.wq)?;
    let q = tape.add_row(q, hv.bq)?;
    let k = tape.matmul(b, hv.wk)?;
    let k = tape.add_row(k, hv.bk)?;
    let v = tape.matmul(b, hv.wv)?;
    let v = tape.add_row(v, hv.bv)?;
    let seg = [Segment { q_start: 0, q_len: n, k_start: 0, k_len: m }];
    let scale = 1.0 / num_traits::Float::sqrt(d as f32);
    let out = tape.attention(q, k, v, 1, scale, &seg, &[pruned])?;
    let (rows, cols, w) = tape.attention_map(out, 0, 0).expect("attention node");
    let map = HeadMap { rows, cols, weights: w.to_vec() };
    Ok((tape.value(out).clone(), map))
}

pub fn self_attention_head(x: &Tensor, params: &HeadParams, pruned: bool) -> Result<(Tensor, HeadMap)> {
    cross_attention_head(x, x, params, pruned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, rng_for};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng_for(seed, "layers-test", 0);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal(&mut r, 0.5) as f32).collect()).unwrap()
    }

    fn head(d: usize, dh: usize, seed: u64) -> HeadParams {
        HeadParams {
            wq: rand_tensor(&[d, dh], seed),
            bq: rand_tensor(&[dh], seed + 1),
            wk: rand_tensor(&[d, dh], seed + 2),
            bk: rand_tensor(&[dh], seed + 3),
            wv: rand_tensor(&[d, dh], seed + 4),
            bv: rand_tensor(&[dh], seed + 5),
        }
    }

    fn project_values(x: &Tensor, p: &HeadParams) -> Tensor {
        let mut v = x.matmul(&p.wv).unwrap();
        let dh = v.cols();
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            *val += p.bv.data()[i % dh];
        }
        v
    }

    #[test]
    fn singleton_sequence() {
        let p = head(8, 4, 1);
        let x = rand_tensor(&[1, 8], 9);
        let (out, map) = self_attention_head(&x, &p, false).unwrap();
        assert_eq!(map.weights, [1.0]);
        let expected = project_values(&x, &p);
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_tokens_split_evenly() {
        let p = head(8, 4, 2);
        let row = rand_tensor(&[1, 8], 3);
        let x = Tensor::from_rows(&[row.data(), row.data()]).unwrap();
        let (_, map) = self_attention_head(&x, &p, false).unwrap();
        assert!(map.weights.iter().all(|&w| (w - 0.5).abs() < 1e-7));
    }

    #[test]
    fn pruned_rows_equal_value_mean() {
        let p = head(8, 4, 4);
        let x = rand_tensor(&[5, 8], 5);
        let (out, map) = self_attention_head(&x, &p, true).unwrap();
        assert!(map.weights.iter().all(|&w| w == 0.2));
        let v = project_values(&x, &p);
        for c in 0..4 {
            let mean: f32 = (0..5).map(|j| v.data()[j * 4 + c]).sum::<f32>() / 5.0;
            for i in 0..5 {
                assert!((out.data()[i * 4 + c] - mean).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn single_key_copies_its_value() {
        let p = head(8, 4, 6);
        let a = rand_tensor(&[3, 8], 7);
        let b = rand_tensor(&[1, 8], 8);
        let (out, _) = cross_attention_head(&a, &b, &p, false).unwrap();
        let vb = project_values(&b, &p);
        for i in 0..3 {
            for c in 0..4 {
                assert!((out.data()[i * 4 + c] - vb.data()[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_keys_get_half_each() {
        let p = head(8, 4, 10);
        let a = rand_tensor(&[4, 8], 11);
        let row = rand_tensor(&[1, 8], 12);
        let b = Tensor::from_rows(&[row.data(), row.data()]).unwrap();
        let (_, map) = cross_attention_head(&a, &b, &p, false).unwrap();
        assert_eq!((map.rows, map.cols), (4, 2));
        assert!(map.weights.iter().all(|&w| (w - 0.5).abs() < 1e-7));
    }

    #[test]
    fn permuting_keys_permutes_columns() {
        let p = head(8, 4, 13);
        let a = rand_tensor(&[3, 8], 14);
        let b = rand_tensor(&[4, 8], 15);
        let perm = [2usize, 0, 3, 1];
        let rows: Vec<&[f32]> = perm.iter().map(|&j| b.row(j)).collect();
        let bp = Tensor::from_rows(&rows).unwrap();
        let (o1, m1) = cross_attention_head(&a, &b, &p, false).unwrap();
        let (o2, m2) = cross_attention_head(&a, &bp, &p, false).unwrap();
        for i in 0..3 {
            for (jn, &jo) in perm.iter().enumerate() {
                assert!((m2.row(i)[jn] - m1.row(i)[jo]).abs() < 1e-6);
            }
        }
        for (x, y) in o1.data().iter().zip(o2.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = head(8, 4, 1);
        let x = Tensor::zeros(&[0, 8]);
        assert!(matches!(self_attention_head(&x, &p, false), Err(LensError::Contract(_))));
    }
}
