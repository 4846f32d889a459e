//! Composite operations built from tape primitives.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Scaled dot-product attention `softmax(q·kᵀ/√d)·v` in single-head form.
///
/// `q: [L, D]`, `k, v: [S, D]` sharing the feature width.
pub fn attention<S: Scalar>(
    tape: &Tape<S>,
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
) -> Result<Tensor<S>> {
    let d = match (q.shape(), k.shape(), v.shape()) {
        ([_, dq], [sk, dk], [sv, dv]) if dq == dk && dk == dv && sk == sv => *dq,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: q.shape().to_vec(),
                rhs: k.shape().to_vec(),
            })
        }
    };
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, &kt)?;
    let scaled = tape.scale(&scores, S::from_f64(1.0 / (d as f64).sqrt()))?;
    let weights = tape.softmax(&scaled, 1)?;
    tape.matmul(&weights, v)
}

/// Multi-head variant; splits the feature axis into `heads` equal slices and
/// runs [`attention`] per slice. `heads == 1` is the plain single-head form.
pub fn multi_head_attention<S: Scalar>(
    tape: &Tape<S>,
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
) -> Result<Tensor<S>> {
    if heads <= 1 {
        return attention(tape, q, k, v);
    }
    let d = q.shape()[1];
    if d % heads != 0 {
        return Err(Error::invalid(
            "multi_head_attention",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = slice_cols(tape, q, h * dh, dh)?;
        let kh = slice_cols(tape, k, h * dh, dh)?;
        let vh = slice_cols(tape, v, h * dh, dh)?;
        outs.push(attention(tape, &qh, &kh, &vh)?);
    }
    concat_cols(tape, &outs)
}

/// Column slice via a double transpose; fine at these sizes.
pub fn slice_cols<S: Scalar>(
    tape: &Tape<S>,
    x: &Tensor<S>,
    start: usize,
    len: usize,
) -> Result<Tensor<S>> {
    let xt = tape.transpose(x)?;
    let sliced = tape.slice_rows(&xt, start, len)?;
    tape.transpose(&sliced)
}

pub fn concat_cols<S: Scalar>(tape: &Tape<S>, parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    let transposed: Vec<Tensor<S>> = parts
        .iter()
        .map(|p| tape.transpose(p))
        .collect::<Result<_>>()?;
    let cat = tape.concat_rows(&transposed)?;
    tape.transpose(&cat)
}

/// Mean squared error between a prediction and a constant target.
pub fn mse<S: Scalar>(tape: &Tape<S>, pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(&diff, &diff)?;
    tape.mean_all(&sq)
}

/// Row-index plan converting frame-major token rows `[frame, position]` to
/// position-major `[position, frame]` and back. Shared by the temporal
/// attention blocks.
pub fn interleave_indices(frames: usize, positions: usize) -> (Rc<[usize]>, Rc<[usize]>) {
    let mut to_pos_major = Vec::with_capacity(frames * positions);
    for p in 0..positions {
        for f in 0..frames {
            to_pos_major.push(f * positions + p);
        }
    }
    let mut to_frame_major = vec![0usize; frames * positions];
    for (new_row, &old_row) in to_pos_major.iter().enumerate() {
        to_frame_major[old_row] = new_row;
    }
    (to_pos_major.into(), to_frame_major.into())
}
