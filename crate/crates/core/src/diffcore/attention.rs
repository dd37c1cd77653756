use super::tape::{Tape, Var, MASK_NEG};
use super::tensor::{Scalar, Tensor};
use super::DiffError;

/// Weight and bias nodes of an affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        tape.linear(x, self.weight, self.bias)
    }
}

/// Query, key, value and output projections of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub output: LinearVars,
}

/// Multi-head self-attention over `x`, laid out as consecutive sequences of
/// `seq_len` rows. `pad_mask[r]` is `true` for real tokens; padded keys are
/// excluded from every softmax.
pub fn multi_head_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    weights: &AttentionVars,
    x: Var,
    seq_len: usize,
    heads: usize,
    pad_mask: Option<&[bool]>,
) -> Result<Var, DiffError> {
    let d = tape.value(x).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(DiffError::HeadCount { width: d, heads });
    }
    let q = weights.query.apply(tape, x);
    let k = weights.key.apply(tape, x);
    let v = weights.value.apply(tape, x);
    let ctx = tape.attention(q, k, v, seq_len, heads, pad_mask);
    Ok(weights.output.apply(tape, ctx))
}

/// Same computation as [`multi_head_self_attention`] for a single sequence,
/// assembled from generic primitives (slice, matmul, softmax, concat)
/// instead of the fused attention kernel.
pub fn multi_head_self_attention_composed<T: Scalar>(
    tape: &mut Tape<T>,
    weights: &AttentionVars,
    x: Var,
    heads: usize,
    pad_mask: Option<&[bool]>,
) -> Result<Var, DiffError> {
    let (len, d) = (tape.value(x).rows(), tape.value(x).cols());
    if heads == 0 || d % heads != 0 {
        return Err(DiffError::HeadCount { width: d, heads });
    }
    let dh = d / heads;
    let q = weights.query.apply(tape, x);
    let k = weights.key.apply(tape, x);
    let v = weights.value.apply(tape, x);
    let bias: Vec<T> = (0..len * len)
        .map(|i| match pad_mask {
            Some(m) if !m[i % len] => T::from_f64(MASK_NEG),
            _ => T::zero(),
        })
        .collect();
    let bias = tape.constant(Tensor::matrix(len, len, bias));
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
        let scores = tape.add(scores, bias);
        let probs = tape.softmax(scores);
        outs.push(tape.matmul(probs, vh));
    }
    let ctx = tape.concat_cols(&outs);
    Ok(weights.output.apply(tape, ctx))
}
