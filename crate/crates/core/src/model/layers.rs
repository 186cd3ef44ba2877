use aidmae_tensor::{ParamStore, Tape, Tensor, Var};

use super::{BlockIds, LayerNormIds, LinearIds};
use crate::Result;

pub(crate) fn linear<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    ids: &LinearIds,
    x: Var<'t>,
) -> Result<Var<'t>> {
    let w = tape.param(store, ids.weight);
    let b = tape.param(store, ids.bias);
    Ok(x.matmul(w)?.add(b)?)
}

pub(crate) fn layer_norm<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    ids: &LayerNormIds,
    x: Var<'t>,
    eps: f64,
) -> Result<Var<'t>> {
    let g = tape.param(store, ids.gain);
    let b = tape.param(store, ids.bias);
    Ok(x.layer_norm(g, b, eps)?)
}

/// Multi-head self-attention over `x: [B, S, d]`. `mask`, when given, is the
/// per-sample `[B, S, S]` allow-matrix.
fn attention<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    ids: &BlockIds,
    x: Var<'t>,
    mask: Option<&Tensor>,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let h = ids.heads;
    let dh = d / h;
    let split = |v: Var<'t>| -> Result<Var<'t>> {
        Ok(v.reshape(&[b, s, h, dh])?.permute(&[0, 2, 1, 3])?)
    };
    let q = split(linear(tape, store, &ids.query, x)?)?;
    let k = split(linear(tape, store, &ids.key, x)?)?;
    let v = split(linear(tape, store, &ids.value, x)?)?;
    let scores = q
        .matmul(k.permute(&[0, 1, 3, 2])?)?
        .scale(1.0 / (dh as f64).sqrt());
    let weights = match mask {
        Some(m) => scores.softmax_masked(m)?,
        None => scores.softmax(),
    };
    let mixed = weights
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, s, d])?;
    linear(tape, store, &ids.out, mixed)
}

/// Pre-norm transformer block: `x + attn(norm(x))`, then `x + mlp(norm(x))`.
pub(crate) fn block<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    ids: &BlockIds,
    x: Var<'t>,
    mask: Option<&Tensor>,
    eps: f64,
) -> Result<Var<'t>> {
    let h = layer_norm(tape, store, &ids.norm1, x, eps)?;
    let x = x.add(attention(tape, store, ids, h, mask)?)?;
    let h = layer_norm(tape, store, &ids.norm2, x, eps)?;
    let h = linear(tape, store, &ids.fc1, h)?.gelu();
    let h = linear(tape, store, &ids.fc2, h)?;
    Ok(x.add(h)?)
}
