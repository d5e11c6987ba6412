"""Neural building blocks: embedding lookup, causal multi-head attention with
distance-indexed relative positions and optional segment memory, the FFN
block, a single-layer LSTM, and the affine fusion layer that forms a shortcut
around the LSTM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    MASK_FILL,
    Tensor,
    ShapeError,
    add,
    concat,
    gather_rows,
    layer_norm,
    matmul,
    mul,
    relu,
    scale,
    sigmoid,
    slice_cols,
    slice_rows,
    slice_vec,
    softmax_rows,
    take_along_rows,
    tanh,
    transpose,
)

LN_EPS = 1e-5

FUSION_ACTIVATIONS = ("linear", "relu")


@dataclass
class AttentionParams:
    """Joined per-head projections plus relative-position terms.

    w_q/w_k/w_v/w_o are (d, d) with head h occupying columns
    [h*d_k, (h+1)*d_k). rel_emb holds one learnable row per query-key index
    difference (row 0 = distance 0). u and v are the global content and
    position bias vectors added to the queries before the two dot products.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    rel_emb: Tensor
    u: Tensor
    v: Tensor
    n_heads: int


@dataclass
class FfnParams:
    norm_gamma: Tensor
    norm_beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class LstmParams:
    """Joined gate weights: w_x (d, 4h), w_h (h, 4h), b (4h,), gate column
    blocks ordered input, forget, output, candidate."""

    w_x: Tensor
    w_h: Tensor
    b: Tensor


@dataclass
class FusionParams:
    w_lstm: Tensor
    w_in: Tensor
    b: Tensor
    activation: str = "linear"


def embed(ids, table: Tensor) -> Tensor:
    """Embedding rows for a token-id sequence; grads scatter into the table."""
    return gather_rows(table, ids)


def causal_mha(x: Tensor, mem, p: AttentionParams) -> Tensor:
    """Masked multi-head attention with residual connection.

    Queries come from x alone; keys and values from [mem; x]. Position t may
    attend to every memory row and to x rows <= t. Attention logits get a
    relative-position term indexed by query-key distance and are scaled by
    1/sqrt(d_k). Returns x + concat(heads) @ w_o; normalization is the
    caller's concern.
    """
    t, d = x.shape
    if p.w_q.shape != (d, d):
        raise ShapeError(f"causal_mha: input width {d} does not match w_q {p.w_q.shape}")
    if d % p.n_heads != 0:
        raise ShapeError(f"causal_mha: width {d} not divisible by {p.n_heads} heads")
    dk = d // p.n_heads

    if mem is not None:
        if mem.data.ndim != 2 or mem.shape[1] != d:
            raise ShapeError(f"causal_mha: memory shape {mem.shape} does not match width {d}")
        m = mem.shape[0]
        xm = concat([mem, x], axis=0)
    else:
        m = 0
        xm = x
    l = m + t

    n_dist = m + t  # distances 0 .. m+t-1
    if p.rel_emb.shape[0] < n_dist:
        raise ShapeError(
            f"causal_mha: relative table has {p.rel_emb.shape[0]} rows, needs {n_dist}")

    q = matmul(x, p.w_q)
    k = matmul(xm, p.w_k)
    v = matmul(xm, p.w_v)
    rel = slice_rows(p.rel_emb, 0, n_dist)

    # dist[t, j] = (m + t) - j; entries for future keys are masked anyway.
    pos_q = m + np.arange(t)[:, None]
    dist = np.clip(pos_q - np.arange(l)[None, :], 0, None)
    mask = Tensor(np.where(np.arange(l)[None, :] <= pos_q, 0.0, MASK_FILL))

    heads = []
    for h in range(p.n_heads):
        lo, hi = h * dk, (h + 1) * dk
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        rh = slice_cols(rel, lo, hi)
        content = matmul(add(qh, slice_vec(p.u, lo, hi)), transpose(kh))
        position = take_along_rows(
            matmul(add(qh, slice_vec(p.v, lo, hi)), transpose(rh)), dist)
        logits = add(scale(add(content, position), 1.0 / math.sqrt(dk)), mask)
        heads.append(matmul(softmax_rows(logits), vh))
    return add(x, matmul(concat(heads, axis=1), p.w_o))


def ffn_block(x: Tensor, p: FfnParams) -> Tensor:
    """x plus a two-layer ReLU feed-forward net applied to the normalized x."""
    xn = layer_norm(x, p.norm_gamma, p.norm_beta, LN_EPS)
    h = relu(add(matmul(xn, p.w1), p.b1))
    return add(x, add(matmul(h, p.w2), p.b2))


def lstm_forward(x: Tensor, h0: Tensor, c0: Tensor, p: LstmParams):
    """Standard LSTM recurrence over the rows of x.

    h0, c0 have shape (1, h). Returns (outputs [T, h], h_T, c_T).
    """
    t, d = x.shape
    hdim = p.w_h.shape[0]
    if p.w_x.shape != (d, 4 * hdim):
        raise ShapeError(f"lstm_forward: w_x {p.w_x.shape} does not match input width {d}")
    if h0.shape != (1, hdim) or c0.shape != (1, hdim):
        raise ShapeError(
            f"lstm_forward: state shapes {h0.shape}/{c0.shape} do not match hidden {hdim}")

    xw = matmul(x, p.w_x)
    h, c = h0, c0
    outs = []
    for step in range(t):
        z = add(add(slice_rows(xw, step, step + 1), matmul(h, p.w_h)), p.b)
        i = sigmoid(slice_cols(z, 0, hdim))
        f = sigmoid(slice_cols(z, hdim, 2 * hdim))
        o = sigmoid(slice_cols(z, 2 * hdim, 3 * hdim))
        g = tanh(slice_cols(z, 3 * hdim, 4 * hdim))
        c = add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))
        outs.append(h)
    return concat(outs, axis=0), h, c


def fusion(x_lstm: Tensor, x: Tensor, p: FusionParams) -> Tensor:
    """Row-wise f(x_lstm @ w_lstm + x @ w_in + b), the LSTM-bypass shortcut."""
    if x_lstm.shape != x.shape:
        raise ShapeError(f"fusion: shapes {x_lstm.shape} and {x.shape} differ")
    if p.activation not in FUSION_ACTIVATIONS:
        raise ValueError(f"fusion: unknown activation {p.activation!r}")
    pre = add(add(matmul(x_lstm, p.w_lstm), matmul(x, p.w_in)), p.b)
    return relu(pre) if p.activation == "relu" else pre
