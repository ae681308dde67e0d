"""Attention and feed-forward blocks.

Causal self-attention with a learned per-head relative bias over
within-segment offsets, bias-augmented bidirectional cross-attention
between tokens and memory slots, AddNorm, a two-layer MLP, and a top-k
MoE feed-forward with always-on shared experts.
"""

from __future__ import annotations

import math

import numpy as np

from . import numcore as nc
from .numcore import Tensor


def _param(rng, shape, std=None):
    """Glorot-scaled init for matrices, small normal otherwise.

    Matrix scale matters here: memory contents reach the token track only
    through a value-output projection pair with no trainable path upstream,
    so under-scaled projections starve that route of signal.
    """
    if std is None:
        std = math.sqrt(2.0 / sum(shape)) if len(shape) == 2 else 0.02
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


class RelativeBiasTable:
    """Learnable per-head bias indexed by clamped token-time-minus-anchor offset.

    One table per layer, shared between the read and write paths. Rows
    cover offsets -(D-1)..(D-1) shifted into [0, 2D-2].
    """

    def __init__(self, max_distance, heads, rng):
        self.max_distance = max_distance
        self.heads = heads
        self.table = _param(rng, (2 * max_distance - 1, heads))

    def parameters(self):
        yield "table", self.table


def relative_bias(table: RelativeBiasTable, t, p, direction):
    """Bias tensor for cross-attention logits.

    t: absolute token times (B, L); p: slot anchors (B, M). Read uses
    offsets t - p and returns (B, H, L, M); write uses p - t and returns
    (B, H, M, L). Never-written slots (anchor -1) take the maximum-
    distance edge of the table.
    """
    dmax = table.max_distance
    t = np.asarray(t, dtype=np.int64)
    p = np.asarray(p, dtype=np.int64)
    if direction == "read":
        delta = t[:, :, None] - p[:, None, :]
        sentinel = p[:, None, :] < 0
        edge = dmax - 1
    elif direction == "write":
        delta = p[:, :, None] - t[:, None, :]
        sentinel = p[:, :, None] < 0
        edge = -(dmax - 1)
    else:
        raise ValueError(f"direction must be 'read' or 'write', got {direction!r}")
    delta = np.where(sentinel, edge, delta)
    idx = np.clip(delta, -(dmax - 1), dmax - 1) + (dmax - 1)
    gathered = nc.gather_rows(table.table, idx)  # (B, q, k, H)
    return nc.transpose(gathered, (0, 3, 1, 2))


class AttentionParams:
    """Q/K/V/output projections for one multi-head attention block."""

    def __init__(self, d_model, heads, rng):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.d_model = d_model
        self.d_head = d_model // heads
        self.wq = _param(rng, (d_model, d_model))
        self.wk = _param(rng, (d_model, d_model))
        self.wv = _param(rng, (d_model, d_model))
        self.wo = _param(rng, (d_model, d_model))

    def parameters(self):
        for name in ("wq", "wk", "wv", "wo"):
            yield name, getattr(self, name)


def _split_heads(x, heads):
    b, n, d = x.shape
    return nc.transpose(nc.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.shape
    return nc.reshape(nc.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _attend(q, k, v, params, bias, mask, dropout_rate=0.0, rng=None):
    qh = _split_heads(nc.matmul(q, params.wq), params.heads)
    kh = _split_heads(nc.matmul(k, params.wk), params.heads)
    vh = _split_heads(nc.matmul(v, params.wv), params.heads)
    logits = nc.scale(nc.matmul(qh, nc.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(params.d_head))
    if bias is not None:
        if bias.shape[-2:] != logits.shape[-2:]:
            raise nc.ShapeError(f"bias shape {bias.shape} does not match logits {logits.shape}")
        logits = nc.add(logits, bias)
    weights = nc.masked_softmax(logits, mask)
    if dropout_rate > 0.0:
        weights = nc.dropout(weights, dropout_rate, rng)
    out = _merge_heads(nc.matmul(weights, vh))
    return nc.matmul(out, params.wo)


def cross_attention(q_src, kv_src, bias, params, key_mask=None, dropout_rate=0.0, rng=None):
    """Non-causal attention of q_src over kv_src with an additive logit bias.

    key_mask (B, Lk) removes padded keys; rows with no valid key are an
    error and must be filtered by the caller.
    """
    b = q_src.shape[0]
    lk = kv_src.shape[1]
    if key_mask is None:
        mask = np.ones((b, 1, 1, lk), dtype=bool)
    else:
        mask = np.asarray(key_mask, dtype=bool)[:, None, None, :]
    return _attend(q_src, kv_src, kv_src, params, bias, mask, dropout_rate, rng)


def self_attention(h, params, bias_table=None, pad_mask=None, dropout_rate=0.0, rng=None):
    """Causal self-attention with a learned relative bias over offsets i-j.

    Output at position i depends only on inputs at positions <= i. The
    bias table covers offsets up to its max distance; larger offsets clamp.
    """
    b, length, _ = h.shape
    if length == 0:
        raise nc.ShapeError("self_attention on empty segment")
    causal = np.tril(np.ones((length, length), dtype=bool))
    if pad_mask is None:
        mask = causal[None, None, :, :]
    else:
        keys = np.asarray(pad_mask, dtype=bool)[:, None, None, :]
        mask = causal[None, None, :, :] & keys
        # padded query rows may only see padded keys beyond position 0;
        # keep the causal diagonal so no row is fully masked
        mask = mask | np.eye(length, dtype=bool)[None, None, :, :]
    bias = None
    if bias_table is not None:
        offs = np.arange(length)[:, None] - np.arange(length)[None, :]
        dmax = bias_table.max_distance
        idx = np.clip(offs, -(dmax - 1), dmax - 1) + (dmax - 1)
        bias = nc.transpose(nc.gather_rows(bias_table.table, idx), (2, 0, 1))
        bias = nc.reshape(bias, (1, bias_table.heads, length, length))
    return _attend(h, h, h, params, bias, mask, dropout_rate, rng)


class AddNormParams:
    def __init__(self, d_model):
        self.gain = Tensor(np.ones(d_model), requires_grad=True)
        self.bias = Tensor(np.zeros(d_model), requires_grad=True)

    def parameters(self):
        yield "gain", self.gain
        yield "bias", self.bias


def add_norm(residual, delta, params: AddNormParams):
    """layer_norm(residual + delta) with learned affine."""
    if residual.shape != delta.shape:
        raise nc.ShapeError(f"add_norm shapes differ: {residual.shape} vs {delta.shape}")
    return nc.layer_norm(nc.add(residual, delta), params.gain, params.bias)


class MlpParams:
    def __init__(self, d_model, d_hidden, rng):
        self.w1 = _param(rng, (d_model, d_hidden))
        self.b1 = Tensor(np.zeros(d_hidden), requires_grad=True)
        self.w2 = _param(rng, (d_hidden, d_model))
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)

    def parameters(self):
        for name in ("w1", "b1", "w2", "b2"):
            yield name, getattr(self, name)


def ffn_mlp(x, params: MlpParams):
    hidden = nc.gelu(nc.add(nc.matmul(x, params.w1), params.b1))
    return nc.add(nc.matmul(hidden, params.w2), params.b2)


class MoEParams:
    """Routed experts with softmax-top-k gating plus always-on shared experts."""

    def __init__(self, d_model, n_routed, n_shared, top_k, d_routed, d_shared, rng):
        if not 1 <= top_k <= n_routed:
            raise ValueError(f"top_k must be in [1, {n_routed}], got {top_k}")
        self.n_routed = n_routed
        self.n_shared = n_shared
        self.top_k = top_k
        self.router = _param(rng, (d_model, n_routed))
        self.routed = [MlpParams(d_model, d_routed, rng) for _ in range(n_routed)]
        self.shared = [MlpParams(d_model, d_shared, rng) for _ in range(n_shared)]

    def parameters(self):
        yield "router", self.router
        for i, e in enumerate(self.routed):
            for name, p in e.parameters():
                yield f"routed{i}.{name}", p
        for i, e in enumerate(self.shared):
            for name, p in e.parameters():
                yield f"shared{i}.{name}", p


def ffn_moe(x, params: MoEParams):
    """Shared experts plus a softmax-renormalized top-k mixture of routed experts.

    Tokens route independently; the top-k selection is on raw router
    logits and treated as piecewise-constant, so gradients flow through
    the gate weights but not the selection itself.
    """
    logits = nc.matmul(x, params.router)  # (..., n_routed)
    sel = nc.top_k_indices(logits, params.top_k)
    keep = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(keep, sel, True, axis=-1)
    gates = nc.masked_softmax(logits, keep)  # zero off the top-k, sums to 1
    out = None
    for i, expert in enumerate(params.routed):
        w = nc.reshape(gather_gate(gates, i), gates.shape[:-1] + (1,))
        term = nc.mul(ffn_mlp(x, expert), w)
        out = term if out is None else nc.add(out, term)
    for expert in params.shared:
        term = ffn_mlp(x, expert)
        out = term if out is None else nc.add(out, term)
    return out


def gather_gate(gates, i):
    """Slice gate column i keeping the graph (reshape-free helper)."""
    n = gates.shape[-1]
    onehot = np.zeros(n)
    onehot[i] = 1.0
    return nc.reduce_sum(nc.mul(gates, onehot), axis=-1)
