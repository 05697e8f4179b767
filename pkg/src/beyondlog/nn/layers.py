"""Layers shared by the behaviour model and the ranker."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class EmptyContextError(ValueError):
    pass


def linear_forward(x, W, b=None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x, W = T.tensor(x), T.tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    out = T.matmul(x, W)
    if b is not None:
        b = T.tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
        out = out + b
    return out


def linear(x, P: Mapping[str, Tensor], name: str) -> Tensor:
    return linear_forward(x, P[f"{name}.w"], P.get(f"{name}.b"))


def layer_norm(x, P: Mapping[str, Tensor], name: str) -> Tensor:
    return T.layer_norm(T.tensor(x), P[f"{name}.g"], P[f"{name}.b"])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (B, n, d) -> (B, h, n, d/h)
    B, n, d = x.shape
    return T.transpose(T.reshape(x, (B, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, n, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, n_heads: int, key_mask: np.ndarray | None = None):
    """Scaled dot-product attention on already projected (B, ·, d) inputs.

    ``key_mask`` is a boolean (B, n) array of valid keys. Returns the merged
    head outputs and the (B, h, m, n) attention weights.
    """
    d = q.shape[-1]
    dh = d // n_heads
    qh, kh, vh = _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads)
    logits = T.matmul(qh, T.swap_last(kh)) * (1.0 / np.sqrt(dh))
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, NEG_INF).astype(logits.dtype)[:, None, None, :]
        logits = logits + bias
    weights = T.softmax(logits, axis=-1)
    return _merge_heads(T.matmul(weights, vh)), weights


def multi_head_attention(q_in, k_in, v_in, P: Mapping[str, Tensor], n_heads: int, name: str = "attn",
                         key_mask: np.ndarray | None = None, return_weights: bool = False):
    """Multi-head attention with input and output projections.

    Accepts unbatched (m, d)/(n, d) or batched (B, m, d)/(B, n, d) inputs.
    Parameters are read from ``P`` under ``{name}.q/.k/.v/.o``.
    """
    q_in, k_in, v_in = T.tensor(q_in), T.tensor(k_in), T.tensor(v_in)
    unbatched = q_in.ndim == 2
    if unbatched:
        q_in, k_in, v_in = (T.reshape(t, (1,) + t.shape) for t in (q_in, k_in, v_in))
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    if k_in.shape[1] == 0:
        raise EmptyContextError("attention over an empty key/value context")
    d = P[f"{name}.q.w"].shape[1]
    if d % n_heads:
        raise ConfigError(f"model width {d} is not divisible by n_heads={n_heads}")
    q = linear(q_in, P, f"{name}.q")
    k = linear(k_in, P, f"{name}.k")
    v = linear(v_in, P, f"{name}.v")
    ctx, weights = attend(q, k, v, n_heads, key_mask)
    out = linear(ctx, P, f"{name}.o")
    if unbatched:
        out = T.reshape(out, out.shape[1:])
        weights = T.reshape(weights, weights.shape[1:])
    return (out, weights) if return_weights else out


def feed_forward(x, P: Mapping[str, Tensor], name: str) -> Tensor:
    return linear(T.gelu(linear(x, P, f"{name}.fc1")), P, f"{name}.fc2")


def mlp(x, P: Mapping[str, Tensor], name: str, n_layers: int) -> Tensor:
    """GELU MLP with linear output layer; layers named ``{name}.{i}``."""
    h = T.tensor(x)
    for i in range(n_layers):
        h = linear(h, P, f"{name}.{i}")
        if i < n_layers - 1:
            h = T.gelu(h)
    return h
