"""Transformer graph encoder: per-joint temporal self-attention, pooling and classification.

Tensors follow the layout ``(..., gamma, lambda, d_model)``. Attention runs along
the frame axis separately for every joint, with projections shared across joints.
"""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ShapeError
from .tensor import Tensor


def positional_encoding(positions, d_model: int) -> np.ndarray:
    """Sinusoidal codes; ``positions`` is a frame count or an explicit index array."""
    if d_model % 2:
        raise ConfigError(f"d_model must be even, got {d_model}")
    pos = np.arange(positions) if np.isscalar(positions) else np.asarray(positions)
    pos = pos.astype(np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d_model, 2) / d_model)
    pe = np.empty((pos.shape[0], d_model))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


def causal_mask(length: int, memory: int | None = None) -> np.ndarray:
    """Boolean (query, key) mask: key <= query, and query - key <= memory when given."""
    q = np.arange(length)[:, None]
    k = np.arange(length)[None, :]
    mask = k <= q
    if memory is not None:
        mask &= (q - k) <= memory
    return mask


def attention_head(x, w_q, w_k, w_v, mask=None) -> Tensor:
    """Scaled dot-product self-attention of one head over one joint's token sequence ``(gamma, d_model)``."""
    x = T.as_tensor(x)
    q, k, v = T.matmul(x, w_q), T.matmul(x, w_k), T.matmul(x, w_v)
    d_k = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, (1, 0)), tag="attention_scores"), 1.0 / math.sqrt(d_k))
    return T.matmul(T.softmax(scores, axis=-1, mask=mask), v, tag="attention_values")


def _split_heads(t: Tensor, heads: int) -> Tensor:
    # (..., gamma, lam, H*d) -> (..., lam, H, gamma, d)
    *lead, gamma, lam, hd = t.shape
    t = T.reshape(t, tuple(lead) + (gamma, lam, heads, hd // heads))
    n = len(lead)
    return T.transpose(t, tuple(range(n)) + (n + 1, n + 2, n, n + 3))


def _merge_heads(t: Tensor) -> Tensor:
    # (..., lam, H, gamma, d) -> (..., gamma, lam, H*d)
    *lead, lam, heads, gamma, d = t.shape
    n = len(lead)
    t = T.transpose(t, tuple(range(n)) + (n + 2, n, n + 1, n + 3))
    return T.reshape(t, tuple(lead) + (gamma, lam, heads * d))


def multi_head_attention(x, params: Mapping[str, Tensor], prefix: str, heads: int,
                         mask=None, train: bool = False, dropout: float = 0.0, rng=None) -> Tensor:
    """Concatenate ``heads`` per-joint attention heads and project back to ``d_model``."""
    x = T.as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"expected (..., gamma, lambda, d_model), got {x.shape}")
    w_q, w_k, w_v = params[prefix + "WQ"], params[prefix + "WK"], params[prefix + "WV"]
    if w_q.shape[0] != x.shape[-1]:
        raise ShapeError(f"projection expects {w_q.shape[0]} features, got {x.shape[-1]}")
    q = _split_heads(T.linear(x, w_q), heads)
    k = _split_heads(T.linear(x, w_k), heads)
    v = _split_heads(T.linear(x, w_v), heads)
    d_k = q.shape[-1]
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = T.scale(T.matmul(q, kt, tag="attention_scores"), 1.0 / math.sqrt(d_k))
    attn = T.matmul(T.softmax(scores, axis=-1, mask=mask), v, tag="attention_values")
    out = T.linear(_merge_heads(attn), params[prefix + "out_proj.W"], params[prefix + "out_proj.b"])
    return T.dropout(out, dropout, train, rng)


def feed_forward(x, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = T.relu(T.linear(x, params[prefix + "ffn1.W"], params[prefix + "ffn1.b"]))
    return T.linear(h, params[prefix + "ffn2.W"], params[prefix + "ffn2.b"])


def encoder_layer(x, params: Mapping[str, Tensor], prefix: str, heads: int, mask=None,
                  train: bool = False, dropout: float = 0.0, rng=None, eps: float = 1e-5) -> Tensor:
    """Post-norm residual block: attention, add & norm, feed-forward, add & norm."""
    x = T.as_tensor(x)
    att = multi_head_attention(x, params, prefix, heads, mask, train, dropout, rng)
    x1 = T.layer_norm(T.add(x, att), params[prefix + "ln1.gamma"], params[prefix + "ln1.beta"], eps)
    ff = T.dropout(feed_forward(x1, params, prefix), dropout, train, rng)
    return T.layer_norm(T.add(x1, ff), params[prefix + "ln2.gamma"], params[prefix + "ln2.beta"], eps)


def encode(g, params: Mapping[str, Tensor], num_layers: int, heads: int, positions=None,
           mask=None, train: bool = False, dropout: float = 0.0, rng=None) -> Tensor:
    """Add positional codes (shared across joints) and run the encoder stack.

    ``positions`` defaults to ``0..gamma-1``; streaming callers pass explicit phases.
    """
    g = T.as_tensor(g)
    gamma, d_model = g.shape[-3], g.shape[-1]
    pe = positional_encoding(gamma if positions is None else positions, d_model)
    if pe.shape[0] != gamma:
        raise ShapeError(f"{pe.shape[0]} positions for {gamma} frames")
    x = T.add(g, pe[:, None, :].astype(g.dtype))
    for i in range(num_layers):
        x = encoder_layer(x, params, f"tge.layer{i}.", heads, mask, train, dropout, rng)
    return x


def global_pool(t) -> Tensor:
    """Mean over joints, then mean over frames: (..., gamma, lambda, d) -> (..., d)."""
    return T.mean(T.mean(t, axis=-2), axis=-2)


def class_logits(f, params: Mapping[str, Tensor]) -> Tensor:
    return T.linear(f, params["head.fc.W"], params["head.fc.b"])


def classify(f, params: Mapping[str, Tensor]) -> Tensor:
    """Probability vector(s) over the label vocabulary."""
    return T.softmax(class_logits(f, params), axis=-1)
