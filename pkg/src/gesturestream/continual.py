"""Streaming encoder: single-output attention against a rolling key/value memory.

Each step consumes one skeleton frame, projects only that frame's query, key
and value tokens, and attends over them plus the ``n`` most recent cached
key/value tokens of the same layer. Deeper layers cache projections of the
single outputs of the layer below. Inference only; parameters come from a
trained :class:`~gesturestream.model.GestureModel`.

Positional codes cycle with phase ``step mod n``; cached tokens keep the code
they were computed with.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import positional_encoding
from .exceptions import ConfigError, ShapeError, StateError
from .skeleton import normalize_frames
from .tensor import Tensor, np_matmul


class KVMemory:
    """Fixed-capacity FIFO of key/value tokens.

    Tokens have shape ``key_shape = (..., lambda, d_k)``. Storage keeps one slot
    beyond ``capacity`` so the newest token and the ``capacity`` previous ones
    are attended to without copying; slot order is irrelevant to attention.
    """

    def __init__(self, capacity: int, key_shape: tuple, value_shape: tuple | None = None,
                 dtype=np.float64):
        if capacity < 0:
            raise ConfigError("memory capacity must be >= 0")
        self.capacity = capacity
        value_shape = key_shape if value_shape is None else value_shape
        slots = capacity + 1
        # slot axis sits just before the feature axis: (..., lambda, slots, d)
        self._keys = np.zeros(key_shape[:-1] + (slots, key_shape[-1]), dtype)
        self._values = np.zeros(value_shape[:-1] + (slots, value_shape[-1]), dtype)
        self._filled = 0
        self._next = 0
        self._order: list[int] = []
        self.steps = 0

    def __len__(self):
        """Number of previous tokens currently retained (at most ``capacity``)."""
        return min(self._filled, self.capacity)

    @property
    def length(self) -> int:
        return len(self)

    def reset(self) -> None:
        self._filled = 0
        self._next = 0
        self._order.clear()
        self.steps = 0

    def _write(self, key: np.ndarray, value: np.ndarray) -> None:
        slots = self.capacity + 1
        self._keys[..., self._next, :] = key
        self._values[..., self._next, :] = value
        if self._next in self._order:
            self._order.remove(self._next)
        self._order.append(self._next)
        self._next = (self._next + 1) % slots
        self._filled = min(self._filled + 1, slots)
        self.steps += 1

    def _active(self):
        m = self._filled
        return self._keys[..., :m, :], self._values[..., :m, :]

    def tokens(self):
        """Retained previous tokens oldest to newest: arrays (length, ..., lambda, d)."""
        order = self._order[-len(self):] if len(self) else []
        keys = np.stack([self._keys[..., i, :] for i in order]) if order else np.zeros((0,))
        values = np.stack([self._values[..., i, :] for i in order]) if order else np.zeros((0,))
        return keys, values


def co_so_att_step(q: np.ndarray, k: np.ndarray, v: np.ndarray, memory: KVMemory) -> np.ndarray:
    """Attention output for the newest query token only.

    ``scores = q . (k || K_mem)^T / sqrt(d_k)``; output ``softmax(scores) . (v || V_mem)``.
    ``(k, v)`` then joins the memory, evicting the oldest token when full.
    Shapes: ``q, k: (..., lambda, d_k)``, ``v: (..., lambda, d_v)``.
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"query {q.shape}, key {k.shape}, value {v.shape} do not conform")
    if memory._keys.shape[:-2] != q.shape[:-1] or memory._keys.shape[-1] != q.shape[-1]:
        raise ShapeError(f"memory holds tokens {memory._keys.shape[:-2] + memory._keys.shape[-1:]}, got {q.shape}")
    memory._write(k, v)
    keys, values = memory._active()
    scores = np_matmul(q[..., None, :], np.swapaxes(keys, -1, -2), tag="attention_scores")
    scores = scores / math.sqrt(q.shape[-1])
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return np_matmul(w, values, tag="attention_values")[..., 0, :]


def _layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


@dataclass
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    ffn1_w: np.ndarray
    ffn1_b: np.ndarray
    ffn2_w: np.ndarray
    ffn2_b: np.ndarray
    ln1: tuple
    ln2: tuple

    @classmethod
    def from_params(cls, params, index: int) -> "LayerWeights":
        g = lambda name: params[f"tge.layer{index}.{name}"].data
        return cls(g("WQ"), g("WK"), g("WV"), g("out_proj.W"), g("out_proj.b"),
                   g("ffn1.W"), g("ffn1.b"), g("ffn2.W"), g("ffn2.b"),
                   (g("ln1.gamma"), g("ln1.beta")), (g("ln2.gamma"), g("ln2.beta")))


@dataclass
class ContinualEncoderState:
    memories: list
    pooled: np.ndarray  # (n, d_model) ring buffer of joint-pooled outputs
    pooled_count: int = 0
    steps: int = 0
    anchor: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def fresh(cls, num_layers: int, capacity: int, heads: int, num_joints: int, d_k: int,
              d_model: int) -> "ContinualEncoderState":
        if capacity < 1:
            raise ConfigError("memory capacity n must be >= 1")
        mems = [KVMemory(capacity, (heads, num_joints, d_k)) for _ in range(num_layers)]
        return cls(mems, np.zeros((capacity, d_model)))

    @property
    def capacity(self) -> int:
        return self.pooled.shape[0]

    @property
    def phase(self) -> int:
        return self.steps % self.capacity


def reset_state(state: ContinualEncoderState) -> ContinualEncoderState:
    for mem in state.memories:
        mem.reset()
    state.pooled[:] = 0.0
    state.pooled_count = 0
    state.steps = 0
    state.anchor = None
    return state


def continual_encoder_step(frame_features: np.ndarray, state: ContinualEncoderState,
                           layers: list[LayerWeights], heads: int, pe_table: np.ndarray):
    """Run one frame's ``(lambda, d_model)`` spatial features through every layer.

    Returns ``(token, state)``; the joint-mean of the token is pushed into the
    pooled ring buffer used by :func:`continual_classify_step`.
    """
    x = np.asarray(frame_features, dtype=np.float64)
    lam, d_model = x.shape
    if pe_table.shape[1] != d_model:
        raise ShapeError(f"features have {d_model} channels, positional table {pe_table.shape[1]}")
    x = x + pe_table[state.phase]
    for mem, w in zip(state.memories, layers):
        d_k = w.w_q.shape[1] // heads
        split = lambda t: t.reshape(lam, heads, -1).transpose(1, 0, 2)
        q = split(np_matmul(x, w.w_q))
        k = split(np_matmul(x, w.w_k))
        v = split(np_matmul(x, w.w_v))
        y = co_so_att_step(q, k, v, mem)  # (H, lambda, d_v)
        att = np_matmul(y.transpose(1, 0, 2).reshape(lam, heads * d_k), w.out_w) + w.out_b
        x1 = _layer_norm(x + att, *w.ln1)
        ff = np_matmul(np.maximum(np_matmul(x1, w.ffn1_w) + w.ffn1_b, 0.0), w.ffn2_w) + w.ffn2_b
        x = _layer_norm(x1 + ff, *w.ln2)
    state.pooled[state.steps % state.capacity] = x.mean(axis=0)
    state.pooled_count = min(state.pooled_count + 1, state.capacity)
    state.steps += 1
    return x, state


def continual_classify_step(state: ContinualEncoderState, head_w: np.ndarray, head_b: np.ndarray) -> np.ndarray:
    """Class probabilities from the mean of the buffered pooled outputs."""
    if state.pooled_count == 0:
        raise StateError("no frames have been processed since the last reset")
    f = state.pooled[:state.pooled_count].mean(axis=0)
    logits = np_matmul(f, head_w) + head_b
    e = np.exp(logits - logits.max())
    return e / e.sum()


class ContinualEncoder:
    """Frame-at-a-time recogniser sharing parameters with a trained model.

    Single consumer: one instance per stream.
    """

    def __init__(self, model, memory: int | None = None):
        cfg = model.config
        self.model = model
        self.n = cfg.window if memory is None else int(memory)
        self.heads = cfg.heads
        self.layers = [LayerWeights.from_params(model.params, i) for i in range(cfg.num_layers)]
        self.head_w = model.params["head.fc.W"].data
        self.head_b = model.params["head.fc.b"].data
        self.pe_table = positional_encoding(self.n, cfg.d_model)
        self.state = ContinualEncoderState.fresh(cfg.num_layers, self.n, cfg.heads,
                                                 cfg.num_joints, cfg.d_k, cfg.d_model)

    def reset(self) -> None:
        reset_state(self.state)

    def spatial(self, frame: np.ndarray, normalize: bool = True) -> np.ndarray:
        """S-GCN features of one raw frame; normalisation is anchored on the first frame since reset."""
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (self.model.config.num_joints, self.model.config.in_features):
            raise ShapeError(f"frame shape {frame.shape} does not match the model")
        if normalize and self.model.config.normalize_input:
            if self.state.anchor is None:
                self.state.anchor = frame.copy()
            frame = normalize_frames(frame[None], self.model.topology, anchor=self.state.anchor)[0]
        with T.no_grad():
            return self.model.spatial_features(Tensor(frame)).data

    def step_features(self, frame_features: np.ndarray) -> np.ndarray:
        token, _ = continual_encoder_step(frame_features, self.state, self.layers, self.heads, self.pe_table)
        return token

    def step(self, frame: np.ndarray, normalize: bool = True) -> np.ndarray:
        return self.step_features(self.spatial(frame, normalize))

    def classify(self) -> np.ndarray:
        return continual_classify_step(self.state, self.head_w, self.head_b)
