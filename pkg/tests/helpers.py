"""Reference implementations used as test oracles.

Everything here is written with plain loops and numpy, deliberately sharing
no code with the package internals beyond parameter naming.
"""
from __future__ import annotations

import math

import numpy as np

from gesturestream.model import GestureModel, ModelConfig, is_weight
from gesturestream.skeleton import NO_GESTURE, HandTopology


def sinusoid(position: int, d_model: int) -> np.ndarray:
    out = np.zeros(d_model)
    for i in range(0, d_model, 2):
        angle = position / (10000.0 ** (i / d_model))
        out[i] = math.sin(angle)
        out[i + 1] = math.cos(angle)
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    mu = x.sum(axis=-1, keepdims=True) / d
    var = ((x - mu) ** 2).sum(axis=-1, keepdims=True) / d
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def layer_params(params, i):
    g = lambda name: params[f"tge.layer{i}.{name}"].data
    return {k: g(k) for k in ("WQ", "WK", "WV", "out_proj.W", "out_proj.b", "ffn1.W", "ffn1.b",
                              "ffn2.W", "ffn2.b", "ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta")}


def brute_attention(x, p, heads, mask=None):
    """Multi-head attention over frames, looping over joints, heads and queries.

    ``x``: (gamma, lambda, d). ``mask[q, k]`` False hides key k from query q.
    """
    gamma, lam, d = x.shape
    dk = p["WQ"].shape[1] // heads
    out = np.zeros((gamma, lam, heads * dk))
    for j in range(lam):
        for h in range(heads):
            cols = slice(h * dk, (h + 1) * dk)
            q = x[:, j] @ p["WQ"][:, cols]
            k = x[:, j] @ p["WK"][:, cols]
            v = x[:, j] @ p["WV"][:, cols]
            for t in range(gamma):
                s = np.array([q[t] @ k[u] / math.sqrt(dk) for u in range(gamma)])
                if mask is not None:
                    s = np.where(mask[t], s, -np.inf)
                w = softmax(s)
                out[t, j, cols] = sum(w[u] * v[u] for u in range(gamma))
    return out @ p["out_proj.W"] + p["out_proj.b"]


def brute_layer(x, p, heads, mask=None):
    x1 = layer_norm(x + brute_attention(x, p, heads, mask), p["ln1.gamma"], p["ln1.beta"])
    ff = np.maximum(x1 @ p["ffn1.W"] + p["ffn1.b"], 0.0) @ p["ffn2.W"] + p["ffn2.b"]
    return layer_norm(x1 + ff, p["ln2.gamma"], p["ln2.beta"])


def single_output_layer(history, p, heads):
    """Output for the newest token of ``history`` (m, lambda, d), recomputing every projection."""
    m, lam, d = history.shape
    dk = p["WQ"].shape[1] // heads
    att = np.zeros((lam, heads * dk))
    for h in range(heads):
        cols = slice(h * dk, (h + 1) * dk)
        q = history[-1] @ p["WQ"][:, cols]  # (lam, dk)
        k = (history @ p["WK"][:, cols]).transpose(1, 0, 2)  # (lam, m, dk)
        v = (history @ p["WV"][:, cols]).transpose(1, 0, 2)
        s = (k @ q[:, :, None])[:, :, 0] / math.sqrt(dk)  # (lam, m)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        att[:, cols] = (w[:, None, :] @ v)[:, 0, :]
    x = history[-1]
    x1 = layer_norm(x + att @ p["out_proj.W"] + p["out_proj.b"], p["ln1.gamma"], p["ln1.beta"])
    ff = np.maximum(x1 @ p["ffn1.W"] + p["ffn1.b"], 0.0) @ p["ffn2.W"] + p["ffn2.b"]
    return layer_norm(x1 + ff, p["ln2.gamma"], p["ln2.beta"])


class StreamingOracle:
    """Cache-free streaming reference for the continual encoder.

    Keeps the raw input tokens of every layer and, at each step, recomputes all
    key/value projections over the trailing ``n + 1`` tokens.
    """

    def __init__(self, model: GestureModel, n: int):
        cfg = model.config
        self.n = n
        self.heads = cfg.heads
        self.d_model = cfg.d_model
        self.layers = [layer_params(model.params, i) for i in range(cfg.num_layers)]
        self.head_w = model.params["head.fc.W"].data
        self.head_b = model.params["head.fc.b"].data
        self.inputs = [[] for _ in range(cfg.num_layers)]
        self.pooled = []
        self.t = 0

    def step(self, features):
        x = features + sinusoid(self.t % self.n, self.d_model)
        for i, p in enumerate(self.layers):
            self.inputs[i].append(x)
            window = np.stack(self.inputs[i][-(self.n + 1):])
            x = single_output_layer(window, p, self.heads)
        self.pooled.append(x.mean(axis=0))
        self.t += 1
        return x

    def classify(self):
        f = np.mean(self.pooled[-self.n:], axis=0)
        return softmax(f @ self.head_w + self.head_b)


def path_topology(n: int) -> HandTopology:
    return HandTopology(n, tuple((i, i + 1) for i in range(n - 1)))


def tiny_model(seed=0, num_joints=3, d_model=8, heads=2, num_layers=2, classes=("A", "B"),
               partition="distance:2", window=6, dropout=0.0, sgcn_channels=None) -> GestureModel:
    cfg = ModelConfig(classes=tuple(classes) + (NO_GESTURE,), num_joints=num_joints,
                      sgcn_channels=sgcn_channels or (4, d_model), d_model=d_model,
                      num_layers=num_layers, heads=heads, d_ff=2 * d_model, dropout=dropout,
                      partition=partition, window=window)
    topology = None if num_joints == 20 else path_topology(num_joints)
    return GestureModel.create(cfg, topology, seed=seed)


def perturb_params(model: GestureModel, rng, scale=0.1):
    """Move norms, biases and masks off their initial values so tests exercise them."""
    for name, p in model.params.items():
        if not is_weight(name):
            p.data = p.data + scale * rng.normal(size=p.data.shape)
    return model


def frame_sets(labels, label):
    return {i for i, v in enumerate(labels) if v == label}


def brute_jaccard(pred_seqs, gt_seqs):
    vals = []
    for p, g in zip(pred_seqs, gt_seqs):
        for label in sorted((set(p) | set(g)) - {NO_GESTURE}):
            a, b = frame_sets(p, label), frame_sets(g, label)
            vals.append(len(a & b) / len(a | b))
    return sum(vals) / len(vals) if vals else None


def brute_match(pred, gt, threshold=0.25):
    """Greedy matching on explicit frame sets: (tp, fp, fn)."""
    used = set()
    tp = fp = 0
    for p in pred:
        ps = set(range(p.start, p.end + 1))
        for j, g in enumerate(gt):
            gs = set(range(g.start, g.end + 1))
            if j not in used and g.label == p.label and len(ps & gs) / len(ps | gs) >= threshold:
                used.add(j)
                tp += 1
                break
        else:
            fp += 1
    return tp, fp, len(gt) - len(used)


class ScriptedEngine:
    """Engine stand-in returning a fixed probability vector per verdict."""

    def __init__(self, probs, classes):
        self.probs = probs
        self.classes = classes
        self.calls = 0

    def reset(self):
        self.calls = 0

    def push(self, frame):
        pass

    def predict(self):
        p = self.probs[self.calls % len(self.probs)]
        self.calls += 1
        return p
