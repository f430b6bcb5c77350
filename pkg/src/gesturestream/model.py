"""Model configuration, parameter initialisation, batch forward pass and checkpoints."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .encoder import class_logits, encode, global_pool
from .exceptions import ConfigError, ParseError, ShapeError
from .sgcn import layer_names, sgcn_forward
from .skeleton import (NO_GESTURE, AdjacencyStack, HandTopology, build_topology, normalize_adjacency,
                       normalize_frames, parse_partition, partition_graph)
from .tensor import Tensor

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    classes: tuple = (NO_GESTURE,)
    num_joints: int = 20
    in_features: int = 3
    sgcn_channels: tuple = (64, 128)
    d_model: int = 128
    num_layers: int = 6
    heads: int = 8
    d_ff: int = 256
    dropout: float = 0.3
    partition: str = "distance:2"
    add_self_loops: bool = True
    edge_importance: bool = True
    window: int = 20
    normalize_input: bool = True

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.sgcn_channels = tuple(int(c) for c in self.sgcn_channels)
        self.validate()

    def validate(self):
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("class names must be unique")
        if not self.classes or self.classes[-1] != NO_GESTURE:
            raise ConfigError(f"the label vocabulary must end with {NO_GESTURE!r}")
        if not self.sgcn_channels or self.sgcn_channels[-1] != self.d_model:
            raise ConfigError("the last S-GCN channel count must equal d_model")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal positional codes")
        if min(self.num_joints, self.in_features, self.num_layers, self.heads, self.d_ff, self.window) < 1:
            raise ConfigError("model sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        parse_partition(self.partition)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        d["sgcn_channels"] = list(self.sgcn_channels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def is_weight(name: str) -> bool:
    """True for weight matrices (regularised); biases, masks and norm parameters are not."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf.startswith("M") or leaf in ("b", "gamma", "beta"):
        return False
    return leaf in ("W", "WQ", "WK", "WV") or (leaf.startswith("W") and leaf[1:].isdigit())


def init_params(config: ModelConfig, num_partitions: int, seed=0) -> dict[str, Tensor]:
    """Xavier-uniform weights, zero biases, all-ones edge-importance masks; deterministic per seed."""
    rng = np.random.default_rng(seed)
    lam, d, h, dk = config.num_joints, config.d_model, config.heads, config.d_k
    p: dict[str, np.ndarray] = {}
    dims = (config.in_features,) + config.sgcn_channels
    for i in range(len(config.sgcn_channels)):
        w_names, m_names = layer_names(i, num_partitions)
        for wn, mn in zip(w_names, m_names):
            p[wn] = T.xavier_uniform((dims[i], dims[i + 1]), rng)
            p[mn] = np.ones((lam, lam))
    for i in range(config.num_layers):
        pre = f"tge.layer{i}."
        for proj in ("WQ", "WK", "WV"):
            # each head slab is initialised as its own (d_model, d_k) matrix
            p[pre + proj] = np.concatenate([T.xavier_uniform((d, dk), rng) for _ in range(h)], axis=1)
        p[pre + "out_proj.W"] = T.xavier_uniform((h * dk, d), rng)
        p[pre + "out_proj.b"] = np.zeros(d)
        p[pre + "ffn1.W"] = T.xavier_uniform((d, config.d_ff), rng)
        p[pre + "ffn1.b"] = np.zeros(config.d_ff)
        p[pre + "ffn2.W"] = T.xavier_uniform((config.d_ff, d), rng)
        p[pre + "ffn2.b"] = np.zeros(d)
        for ln in ("ln1", "ln2"):
            p[pre + ln + ".gamma"] = np.ones(d)
            p[pre + ln + ".beta"] = np.zeros(d)
    p["head.fc.W"] = T.xavier_uniform((d, config.num_classes), rng)
    p["head.fc.b"] = np.zeros(config.num_classes)
    return {name: Tensor(arr, name=name) for name, arr in p.items()}


class GestureModel:
    """S-GCN + transformer graph encoder + pooled linear classifier.

    Inputs are raw skeleton windows ``(batch, gamma, lambda, 3)``; they are
    normalised per window when ``config.normalize_input`` is set.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], topology: HandTopology,
                 adjacency: AdjacencyStack):
        self.config = config
        self.params = params
        self.topology = topology
        self.adjacency = adjacency
        if adjacency.num_joints != config.num_joints or topology.joint_count != config.num_joints:
            raise ConfigError("topology/adjacency joint count differs from the model config")

    @classmethod
    def create(cls, config: ModelConfig, topology: HandTopology | None = None, seed=0,
               reference_frame=None) -> "GestureModel":
        topology = topology or build_topology()
        raw = partition_graph(topology, parse_partition(config.partition), reference_frame)
        adj = normalize_adjacency(raw, config.add_self_loops)
        return cls(config, init_params(config, adj.num_partitions, seed), topology, adj)

    # -- forward -----------------------------------------------------------

    def preprocess(self, windows) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim == 3:
            windows = windows[None]
        if windows.ndim != 4 or windows.shape[2:] != (self.config.num_joints, self.config.in_features):
            raise ShapeError(f"expected (batch, gamma, {self.config.num_joints}, "
                             f"{self.config.in_features}), got {windows.shape}")
        if self.config.normalize_input:
            windows = normalize_frames(windows, self.topology)
        return windows

    def spatial_features(self, s) -> Tensor:
        return sgcn_forward(s, self.adjacency, self.params, len(self.config.sgcn_channels),
                            self.config.edge_importance)

    def forward(self, s, train: bool = False, rng=None, positions=None, mask=None) -> Tensor:
        """Logits for already-preprocessed windows ``s``."""
        cfg = self.config
        g = self.spatial_features(s)
        t = encode(g, self.params, cfg.num_layers, cfg.heads, positions, mask,
                   train, cfg.dropout, rng)
        return class_logits(global_pool(t), self.params)

    def predict_proba(self, windows, batch_size: int = 64) -> np.ndarray:
        x = self.preprocess(windows)
        out = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                logits = self.forward(Tensor(x[i:i + batch_size]))
                out.append(T.softmax(logits, axis=-1).data)
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes))

    def predict(self, windows) -> np.ndarray:
        return self.predict_proba(windows).argmax(axis=1)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    # -- checkpoints ---------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "GestureModel":
        return load_checkpoint(path)


def _expand_heads(params: Mapping[str, Tensor], heads: int) -> dict[str, np.ndarray]:
    out = {}
    for name, t in params.items():
        prefix, leaf = name.rsplit(".", 1)
        if name.startswith("tge.") and leaf in ("WQ", "WK", "WV"):
            for h, slab in enumerate(np.split(t.data, heads, axis=1)):
                out[f"{prefix}.head{h}.{leaf}"] = slab
        else:
            out[name] = t.data
    return out


def _collapse_heads(arrays: Mapping[str, np.ndarray], heads: int) -> dict[str, np.ndarray]:
    out = {}
    grouped: dict[str, list] = {}
    for name, arr in arrays.items():
        parts = name.split(".")
        if name.startswith("tge.") and len(parts) == 4 and parts[2].startswith("head"):
            key = f"{parts[0]}.{parts[1]}.{parts[3]}"
            grouped.setdefault(key, [None] * heads)[int(parts[2][4:])] = arr
        else:
            out[name] = arr
    for key, slabs in grouped.items():
        if any(s is None for s in slabs):
            raise ParseError("checkpoint is missing attention heads", key)
        out[key] = np.concatenate(slabs, axis=1)
    return out


def save_checkpoint(model: GestureModel, path) -> None:
    """Write an ``.npz`` archive of named parameter arrays plus a JSON metadata record."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "topology": model.topology.to_config(),
    }
    arrays = _expand_heads(model.params, model.config.heads)
    arrays["__adjacency_raw__"] = model.adjacency.raw
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> GestureModel:
    try:
        archive = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ParseError(f"cannot read checkpoint: {exc}", str(path)) from None
    with archive:
        if "__meta__" not in archive.files:
            raise ParseError("checkpoint has no metadata record", str(path))
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {meta.get('format_version')}", str(path))
        arrays = {k: archive[k] for k in archive.files if not k.startswith("__")}
        raw = archive["__adjacency_raw__"]
    config = ModelConfig.from_dict(meta["config"])
    topology = build_topology(meta["topology"])
    adj = normalize_adjacency(raw, config.add_self_loops)
    arrays = _collapse_heads(arrays, config.heads)
    expected = init_params(config, adj.num_partitions, seed=0)
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        raise ParseError(f"checkpoint parameters do not match the config (missing {missing[:3]})", str(path))
    params = {}
    for name, ref in expected.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != ref.shape:
            raise ParseError(f"shape {arr.shape} != {ref.shape}", name)
        params[name] = Tensor(arr, name=name)
    return GestureModel(config, params, topology, adj)
