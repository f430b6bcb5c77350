"""Hand skeleton data model, graph topology and adjacency, preprocessing and augmentation."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, DegenerateSkeletonError, InputError, MissingReferenceError

NO_GESTURE = "NoGesture"

# 0 wrist, 1 palm, thumb 2-4, index 5-8, middle 9-12, ring 13-16, pinky 17-19.
DEFAULT_JOINT_NAMES = (
    "wrist", "palm",
    "thumb1", "thumb2", "thumb_tip",
    "index1", "index2", "index3", "index_tip",
    "middle1", "middle2", "middle3", "middle_tip",
    "ring1", "ring2", "ring3", "ring_tip",
    "pinky1", "pinky2", "pinky_tip",
)
FINGER_CHAINS = ((2, 3, 4), (5, 6, 7, 8), (9, 10, 11, 12), (13, 14, 15, 16), (17, 18, 19))


def _default_edges():
    edges = [(0, 1)]
    for chain in FINGER_CHAINS:
        edges.append((1, chain[0]))
        edges.extend(zip(chain[:-1], chain[1:]))
    return edges


DEFAULT_TOPOLOGY_CONFIG = {
    "joint_count": 20,
    "edges": [list(e) for e in _default_edges()],
    "wrist_index": 0,
    "joint_names": list(DEFAULT_JOINT_NAMES),
}


@dataclass(frozen=True)
class HandTopology:
    """Undirected, connected joint graph; edges are stored as sorted pairs."""

    joint_count: int
    edges: tuple
    joint_names: tuple | None = None
    wrist_index: int = 0

    def __post_init__(self):
        n = self.joint_count
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise ConfigError(f"joint_count must be a positive integer, got {n!r}")
        seen = set()
        for edge in self.edges:
            if len(edge) != 2:
                raise ConfigError(f"edge {edge!r} is not a pair")
            i, j = int(edge[0]), int(edge[1])
            if i == j:
                raise ConfigError(f"self-edge ({i}, {j})")
            if not (0 <= i < n and 0 <= j < n):
                raise ConfigError(f"edge ({i}, {j}) out of range for {n} joints")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ConfigError(f"duplicate edge {key}")
            seen.add(key)
        object.__setattr__(self, "edges", tuple(sorted(seen)))
        if self.joint_names is not None:
            if len(self.joint_names) != n:
                raise ConfigError("joint_names length differs from joint_count")
            object.__setattr__(self, "joint_names", tuple(self.joint_names))
        if not 0 <= self.wrist_index < n:
            raise ConfigError(f"wrist_index {self.wrist_index} out of range")
        if np.isinf(self.hop_distances()).any():
            raise ConfigError("topology graph is disconnected")

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.joint_count, self.joint_count))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def hop_distances(self) -> np.ndarray:
        """All-pairs hop distance by BFS; ``inf`` for unreachable pairs."""
        n = self.joint_count
        nbrs = [[] for _ in range(n)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        dist = np.full((n, n), np.inf)
        for src in range(n):
            dist[src, src] = 0
            queue = deque([src])
            while queue:
                u = queue.popleft()
                for v in nbrs[u]:
                    if np.isinf(dist[src, v]):
                        dist[src, v] = dist[src, u] + 1
                        queue.append(v)
        return dist

    def to_config(self) -> dict:
        cfg = {"joint_count": self.joint_count, "edges": [list(e) for e in self.edges],
               "wrist_index": self.wrist_index}
        if self.joint_names is not None:
            cfg["joint_names"] = list(self.joint_names)
        return cfg


def build_topology(config: dict | str | Path | None = None) -> HandTopology:
    """Validated topology from a config mapping or JSON file; the default 20-joint hand if None."""
    if config is None:
        config = DEFAULT_TOPOLOGY_CONFIG
    elif isinstance(config, (str, Path)):
        config = json.loads(Path(config).read_text())
    try:
        return HandTopology(
            joint_count=config["joint_count"],
            edges=tuple(tuple(e) for e in config["edges"]),
            joint_names=config.get("joint_names"),
            wrist_index=config.get("wrist_index", 0),
        )
    except KeyError as exc:
        raise ConfigError(f"topology config missing {exc.args[0]!r}") from None


def default_topology() -> HandTopology:
    return build_topology()


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GestureEvent:
    """A labelled inclusive frame span ``[start, end]``."""

    label: str
    start: int
    end: int

    def __post_init__(self):
        if self.start > self.end:
            raise InputError(f"event start {self.start} after end {self.end}")

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def to_dict(self) -> dict:
        return {"label": self.label, "start": self.start, "end": self.end}


@dataclass(frozen=True)
class SkeletonSequence:
    """``frames`` has shape (gamma, lambda, 3); annotations are sorted, disjoint events."""

    frames: np.ndarray
    annotations: tuple = ()
    labels: tuple | None = None
    id: str | None = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3 or frames.shape[0] < 1:
            raise InputError(f"frames must have shape (gamma>=1, lambda, 3), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise InputError("frames contain non-finite values")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        anns = tuple(sorted(self.annotations, key=lambda e: e.start))
        prev_end = -1
        for ev in anns:
            if ev.start <= prev_end:
                raise InputError(f"annotation {ev} overlaps its predecessor")
            if ev.start < 0 or ev.end >= len(frames):
                raise InputError(f"annotation {ev} outside [0, {len(frames)})")
            if ev.label == NO_GESTURE:
                raise InputError("annotations cannot carry the NoGesture label")
            prev_end = ev.end
        object.__setattr__(self, "annotations", anns)
        if self.labels is not None:
            if len(self.labels) != len(frames):
                raise InputError("labels must align with frames")
            object.__setattr__(self, "labels", tuple(self.labels))

    def __len__(self):
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]

    def frame_labels(self) -> list[str]:
        """Per-frame labels: explicit ``labels`` if present, else derived from annotations."""
        if self.labels is not None:
            return list(self.labels)
        out = [NO_GESTURE] * len(self)
        for ev in self.annotations:
            out[ev.start:ev.end + 1] = [ev.label] * ev.length
        return out

    def with_frames(self, frames: np.ndarray) -> "SkeletonSequence":
        return SkeletonSequence(frames, self.annotations, self.labels, self.id, dict(self.metadata))

    def slice(self, start: int, stop: int) -> "SkeletonSequence":
        """Frames ``[start, stop)`` with annotations clipped and shifted."""
        anns = []
        for ev in self.annotations:
            s, e = max(ev.start, start), min(ev.end, stop - 1)
            if s <= e:
                anns.append(GestureEvent(ev.label, s - start, e - start))
        labels = None if self.labels is None else self.labels[start:stop]
        return SkeletonSequence(self.frames[start:stop], tuple(anns), labels, self.id)


# ---------------------------------------------------------------------------
# Partitioning and adjacency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UniLabeling:
    pass


@dataclass(frozen=True)
class Distance:
    max_hop: int = 1

    def __post_init__(self):
        if self.max_hop < 1:
            raise ConfigError("max_hop must be >= 1")


@dataclass(frozen=True)
class SpatialConfiguration:
    pass


PartitionStrategy = UniLabeling | Distance | SpatialConfiguration


def parse_partition(text: str | PartitionStrategy) -> PartitionStrategy:
    """Accept ``"uni"``, ``"distance:2"``, ``"spatial"`` or a strategy instance."""
    if not isinstance(text, str):
        return text
    name, _, arg = text.partition(":")
    if name in ("uni", "uni_labeling", "unilabeling"):
        return UniLabeling()
    if name == "distance":
        return Distance(int(arg) if arg else 1)
    if name in ("spatial", "spatial_configuration"):
        return SpatialConfiguration()
    raise ConfigError(f"unknown partition strategy {text!r}")


def partition_graph(topology: HandTopology, strategy: PartitionStrategy,
                    reference_frame: np.ndarray | None = None) -> np.ndarray:
    """Binary partition matrices, shape (K_a, lambda, lambda); row = root, column = neighbour."""
    n = topology.joint_count
    eye = np.eye(n)
    if isinstance(strategy, UniLabeling):
        return np.stack([eye, topology.adjacency()])
    if isinstance(strategy, Distance):
        hops = topology.hop_distances()
        return np.stack([(hops == k).astype(float) for k in range(strategy.max_hop + 1)])
    if isinstance(strategy, SpatialConfiguration):
        if reference_frame is None:
            raise MissingReferenceError("spatial configuration needs a reference frame")
        ref = np.asarray(reference_frame, dtype=float)
        if ref.shape != (n, 3):
            raise ConfigError(f"reference frame shape {ref.shape} != ({n}, 3)")
        radius = np.linalg.norm(ref - ref.mean(axis=0), axis=1)
        adj = topology.adjacency() > 0
        diff = radius[None, :] - radius[:, None]  # neighbour minus root
        same = np.isclose(diff, 0.0, rtol=0.0, atol=1e-12)
        root = eye + (adj & same)
        centripetal = (adj & ~same & (diff < 0)).astype(float)
        centrifugal = (adj & ~same & (diff > 0)).astype(float)
        return np.stack([root, centripetal, centrifugal])
    raise ConfigError(f"unknown partition strategy {strategy!r}")


@dataclass(frozen=True)
class AdjacencyStack:
    matrices: np.ndarray  # (K_a, lambda, lambda) normalised
    raw: np.ndarray  # (K_a, lambda, lambda) binary
    degree: np.ndarray  # (lambda,) diagonal of D

    @property
    def num_partitions(self) -> int:
        return self.matrices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.matrices.shape[1]


def normalize_adjacency(raw: np.ndarray, add_self_loops: bool = True) -> AdjacencyStack:
    """``A_k = D^-1/2 (raw_k + I) D^-1/2`` with one diagonal degree matrix shared by all k.

    ``D_ii = sum_k sum_j (raw_k + I)[i, j]``. With ``add_self_loops=False`` the
    identity is left out of both the partitions and the degree.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim == 2:
        raw = raw[None]
    if raw.ndim != 3 or raw.shape[1] != raw.shape[2] or raw.shape[0] < 1:
        raise ConfigError(f"raw partitions must have shape (K, n, n), got {raw.shape}")
    if not np.isin(raw, (0.0, 1.0)).all():
        raise ConfigError("raw partitions must be binary")
    full = raw + np.eye(raw.shape[1]) if add_self_loops else raw
    degree = full.sum(axis=(0, 2))
    if (degree <= 0).any():
        raise ConfigError("a joint has zero degree")
    inv_sqrt = 1.0 / np.sqrt(degree)
    matrices = inv_sqrt[None, :, None] * full * inv_sqrt[None, None, :]
    return AdjacencyStack(matrices, raw, degree)


def build_adjacency(topology: HandTopology, strategy: PartitionStrategy,
                    reference_frame=None, add_self_loops: bool = True) -> AdjacencyStack:
    return normalize_adjacency(partition_graph(topology, strategy, reference_frame), add_self_loops)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def normalize_frames(frames: np.ndarray, topology: HandTopology | None = None,
                     anchor: np.ndarray | None = None) -> np.ndarray:
    """Translate the anchor frame's wrist to the origin and scale its mean bone length to 1.

    ``frames`` may carry leading batch axes: (..., gamma, lambda, 3). The anchor
    defaults to each sequence's first frame.
    """
    topology = topology or default_topology()
    frames = np.asarray(frames, dtype=float)
    ref = frames[..., 0, :, :] if anchor is None else np.asarray(anchor, dtype=float)
    edges = np.array(topology.edges)
    bones = np.linalg.norm(ref[..., edges[:, 0], :] - ref[..., edges[:, 1], :], axis=-1)
    scale = bones.mean(axis=-1)
    if np.any(scale < 1e-9):
        raise DegenerateSkeletonError("mean bone length of the anchor frame is below 1e-9")
    origin = ref[..., topology.wrist_index, :]
    return (frames - origin[..., None, None, :]) / scale[..., None, None, None]


def normalize_sequence(seq: SkeletonSequence, topology: HandTopology | None = None) -> SkeletonSequence:
    return seq.with_frames(normalize_frames(seq.frames, topology))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MovingParams:
    max_rotation: float = 0.3
    max_scale_delta: float = 0.2
    max_translation: float = 0.1

    def __post_init__(self):
        if min(self.max_rotation, self.max_scale_delta, self.max_translation) < 0:
            raise ConfigError("random moving parameters must be nonnegative")


def rotation_matrices(angles: np.ndarray) -> np.ndarray:
    """Rz @ Ry @ Rx for angles of shape (..., 3) ordered (x, y, z)."""
    ax, ay, az = np.moveaxis(np.asarray(angles, dtype=float), -1, 0)
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    one, zero = np.ones_like(ax), np.zeros_like(ax)
    rx = np.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(ax.shape + (3, 3))
    ry = np.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(ax.shape + (3, 3))
    rz = np.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(ax.shape + (3, 3))
    return rz @ ry @ rx


def random_moving_frames(frames: np.ndarray, params: MovingParams, rng: np.random.Generator) -> np.ndarray:
    gamma = frames.shape[0]
    r, s, t = params.max_rotation, params.max_scale_delta, params.max_translation
    angles = rng.uniform(-r, r, size=(2, 3))
    scales = 1.0 + rng.uniform(-s, s, size=2)
    shifts = rng.uniform(-t, t, size=(2, 3))
    frac = np.linspace(0.0, 1.0, gamma) if gamma > 1 else np.zeros(1)
    lerp = lambda pair: pair[0] + frac.reshape((-1,) + (1,) * (pair.ndim - 1)) * (pair[1] - pair[0])
    rot = rotation_matrices(lerp(angles))  # (gamma, 3, 3)
    sc = lerp(scales)  # (gamma,)
    sh = lerp(shifts)  # (gamma, 3)
    moved = np.einsum("tij,tnj->tni", rot, frames)
    return sc[:, None, None] * moved + sh[:, None, :]


def random_moving(seq: SkeletonSequence, params: MovingParams | None = None,
                  rng=None) -> SkeletonSequence:
    """Apply an affine transform interpolated from a random start pose to a random end pose."""
    params = params or MovingParams()
    rng = np.random.default_rng(rng)
    return seq.with_frames(random_moving_frames(seq.frames, params, rng))


def add_noise(seq: SkeletonSequence, sigma: float = 0.001, rng=None) -> SkeletonSequence:
    if sigma < 0:
        raise ConfigError("sigma must be nonnegative")
    rng = np.random.default_rng(rng)
    return seq.with_frames(seq.frames + rng.normal(0.0, sigma, size=seq.frames.shape))


def window_label(annotations: Sequence[GestureEvent], start: int, stop: int,
                 min_overlap: float) -> str:
    """Label of the annotation covering the largest share of ``[start, stop)`` if it reaches ``min_overlap``."""
    size = stop - start
    best, best_count = NO_GESTURE, 0
    for ev in annotations:
        count = min(ev.end + 1, stop) - max(ev.start, start)
        if count > best_count:
            best, best_count = ev.label, count
    return best if best_count >= min_overlap * size - 1e-12 else NO_GESTURE


def sliding_window_augment(seq: SkeletonSequence, window: int, stride: int,
                           min_overlap: float = 0.5) -> list[tuple[SkeletonSequence, str]]:
    """Cut ``seq`` into windows; a window takes a gesture label iff enough of it lies inside that gesture."""
    if window < 1 or stride < 1:
        raise ConfigError("window and stride must be >= 1")
    if not 0.0 < min_overlap <= 1.0:
        raise ConfigError("min_overlap must be in (0, 1]")
    out = []
    for start in range(0, len(seq) - window + 1, stride):
        label = window_label(seq.annotations, start, start + window, min_overlap)
        out.append((seq.slice(start, start + window), label))
    return out


def segment_sequences(seq: SkeletonSequence, min_fragment: int = 5):
    """Split an annotated stream into gesture segments and NoGesture gap fragments.

    Returns ``(segments, fragments)``: ``segments`` is a list of
    ``(SkeletonSequence, label)``; ``fragments`` is a list of
    ``(SkeletonSequence, GestureEvent)`` whose event carries the gap bounds.
    Gaps shorter than ``min_fragment`` frames are dropped.
    """
    segments = [(seq.slice(ev.start, ev.end + 1), ev.label) for ev in seq.annotations]
    fragments = []
    cursor = 0
    for ev in list(seq.annotations) + [GestureEvent("_end", len(seq), len(seq))]:
        if ev.start - cursor >= min_fragment:
            span = GestureEvent(NO_GESTURE, cursor, ev.start - 1)
            fragments.append((seq.slice(cursor, ev.start), span))
        cursor = ev.end + 1
    return segments, fragments
