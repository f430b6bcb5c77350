"""Canonical sequence files, dataset manifests, SHREC'21 import, resampling and synthetic streams."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, ParseError
from .skeleton import (FINGER_CHAINS, NO_GESTURE, GestureEvent, SkeletonSequence, rotation_matrices)

SHREC21_CLASSES = (
    "One", "Two", "Three", "Four", "OK", "Menu", "Pointing",
    "Left", "Right", "Circle", "V", "Cross",
    "Grab", "Pinch", "Tap", "Deny", "Knob", "Expand",
)
SHREC21_JOINTS = 20


# ---------------------------------------------------------------------------
# Canonical JSON sequence files
# ---------------------------------------------------------------------------


def sequence_to_dict(seq: SkeletonSequence) -> dict:
    return {
        "id": seq.id,
        "joints": seq.num_joints,
        "frames": seq.frames.tolist(),
        "annotations": [ev.to_dict() for ev in seq.annotations],
    }


def save_canonical(seq: SkeletonSequence, path) -> None:
    Path(path).write_text(json.dumps(sequence_to_dict(seq), separators=(",", ":")))


def sequence_from_dict(doc, expected_joints: int | None = None, source: str = "<dict>") -> SkeletonSequence:
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object", source)
    for key in ("joints", "frames"):
        if key not in doc:
            raise ParseError(f"missing field {key!r}", source)
    lam = doc["joints"]
    if not isinstance(lam, int) or lam < 1:
        raise ParseError("'joints' must be a positive integer", f"{source}:joints")
    if expected_joints is not None and lam != expected_joints:
        raise ParseError(f"{lam} joints, manifest expects {expected_joints}", f"{source}:joints")
    frames = doc["frames"]
    if not isinstance(frames, list) or not frames:
        raise ParseError("'frames' must be a non-empty list", f"{source}:frames")
    for t, frame in enumerate(frames):
        if not isinstance(frame, list) or len(frame) != lam:
            raise ParseError(f"expected {lam} joints", f"{source}:frames[{t}]")
        for j, joint in enumerate(frame):
            if (not isinstance(joint, list) or len(joint) != 3
                    or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in joint)):
                raise ParseError("joint must be three numbers", f"{source}:frames[{t}][{j}]")
    arr = np.array(frames, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ParseError("non-finite coordinate", f"{source}:frames")
    anns = []
    for i, a in enumerate(doc.get("annotations", [])):
        loc = f"{source}:annotations[{i}]"
        try:
            label, start, end = a["label"], a["start"], a["end"]
        except (KeyError, TypeError):
            raise ParseError("annotation needs label, start and end", loc) from None
        if not isinstance(start, int) or not isinstance(end, int) or not isinstance(label, str):
            raise ParseError("bad annotation field types", loc)
        if not 0 <= start <= end < len(arr):
            raise ParseError(f"span [{start}, {end}] outside [0, {len(arr)})", loc)
        anns.append(GestureEvent(label, start, end))
    try:
        return SkeletonSequence(arr, tuple(anns), id=doc.get("id"))
    except ValueError as exc:
        raise ParseError(str(exc), source) from None


def load_canonical(path, expected_joints: int | None = None) -> SkeletonSequence:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", f"{path}:{exc.lineno}") from None
    return sequence_from_dict(doc, expected_joints, str(path))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    classes: list
    joints: int
    records: list = field(default_factory=list)  # dicts: id, path, split
    root: Path | None = None

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("class names must be unique")
        if not self.classes or self.classes[-1] != NO_GESTURE:
            raise ConfigError(f"the class list must end with {NO_GESTURE!r}")

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "lambda": self.joints, "records": list(self.records)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            return cls(list(doc["classes"]), int(doc["lambda"]), list(doc["records"]), path.parent)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", f"{path}:{exc.lineno}") from None
        except (KeyError, TypeError) as exc:
            raise ParseError(f"manifest missing or malformed field {exc}", str(path)) from None

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def load_split(self, name: str) -> list[SkeletonSequence]:
        root = self.root or Path(".")
        out = []
        for rec in self.split(name):
            seq = load_canonical(root / rec["path"], self.joints)
            unknown = {ev.label for ev in seq.annotations} - set(self.classes)
            if unknown:
                raise ParseError(f"labels {sorted(unknown)} not in the manifest vocabulary", rec["path"])
            out.append(seq)
        return out


def write_dataset(out_dir, classes: Sequence[str], sequences: Sequence[SkeletonSequence],
                  splits: Sequence[str]) -> DatasetManifest:
    """Write canonical files under ``out_dir/sequences`` plus ``out_dir/manifest.json``."""
    out_dir = Path(out_dir)
    (out_dir / "sequences").mkdir(parents=True, exist_ok=True)
    records = []
    joints = sequences[0].num_joints if sequences else SHREC21_JOINTS
    for seq, split in zip(sequences, splits):
        rel = f"sequences/{seq.id}.json"
        save_canonical(seq, out_dir / rel)
        records.append({"id": seq.id, "path": rel, "split": split})
    manifest = DatasetManifest(list(classes), joints, records, out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# SHREC'21 import
# ---------------------------------------------------------------------------

_SPLIT_DIRS = {"train": ("training_set", "train"), "test": ("test_set", "test")}
_SEP = re.compile(r"[;,\s]+")


def _canonical_class(name: str, source: str) -> str:
    lookup = {c.lower(): c for c in SHREC21_CLASSES}
    try:
        return lookup[name.strip().lower()]
    except KeyError:
        raise ParseError(f"unknown gesture class {name!r}", source) from None


def parse_shrec21_sequence(path, joints: int = SHREC21_JOINTS) -> np.ndarray:
    """One frame per line, ``joints * 3`` numbers separated by ';', ',' or whitespace."""
    path = Path(path)
    frames = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        tokens = [t for t in _SEP.split(line.strip()) if t]
        if len(tokens) != joints * 3:
            raise ParseError(f"expected {joints * 3} values ({joints} joints), found {len(tokens)}",
                             f"{path}:{lineno}")
        try:
            frames.append([float(t) for t in tokens])
        except ValueError:
            raise ParseError("non-numeric value", f"{path}:{lineno}") from None
    if not frames:
        raise ParseError("no frames", str(path))
    return np.array(frames).reshape(len(frames), joints, 3)


def parse_shrec21_annotations(path) -> dict[str, list[GestureEvent]]:
    """Lines ``seq_id;label;start;end;label;start;end;...`` (inclusive frame spans)."""
    path = Path(path)
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        tokens = [t for t in re.split(r"[;,\t]+", line.strip()) if t.strip()]
        if not tokens:
            continue
        loc = f"{path}:{lineno}"
        seq_id, rest = tokens[0].strip(), tokens[1:]
        if len(rest) % 3:
            raise ParseError("annotation fields must come in (label, start, end) triples", loc)
        events = []
        for i in range(0, len(rest), 3):
            try:
                start, end = int(rest[i + 1]), int(rest[i + 2])
            except ValueError:
                raise ParseError("non-integer frame index", loc) from None
            events.append(GestureEvent(_canonical_class(rest[i], loc), start, end))
        out[seq_id] = events
    return out


def import_shrec21(directory, out_dir) -> DatasetManifest:
    """Convert a raw SHREC'21 release into canonical files and a manifest.

    Expected layout: ``{training_set,test_set}/sequences/<id>.txt`` plus one
    ``annotations*.txt`` per split directory.
    """
    directory = Path(directory)
    sequences, splits = [], []
    for split, names in _SPLIT_DIRS.items():
        split_dir = next((directory / n for n in names if (directory / n).is_dir()), None)
        if split_dir is None:
            continue
        ann_files = sorted(split_dir.glob("annotations*.txt"))
        if not ann_files:
            raise ParseError("no annotations file", str(split_dir))
        annotations = parse_shrec21_annotations(ann_files[0])
        seq_files = sorted((split_dir / "sequences").glob("*.txt"),
                           key=lambda p: (len(p.stem), p.stem))
        for f in seq_files:
            frames = parse_shrec21_sequence(f)
            events = annotations.get(f.stem, [])
            for ev in events:
                if ev.end >= len(frames):
                    raise ParseError(f"annotation {ev} beyond {len(frames)} frames", str(f))
            try:
                seq = SkeletonSequence(frames, tuple(events), id=f"{split}_{f.stem}")
            except ValueError as exc:
                raise ParseError(str(exc), str(f)) from None
            sequences.append(seq)
            splits.append(split)
    if not sequences:
        raise ParseError("no SHREC'21 sequences found", str(directory))
    return write_dataset(out_dir, list(SHREC21_CLASSES) + [NO_GESTURE], sequences, splits)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def resample_frames(frames: np.ndarray, target: int) -> np.ndarray:
    """Linear interpolation of ``(gamma, ...)`` frames onto ``target`` evenly spaced times."""
    if target < 1:
        raise ConfigError("target length must be >= 1")
    frames = np.asarray(frames, dtype=np.float64)
    gamma = frames.shape[0]
    if gamma == target:
        return frames.copy()
    if gamma == 1:
        return np.repeat(frames, target, axis=0)
    pos = np.linspace(0.0, gamma - 1, target)
    lo = np.floor(pos).astype(int).clip(0, gamma - 2)
    w = (pos - lo).reshape((-1,) + (1,) * (frames.ndim - 1))
    return (1.0 - w) * frames[lo] + w * frames[lo + 1]


def resample_window(seq: SkeletonSequence, target: int) -> SkeletonSequence:
    return SkeletonSequence(resample_frames(seq.frames, target), id=seq.id)


# ---------------------------------------------------------------------------
# Synthetic gesture streams
# ---------------------------------------------------------------------------

PROTOTYPES = ("CircleCW", "CircleCCW", "SwipeLeft", "SwipeRight", "Cross",
              "StaticPose1", "StaticPose2", "StaticPose3", "StaticPose4", "StaticPose5")


def rest_pose() -> np.ndarray:
    """Open right hand in the xy plane, metres, wrist at the origin (default 20-joint layout)."""
    pose = np.zeros((20, 3))
    pose[1] = (0.0, 0.05, 0.0)
    bases = {0: (-0.035, 0.03), 1: (-0.022, 0.085), 2: (0.0, 0.09), 3: (0.02, 0.085), 4: (0.038, 0.075)}
    directions = {0: (-0.7, 0.7), 1: (-0.1, 1.0), 2: (0.0, 1.0), 3: (0.12, 1.0), 4: (0.25, 1.0)}
    seg = {0: 0.03, 1: 0.025, 2: 0.027, 3: 0.025, 4: 0.02}
    for f, chain in enumerate(FINGER_CHAINS):
        d = np.array(directions[f] + (0.0,))
        d /= np.linalg.norm(d)
        pose[chain[0]] = bases[f] + (0.0,)
        for i, j in enumerate(chain[1:], 1):
            pose[j] = pose[chain[0]] + i * seg[f] * d
    return pose


def curled_pose(extended: int) -> np.ndarray:
    """Rest pose with all fingers after the first ``extended`` folded towards the palm."""
    pose = rest_pose()
    for f, chain in enumerate(FINGER_CHAINS):
        if f < extended:
            continue
        base = pose[chain[0]]
        pts = [base]
        for i in range(1, len(chain)):
            seg = pose[chain[i]] - pose[chain[i - 1]]
            length = np.linalg.norm(seg)
            d = seg / length
            ang = i * np.pi / 3.0
            pts.append(pts[-1] + length * (np.cos(ang) * d + np.sin(ang) * np.array([0.0, 0.0, -1.0])))
        pose[list(chain)] = pts
    return pose


def _smoothstep(f):
    return f * f * (3.0 - 2.0 * f)


def gesture_motion(kind: str, length: int, amplitude: float):
    """(offsets (length, 3), pose blend weights (length,), target pose or None)."""
    f = np.linspace(0.0, 1.0, length)
    zeros = np.zeros(length)
    if kind in ("CircleCW", "CircleCCW"):
        sign = -1.0 if kind == "CircleCW" else 1.0
        theta = np.pi / 2 + sign * 2 * np.pi * _smoothstep(f)
        off = np.stack([np.cos(theta), np.sin(theta) - 1.0, zeros], 1) * amplitude
        return off, zeros, None
    if kind in ("SwipeLeft", "SwipeRight"):
        sign = -1.0 if kind == "SwipeLeft" else 1.0
        off = np.stack([sign * 2.0 * amplitude * _smoothstep(f), zeros, zeros], 1)
        return off, zeros, None
    if kind == "Cross":
        knots = np.array([[0, 0], [1, -1], [1, 0], [0, -1]], dtype=float) * 1.5 * amplitude
        s = f * 3.0
        i = np.minimum(s.astype(int), 2)
        w = (s - i)[:, None]
        xy = (1 - w) * knots[i] + w * knots[i + 1]
        return np.column_stack([xy, zeros]), zeros, None
    if kind.startswith("StaticPose"):
        k = int(kind[len("StaticPose"):])
        ramp = np.clip(np.minimum(f, 1.0 - f) / 0.2, 0.0, 1.0)
        return np.zeros((length, 3)), ramp, curled_pose(k - 1)
    raise ConfigError(f"unknown gesture prototype {kind!r}")


@dataclass
class SyntheticConfig:
    classes: tuple = ("CircleCW", "CircleCCW", "SwipeLeft", "SwipeRight", "StaticPose2")
    num_train: int = 60
    num_test: int = 20
    num_val: int = 0
    gestures_per_stream: tuple = (3, 5)
    gesture_length: tuple = (30, 45)
    idle_gap: tuple = (15, 35)
    amplitude: tuple = (0.06, 0.09)
    max_yaw: float = 0.3
    jitter: float = 0.001
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if len(self.classes) < 2:
            raise ConfigError("synthetic data needs at least two gesture classes")
        for c in self.classes:
            if c not in PROTOTYPES:
                raise ConfigError(f"unknown prototype {c!r}; choose from {PROTOTYPES}")
        for name in ("gestures_per_stream", "gesture_length", "idle_gap", "amplitude"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ConfigError(f"{name} must be a positive (low, high) range")
        if self.jitter < 0 or min(self.num_train, self.num_test, self.num_val) < 0:
            raise ConfigError("jitter and split sizes must be nonnegative")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def synth_stream(config: SyntheticConfig, rng: np.random.Generator, stream_id: str) -> SkeletonSequence:
    base = rest_pose()
    yaw = rng.uniform(-config.max_yaw, config.max_yaw)
    rot = rotation_matrices(np.array([0.0, 0.0, yaw]))
    origin = rng.uniform(-0.1, 0.1, size=3) + np.array([0.0, 0.0, 0.4])
    position = np.zeros(3)
    lo, hi = config.idle_gap
    chunks, annotations = [], []
    cursor = 0

    def idle(n):
        return np.repeat((base + position)[None], n, axis=0)

    n_gestures = int(rng.integers(config.gestures_per_stream[0], config.gestures_per_stream[1] + 1))
    for _ in range(n_gestures):
        gap = int(rng.integers(lo, hi + 1))
        chunks.append(idle(gap))
        cursor += gap
        kind = config.classes[int(rng.integers(len(config.classes)))]
        length = int(rng.integers(config.gesture_length[0], config.gesture_length[1] + 1))
        amp = rng.uniform(*config.amplitude)
        off, blend, target = gesture_motion(kind, length, amp)
        if target is None:
            frames = base[None] + (position + off)[:, None, :]
        else:
            frames = (1 - blend)[:, None, None] * base + blend[:, None, None] * target + position
        chunks.append(frames)
        annotations.append(GestureEvent(kind, cursor, cursor + length - 1))
        cursor += length
        position = position + off[-1]
    gap = int(rng.integers(lo, hi + 1))
    chunks.append(idle(gap))
    frames = np.concatenate(chunks)
    frames = frames @ rot.T + origin
    frames = frames + rng.normal(0.0, config.jitter, size=frames.shape)
    return SkeletonSequence(frames, tuple(annotations), id=stream_id)


def gen_synthetic(config: SyntheticConfig):
    """Deterministic annotated streams; returns ``(classes, sequences, splits)``."""
    rng = np.random.default_rng(config.seed)
    sequences, splits = [], []
    for split, count in (("train", config.num_train), ("val", config.num_val), ("test", config.num_test)):
        for i in range(count):
            sequences.append(synth_stream(config, rng, f"{split}_{i:04d}"))
            splits.append(split)
    classes = list(config.classes) + [NO_GESTURE]
    return classes, sequences, splits


def write_synthetic(config: SyntheticConfig, out_dir) -> DatasetManifest:
    classes, sequences, splits = gen_synthetic(config)
    manifest = write_dataset(out_dir, classes, sequences, splits)
    (Path(out_dir) / "synthetic_config.json").write_text(json.dumps(config.to_dict(), indent=2))
    return manifest
