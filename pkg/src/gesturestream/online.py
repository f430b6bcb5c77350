"""Sliding-window online recognition with per-class probability thresholds."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .continual import ContinualEncoder
from .exceptions import ConfigError, DataError, LabelError, ParseError
from .skeleton import NO_GESTURE, GestureEvent, SkeletonSequence


@dataclass
class ThresholdTable:
    """Per-class minimum probability; classes without an entry use ``default_threshold``."""

    alpha: dict = field(default_factory=dict)
    default_threshold: float = 0.5

    def __post_init__(self):
        if NO_GESTURE in self.alpha:
            raise ConfigError("NoGesture has no threshold")
        for label, a in list(self.alpha.items()) + [("default", self.default_threshold)]:
            if not 0.0 <= a <= 1.0:
                raise ConfigError(f"threshold for {label} must lie in [0, 1], got {a}")

    def __getitem__(self, label: str) -> float:
        return self.alpha.get(label, self.default_threshold)

    def to_dict(self) -> dict:
        return {"alpha": dict(self.alpha), "default_threshold": self.default_threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdTable":
        return cls({str(k): float(v) for k, v in d.get("alpha", {}).items()},
                   float(d.get("default_threshold", 0.5)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ThresholdTable":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, AttributeError, TypeError, ValueError) as exc:
            raise ParseError(f"bad threshold file: {exc}", str(path)) from None


def thresholds_from_probabilities(probs: np.ndarray, labels: Sequence[str], classes: Sequence[str],
                                  default_threshold: float = 0.5) -> ThresholdTable:
    """alpha(C) = mean predicted P(C) over windows of true class C that are classified as C."""
    probs = np.asarray(probs)
    if len(labels) == 0:
        raise DataError("threshold learning needs at least one validation window")
    pred = probs.argmax(axis=1)
    index = {c: i for i, c in enumerate(classes)}
    unknown = set(labels) - set(index)
    if unknown:
        raise LabelError(f"labels {sorted(unknown)} are not in the model vocabulary")
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for row, (p, label) in enumerate(zip(pred, labels)):
        if label == NO_GESTURE or index[label] != p:
            continue
        sums[label] = sums.get(label, 0.0) + float(probs[row, p])
        counts[label] = counts.get(label, 0) + 1
    alpha = {c: sums[c] / counts[c] for c in classes if c in counts}
    return ThresholdTable(alpha, default_threshold)


def learn_thresholds(model, windows, labels: Sequence[str], default_threshold: float = 0.5) -> ThresholdTable:
    if len(labels) == 0:
        raise DataError("threshold learning needs at least one validation window")
    return thresholds_from_probabilities(model.predict_proba(windows), labels, model.config.classes,
                                         default_threshold)


def filter_verdict(probs: np.ndarray, classes: Sequence[str], thresholds: ThresholdTable) -> str:
    """Argmax class, demoted to NoGesture when its probability falls below its threshold."""
    best = int(np.argmax(probs))
    label = classes[best]
    if label == NO_GESTURE or probs[best] < thresholds[label]:
        return NO_GESTURE
    return label


# ---------------------------------------------------------------------------
# Engines: push one frame at a time, ask for class probabilities on demand
# ---------------------------------------------------------------------------


class BatchEngine:
    """Classifies the trailing ``window`` frames with the offline model."""

    def __init__(self, model, window: int):
        self.model = model
        self.window = window
        self.classes = model.config.classes
        self._frames: deque = deque(maxlen=window)

    def reset(self) -> None:
        self._frames.clear()

    def push(self, frame: np.ndarray) -> None:
        self._frames.append(np.asarray(frame, dtype=np.float64))

    def predict(self) -> np.ndarray:
        return self.model.predict_proba(np.stack(self._frames)[None])[0]


class ContinualEngine:
    """Adapter exposing :class:`ContinualEncoder` through the engine interface."""

    def __init__(self, model, memory: int | None = None):
        self.encoder = ContinualEncoder(model, memory)
        self.classes = model.config.classes

    def reset(self) -> None:
        self.encoder.reset()

    def push(self, frame: np.ndarray) -> None:
        self.encoder.step(frame)

    def predict(self) -> np.ndarray:
        return self.encoder.classify()


def make_engine(model, kind: str = "batch", window: int = 20, memory: int | None = None):
    if kind == "batch":
        return BatchEngine(model, window)
    if kind == "continual":
        return ContinualEngine(model, window if memory is None else memory)
    raise ConfigError(f"unknown engine {kind!r}")


class StreamLabeler:
    """Causal per-frame labelling of a frame stream.

    After ``t`` frames, when ``t >= window`` and ``(t - window) % stride == 0``,
    the engine classifies and the thresholded verdict labels frames
    ``[t - stride, t)``. :meth:`push` returns ``(frame_index, label)`` pairs as
    soon as they are final; :meth:`finish` flushes the rest as NoGesture.
    """

    def __init__(self, engine, thresholds: ThresholdTable, window: int = 20, stride: int = 5):
        if stride < 1 or window < stride:
            raise ConfigError(f"need stride >= 1 and window >= stride (window={window}, stride={stride})")
        self.engine = engine
        self.thresholds = thresholds
        self.window = window
        self.stride = stride
        self.count = 0
        self._emitted = 0
        self.verdicts: list[tuple[int, str, float]] = []

    def push(self, frame) -> list[tuple[int, str]]:
        self.engine.push(frame)
        self.count += 1
        t = self.count
        out = []
        if t >= self.window and (t - self.window) % self.stride == 0:
            probs = self.engine.predict()
            label = filter_verdict(probs, self.engine.classes, self.thresholds)
            self.verdicts.append((t, label, float(np.max(probs))))
            while self._emitted < t - self.stride:
                out.append((self._emitted, NO_GESTURE))
                self._emitted += 1
            while self._emitted < t:
                out.append((self._emitted, label))
                self._emitted += 1
        elif t < self.window:
            # frames before the first verdict's span are never covered
            while self._emitted < min(t, self.window - self.stride):
                out.append((self._emitted, NO_GESTURE))
                self._emitted += 1
        return out

    def finish(self) -> list[tuple[int, str]]:
        out = [(i, NO_GESTURE) for i in range(self._emitted, self.count)]
        self._emitted = self.count
        return out


def iter_labels(engine, thresholds: ThresholdTable, frames: Iterable, window: int = 20,
                stride: int = 5) -> Iterator[tuple[int, str]]:
    labeler = StreamLabeler(engine, thresholds, window, stride)
    for frame in frames:
        yield from labeler.push(frame)
    yield from labeler.finish()


def stream_recognize(engine, thresholds: ThresholdTable, stream, window: int = 20,
                     stride: int = 5) -> list[str]:
    """Per-frame labels for a whole stream (SkeletonSequence or frame array)."""
    frames = stream.frames if isinstance(stream, SkeletonSequence) else np.asarray(stream)
    engine.reset()
    labels = [NO_GESTURE] * len(frames)
    for idx, label in iter_labels(engine, thresholds, frames, window, stride):
        labels[idx] = label
    return labels


def count_verdicts(length: int, window: int, stride: int) -> int:
    return 0 if length < window else (length - window) // stride + 1


def extract_events(labels: Sequence[str], min_duration: int = 5, merge_gap: int = 5) -> list[GestureEvent]:
    """Runs of one gesture label become events; same-label runs split by short NoGesture gaps merge."""
    if min_duration < 1 or merge_gap < 0:
        raise ConfigError("need min_duration >= 1 and merge_gap >= 0")
    runs: list[list] = []
    for i, label in enumerate(labels):
        if runs and runs[-1][0] == label and runs[-1][2] == i - 1:
            runs[-1][2] = i
        else:
            runs.append([label, i, i])
    merged: list[list] = []
    for label, start, end in runs:
        if label == NO_GESTURE:
            continue
        # every gesture run lands in ``merged``, so a same-label tail means only NoGesture in between
        if merged and merged[-1][0] == label and start - merged[-1][2] - 1 <= merge_gap:
            merged[-1][2] = end
            continue
        merged.append([label, start, end])
    return [GestureEvent(lbl, s, e) for lbl, s, e in merged if e - s + 1 >= min_duration]
