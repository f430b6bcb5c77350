"""Glue between annotated streams, the window classifier and the online protocol."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import resample_frames
from .exceptions import ConfigError
from .metrics import MetricsReport, evaluate
from .online import ThresholdTable, extract_events, learn_thresholds, make_engine, stream_recognize
from .skeleton import NO_GESTURE, SkeletonSequence, segment_sequences, sliding_window_augment


def training_windows(sequences: Sequence[SkeletonSequence], classes: Sequence[str], window: int,
                     stride: int = 5, min_overlap: float = 0.5, include_segments: bool = True):
    """Fixed-length training windows and integer labels from annotated streams.

    Combines whole gesture segments and NoGesture gap fragments (both
    resampled to ``window`` frames) with sliding windows over each stream.
    """
    index = {c: i for i, c in enumerate(classes)}
    xs, ys = [], []
    for seq in sequences:
        if include_segments:
            segments, fragments = segment_sequences(seq)
            for part, label in segments:
                xs.append(resample_frames(part.frames, window))
                ys.append(index[label])
            for part, _ in fragments:
                xs.append(resample_frames(part.frames, window))
                ys.append(index[NO_GESTURE])
        for part, label in sliding_window_augment(seq, window, stride, min_overlap):
            xs.append(part.frames)
            ys.append(index[label])
    if not xs:
        return np.zeros((0, window, 0, 3)), np.zeros(0, dtype=np.int64)
    return np.stack(xs), np.array(ys, dtype=np.int64)


def labelled_windows(sequences: Sequence[SkeletonSequence], window: int, stride: int = 5,
                     min_overlap: float = 0.5):
    """Sliding windows with string labels, as seen by the online recogniser."""
    xs, labels = [], []
    for seq in sequences:
        for part, label in sliding_window_augment(seq, window, stride, min_overlap):
            xs.append(part.frames)
            labels.append(label)
    return (np.stack(xs) if xs else np.zeros((0, window, 0, 3))), labels


def fit_thresholds(model, sequences: Sequence[SkeletonSequence], window: int, stride: int = 5,
                   min_overlap: float = 0.5, default_threshold: float = 0.5) -> ThresholdTable:
    x, labels = labelled_windows(sequences, window, stride, min_overlap)
    return learn_thresholds(model, x, labels, default_threshold)


def evaluate_online(model, thresholds: ThresholdTable, sequences: Sequence[SkeletonSequence],
                    window: int = 20, stride: int = 5, engine: str = "batch", memory: int | None = None,
                    min_duration: int = 5, merge_gap: int | None = None,
                    iou_threshold: float = 0.25):
    """Run the online protocol on every stream and score it.

    Returns ``(MetricsReport, predicted_labels, predicted_events)``.
    """
    merge_gap = stride if merge_gap is None else merge_gap
    eng = make_engine(model, engine, window, memory)
    pred_labels, pred_events = [], []
    for seq in sequences:
        labels = stream_recognize(eng, thresholds, seq, window, stride)
        pred_labels.append(labels)
        pred_events.append(extract_events(labels, min_duration, merge_gap))
    report: MetricsReport = evaluate(pred_events, [list(s.annotations) for s in sequences],
                                     pred_labels, [s.frame_labels() for s in sequences], iou_threshold)
    return report, pred_labels, pred_events


def holdout_split(sequences: Sequence[SkeletonSequence], fraction: float = 0.2):
    """Deterministic (train, validation) split: the last ``ceil(fraction * N)`` streams validate."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError("fraction must lie in [0, 1)")
    n_val = int(np.ceil(fraction * len(sequences))) if fraction else 0
    cut = len(sequences) - n_val
    return list(sequences[:cut]), list(sequences[cut:])
