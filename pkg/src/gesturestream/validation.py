"""Input checks shared by the estimator front-end."""
from __future__ import annotations

import numpy as np

from .exceptions import LabelError, ShapeError
from .skeleton import SkeletonSequence


def check_windows(X, num_joints: int | None = None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a float64 array ``(n, gamma, lambda, 3)``; a single window gains a batch axis."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"{name} must have shape (n, gamma, lambda, 3), got {X.shape}")
    if num_joints is not None and X.shape[2] != num_joints:
        raise ShapeError(f"{name} has {X.shape[2]} joints, expected {num_joints}")
    if X.shape[1] < 1:
        raise ShapeError(f"{name} windows are empty")
    if not np.isfinite(X).all():
        raise ShapeError(f"{name} contains NaN or infinite coordinates")
    return X


def check_labels(y, classes, n: int | None = None) -> np.ndarray:
    """Map string (or integer) labels onto indices into ``classes``."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise LabelError(f"labels must be one-dimensional, got shape {y.shape}")
    if n is not None and len(y) != n:
        raise LabelError(f"{len(y)} labels for {n} windows")
    if y.dtype.kind in "iu":
        if len(y) and (y.min() < 0 or y.max() >= len(classes)):
            raise LabelError(f"integer labels must lie in [0, {len(classes)})")
        return y.astype(np.int64)
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[str(v)] for v in y], dtype=np.int64)
    except KeyError as exc:
        raise LabelError(f"unknown label {exc.args[0]!r}") from None


def check_stream(stream, num_joints: int | None = None) -> np.ndarray:
    """Frames ``(T, lambda, 3)`` of a stream given as a SkeletonSequence or array."""
    frames = stream.frames if isinstance(stream, SkeletonSequence) else np.asarray(stream, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[-1] != 3:
        raise ShapeError(f"stream must have shape (T, lambda, 3), got {frames.shape}")
    if num_joints is not None and frames.shape[1] != num_joints:
        raise ShapeError(f"stream has {frames.shape[1]} joints, expected {num_joints}")
    return frames
