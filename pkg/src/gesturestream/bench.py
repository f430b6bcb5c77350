"""Per-step cost of continual inference versus recomputing the full window."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .continual import ContinualEncoder
from .encoder import encode
from .model import GestureModel, ModelConfig
from .tensor import Tensor


@dataclass
class BenchResult:
    window: int
    continual_score_flops: int
    batch_score_flops: int
    continual_total_flops: int
    batch_total_flops: int
    continual_seconds: float
    batch_seconds: float

    @property
    def flop_ratio(self) -> float:
        """Batch attention-score multiply-adds per continual step."""
        return self.batch_score_flops / self.continual_score_flops

    @property
    def speedup(self) -> float:
        return self.batch_seconds / self.continual_seconds

    def to_dict(self) -> dict:
        return {**asdict(self), "flop_ratio": self.flop_ratio, "speedup": self.speedup}


def bench_model(num_layers: int = 6, d_model: int = 128, heads: int = 8, num_joints: int = 20,
                seed: int = 0) -> GestureModel:
    cfg = ModelConfig(classes=("A", "B", "NoGesture"), num_joints=num_joints,
                      sgcn_channels=(64, d_model), d_model=d_model, num_layers=num_layers,
                      heads=heads, d_ff=2 * d_model)
    return GestureModel.create(cfg, seed=seed)


def _batch_step(model: GestureModel, features: np.ndarray, positions: np.ndarray) -> np.ndarray:
    cfg = model.config
    with T.no_grad():
        return encode(Tensor(features), model.params, cfg.num_layers, cfg.heads, positions).data


def measure(model: GestureModel, window: int, steps: int = 20, seed: int = 0) -> BenchResult:
    """Encoder cost per new frame with memory / window ``window``.

    The continual path runs one cached step; the batch path re-encodes the
    trailing ``window`` frames. Both consume precomputed spatial features, so
    only the encoder is measured.
    """
    rng = np.random.default_rng(seed)
    cfg = model.config
    feats = rng.normal(size=(window + steps, cfg.num_joints, cfg.d_model))
    enc = ContinualEncoder(model, window)
    for t in range(window):
        enc.step_features(feats[t])
    positions = np.arange(window) % window

    with T.counting() as c:
        enc.step_features(feats[window])
    cont_scores, cont_total = c["attention_scores"], c.total
    with T.counting() as c:
        _batch_step(model, feats[1:window + 1], positions)
    batch_scores, batch_total = c["attention_scores"], c.total

    start = time.perf_counter()
    for t in range(steps):
        enc.step_features(feats[window + t])
    cont_time = (time.perf_counter() - start) / steps
    start = time.perf_counter()
    for t in range(steps):
        _batch_step(model, feats[t + 1:t + 1 + window], positions)
    batch_time = (time.perf_counter() - start) / steps
    return BenchResult(window, cont_scores, batch_scores, cont_total, batch_total, cont_time, batch_time)


def run_bench(windows=(16, 64, 128), steps: int = 20, seed: int = 0, model: GestureModel | None = None):
    model = model or bench_model(seed=seed)
    return [measure(model, w, steps, seed) for w in windows]


def format_table(results) -> str:
    rows = [f"{'n':>5} {'score MACs cont':>15} {'score MACs batch':>16} {'ratio':>8} "
            f"{'ms cont':>8} {'ms batch':>9} {'speedup':>8}"]
    for r in results:
        rows.append(f"{r.window:>5} {r.continual_score_flops:>15} {r.batch_score_flops:>16} "
                    f"{r.flop_ratio:>8.2f} {1e3 * r.continual_seconds:>8.3f} "
                    f"{1e3 * r.batch_seconds:>9.3f} {r.speedup:>8.2f}")
    return "\n".join(rows)
