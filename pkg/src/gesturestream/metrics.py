"""Event matching and detection / false-positive / Jaccard metrics for online recognition."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .exceptions import InputError
from .skeleton import NO_GESTURE, GestureEvent


def temporal_iou(a: GestureEvent, b: GestureEvent) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start) + 1
    return inter / union


def _check_events(events: Sequence[GestureEvent], what: str) -> list[GestureEvent]:
    events = list(events)
    for prev, cur in zip(events, events[1:]):
        if cur.start <= prev.end:
            raise InputError(f"{what} events overlap or are unsorted: {prev} / {cur}")
    return events


@dataclass
class MatchResult:
    tp: Counter = field(default_factory=Counter)
    fp: Counter = field(default_factory=Counter)
    fn: Counter = field(default_factory=Counter)
    pairs: list = field(default_factory=list)

    def __iadd__(self, other: "MatchResult"):
        self.tp.update(other.tp)
        self.fp.update(other.fp)
        self.fn.update(other.fn)
        self.pairs.extend(other.pairs)
        return self

    @property
    def labels(self) -> list[str]:
        return sorted(set(self.tp) | set(self.fp) | set(self.fn))

    def counts(self, label: str | None = None) -> tuple[int, int, int]:
        if label is None:
            return sum(self.tp.values()), sum(self.fp.values()), sum(self.fn.values())
        return self.tp[label], self.fp[label], self.fn[label]


def match_events(predicted: Sequence[GestureEvent], ground_truth: Sequence[GestureEvent],
                 iou_threshold: float = 0.25) -> MatchResult:
    """Greedy time-ordered matching of predictions to same-class ground truth by temporal IoU.

    Each prediction takes the earliest unmatched ground-truth event of its class
    whose IoU reaches the threshold; leftovers are false positives / negatives.
    """
    predicted = _check_events(predicted, "predicted")
    ground_truth = _check_events(ground_truth, "ground-truth")
    result = MatchResult()
    used = [False] * len(ground_truth)
    for p in predicted:
        for j, g in enumerate(ground_truth):
            if not used[j] and g.label == p.label and temporal_iou(p, g) >= iou_threshold:
                used[j] = True
                result.tp[p.label] += 1
                result.pairs.append((p, g))
                break
        else:
            result.fp[p.label] += 1
    for j, g in enumerate(ground_truth):
        if not used[j]:
            result.fn[g.label] += 1
    return result


def detection_rate(match: MatchResult, label: str | None = None) -> float | None:
    """TP / (TP + FN); ``None`` when there is no ground truth."""
    tp, _, fn = match.counts(label)
    return tp / (tp + fn) if tp + fn else None


def false_positive_rate(match: MatchResult, label: str | None = None) -> float | None:
    """FP / (TP + FN); ``None`` when there is no ground truth."""
    tp, fp, fn = match.counts(label)
    return fp / (tp + fn) if tp + fn else None


def jaccard_pairs(predicted: Sequence[str], ground_truth: Sequence[str]) -> dict[str, float]:
    """Frame-overlap ratio per gesture label present in either labelling of one sequence."""
    if len(predicted) != len(ground_truth):
        raise InputError(f"label sequences differ in length: {len(predicted)} vs {len(ground_truth)}")
    labels = (set(predicted) | set(ground_truth)) - {NO_GESTURE}
    out = {}
    for label in sorted(labels):
        both = sum(1 for p, g in zip(predicted, ground_truth) if p == label and g == label)
        either = sum(1 for p, g in zip(predicted, ground_truth) if p == label or g == label)
        out[label] = both / either
    return out


def _is_single(labels) -> bool:
    return len(labels) == 0 or isinstance(labels[0], str)


def jaccard_index(predicted, ground_truth) -> float | None:
    """Mean Jaccard over all (sequence, label) pairs.

    Accepts one labelling per argument or a list of per-sequence labellings.
    Returns ``None`` if no sequence contains any gesture label.
    """
    if _is_single(predicted) and _is_single(ground_truth):
        predicted, ground_truth = [predicted], [ground_truth]
    if len(predicted) != len(ground_truth):
        raise InputError("different numbers of predicted and ground-truth sequences")
    values = []
    for p, g in zip(predicted, ground_truth):
        values.extend(jaccard_pairs(p, g).values())
    return sum(values) / len(values) if values else None


@dataclass
class MetricsReport:
    detection_rate: float | None
    false_positive_rate: float | None
    jaccard_index: float | None
    per_class: dict
    counts: dict

    def to_dict(self) -> dict:
        return {
            "detection_rate": self.detection_rate,
            "false_positive_rate": self.false_positive_rate,
            "jaccard_index": self.jaccard_index,
            "per_class": self.per_class,
            "counts": self.counts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        fmt = lambda v: "   -  " if v is None else f"{v:6.3f}"
        rows = [f"{'class':<14} {'det':>6} {'fp':>6} {'jac':>6} {'TP':>4} {'FP':>4} {'FN':>4}"]
        for label in sorted(self.per_class):
            c = self.per_class[label]
            rows.append(f"{label:<14} {fmt(c['detection_rate'])} {fmt(c['false_positive_rate'])} "
                        f"{fmt(c['jaccard_index'])} {c['tp']:>4} {c['fp']:>4} {c['fn']:>4}")
        k = self.counts
        rows.append(f"{'overall':<14} {fmt(self.detection_rate)} {fmt(self.false_positive_rate)} "
                    f"{fmt(self.jaccard_index)} {k['tp']:>4} {k['fp']:>4} {k['fn']:>4}")
        return "\n".join(rows)


def evaluate(predicted_events: Sequence[Sequence[GestureEvent]], true_events: Sequence[Sequence[GestureEvent]],
             predicted_labels: Sequence[Sequence[str]], true_labels: Sequence[Sequence[str]],
             iou_threshold: float = 0.25) -> MetricsReport:
    """Pooled (not macro-averaged) metrics over a set of sequences, plus per-class rows."""
    if not (len(predicted_events) == len(true_events) == len(predicted_labels) == len(true_labels)):
        raise InputError("per-sequence inputs differ in count")
    match = MatchResult()
    per_label_j: dict[str, list] = {}
    for pe, te in zip(predicted_events, true_events):
        match += match_events(pe, te, iou_threshold)
    for pl, tl in zip(predicted_labels, true_labels):
        for label, j in jaccard_pairs(pl, tl).items():
            per_label_j.setdefault(label, []).append(j)
    all_j = [j for js in per_label_j.values() for j in js]
    per_class = {}
    for label in sorted(set(match.labels) | set(per_label_j)):
        tp, fp, fn = match.counts(label)
        js = per_label_j.get(label)
        per_class[label] = {
            "detection_rate": detection_rate(match, label),
            "false_positive_rate": false_positive_rate(match, label),
            "jaccard_index": sum(js) / len(js) if js else None,
            "tp": tp, "fp": fp, "fn": fn,
        }
    tp, fp, fn = match.counts()
    return MetricsReport(detection_rate(match), false_positive_rate(match),
                         sum(all_j) / len(all_j) if all_j else None,
                         per_class, {"tp": tp, "fp": fp, "fn": fn})
