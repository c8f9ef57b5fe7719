"""Moment-retrieval and highlight-detection metrics.

Moment retrieval: IoU, R1@t and mIoU (percentages).  Highlight detection:
clip-level average precision over a score ranking and Hit@1.

Prediction files are JSON Lines, one query per line::

    {"qid": "q1", "intervals": [[6.0, 12.0]], "clips": [[0.0, 2.0, 0.13], ...]}

``intervals`` is a non-empty list of ``[start, end]`` pairs in seconds (the
first one is the top-1 prediction); ``clips`` is optional and lists
``[start, end, score]`` triples.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import UsageError, ValidationError

HIT_LEVEL = 3
METRIC_NAMES = ("r1_03", "r1_05", "r1_07", "miou", "map", "hit1", "token_efficiency")


class NoPositivesWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Interval:
    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValidationError(f"non-finite interval ({self.start}, {self.end})")
        if self.start < 0 or self.end < self.start:
            raise ValidationError(f"invalid interval ({self.start}, {self.end})")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class ScoredClip:
    interval: Interval
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValidationError(f"non-finite clip score {self.score}")


def _as_interval(x) -> Interval:
    return x if isinstance(x, Interval) else Interval(float(x[0]), float(x[1]))


def iou(a, b) -> float:
    """Temporal IoU; 0 when the union is empty unless both are the same point."""
    a, b = _as_interval(a), _as_interval(b)
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = max(a.end, b.end) - min(a.start, b.start) if inter > 0 else a.length + b.length
    if union <= 0:
        return 1.0 if (a.start, a.end) == (b.start, b.end) else 0.0
    return inter / union


def _pairs(preds, gts):
    if len(preds) != len(gts):
        raise UsageError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise UsageError("no predictions to score")
    return [iou(p, g) for p, g in zip(preds, gts)]


def recall_at_1(preds: Sequence, gts: Sequence, threshold: float) -> float:
    ious = _pairs(preds, gts)
    return 100.0 * sum(v >= threshold for v in ious) / len(ious)


def mean_iou(preds: Sequence, gts: Sequence) -> float:
    ious = _pairs(preds, gts)
    return 100.0 * sum(ious) / len(ious)


def average_precision(scores, labels) -> float:
    """AP of a ranking by descending score (ties keep input order).

    Mean of precision@rank taken at every positive.  A query without positives
    scores 0 and emits :class:`NoPositivesWarning`.
    """
    scores = np.asarray([c.score if isinstance(c, ScoredClip) else c for c in scores], dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise UsageError(f"{scores.size} clips but {labels.size} labels")
    if not labels.any():
        warnings.warn("average precision of a query without positives is 0", NoPositivesWarning, stacklevel=2)
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def mean_average_precision(queries: Sequence) -> float:
    """Mean AP over ``(scores, labels)`` pairs, in [0, 1]."""
    if not queries:
        raise UsageError("no queries to score")
    return float(np.mean([average_precision(s, l) for s, l in queries]))


def hit_at_1(queries: Sequence, hit_level: int = HIT_LEVEL) -> float:
    """Percentage of queries whose top-scored clip has ground-truth level >= ``hit_level``."""
    if not queries:
        raise UsageError("no queries to score")
    hits = 0
    for scores, levels in queries:
        scores = [c.score if isinstance(c, ScoredClip) else c for c in scores]
        if len(scores) == 0:
            raise UsageError("query without clips")
        if len(scores) != len(levels):
            raise UsageError(f"{len(scores)} clips but {len(levels)} saliency levels")
        top = int(np.argmax(np.asarray(scores, dtype=np.float64)))
        hits += levels[top] >= hit_level
    return 100.0 * hits / len(queries)


def token_efficiency(r1_07: float, density: float) -> float:
    """R1@0.7 per unit of effective token density (FPS x rho)."""
    if not density > 0:
        raise ValidationError(f"density must be positive, got {density}")
    return r1_07 / density


# ---------------------------------------------------------------- prediction files

@dataclass
class PredictionRecord:
    qid: str
    intervals: list[Interval]
    clips: list[ScoredClip] = field(default_factory=list)

    def to_json(self) -> str:
        d = {"qid": self.qid, "intervals": [[i.start, i.end] for i in self.intervals]}
        if self.clips:
            d["clips"] = [[c.interval.start, c.interval.end, c.score] for c in self.clips]
        return json.dumps(d)


class PredictionFormatError(ValidationError):
    pass


def write_predictions(records: Sequence[PredictionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def _parse_record(obj) -> PredictionRecord:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    unknown = set(obj) - {"qid", "intervals", "clips"}
    if unknown:
        raise ValueError(f"unknown fields {sorted(unknown)}")
    if "qid" not in obj or not isinstance(obj["qid"], (str, int)) or isinstance(obj["qid"], bool):
        raise ValueError("missing or invalid qid")
    raw = obj.get("intervals")
    if not isinstance(raw, list) or not raw:
        raise ValueError("intervals must be a non-empty list")
    intervals = []
    for item in raw:
        if not isinstance(item, list) or len(item) != 2:
            raise ValueError(f"interval {item!r} is not a [start, end] pair")
        intervals.append(Interval(*(_number(v) for v in item)))
    clips = []
    for item in obj.get("clips", []):
        if not isinstance(item, list) or len(item) != 3:
            raise ValueError(f"clip {item!r} is not a [start, end, score] triple")
        s, e, score = (_number(v) for v in item)
        clips.append(ScoredClip(Interval(s, e), score))
    return PredictionRecord(str(obj["qid"]), intervals, clips)


def _number(v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"{v!r} is not a number")
    return float(v)


def read_predictions(path) -> list[PredictionRecord]:
    """Parse a prediction file; malformed lines raise with their 1-based line number."""
    records = []
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(_parse_record(json.loads(line)))
            except (ValueError, ValidationError) as exc:
                raise PredictionFormatError(f"{path}:{lineno}: {exc}") from None
    return records
