"""Temporal IoU and Soft-NMS over decoded detections."""

from __future__ import annotations

import math
from dataclasses import replace
from itertools import groupby
from typing import Iterable, Sequence

from .instances import ActionInstance

NMS_METHODS = ("gaussian", "linear", "hard")


def tiou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(start, end)`` intervals.

    Zero-length intervals have no area, so they score 0 even against
    themselves; the instance types reject them anyway.
    """
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def _decay(score: float, overlap: float, method: str, sigma: float, iou_threshold: float) -> float:
    if method == "gaussian":
        return score * math.exp(-(overlap * overlap) / sigma)
    if overlap <= iou_threshold:
        return score
    return score * (1.0 - overlap) if method == "linear" else 0.0


def _soft_nms_group(items: list[tuple[int, ActionInstance]], sigma, score_floor, method, iou_threshold):
    pool = list(items)
    kept = []
    while pool:
        best = max(range(len(pool)), key=lambda i: pool[i][1].score)  # first max wins ties
        idx, top = pool.pop(best)
        kept.append((idx, top))
        survivors = []
        for j, inst in pool:
            s = _decay(inst.score, tiou(top.segment, inst.segment), method, sigma, iou_threshold)
            if s >= score_floor:
                survivors.append((j, replace(inst, score=s)))
        pool = survivors
    return kept


def soft_nms(
    instances: Iterable[ActionInstance],
    sigma: float = 0.5,
    score_floor: float = 0.001,
    method: str = "gaussian",
    iou_threshold: float = 0.5,
    class_agnostic: bool = False,
    max_instances: int | None = None,
) -> list[ActionInstance]:
    """Decay overlapping lower-scored detections instead of dropping them.

    Instances from different videos never interact, and neither do different
    labels unless ``class_agnostic``.  ``iou_threshold`` only matters for the
    ``linear`` and ``hard`` methods.  The result is sorted by final score,
    highest first, with equal scores kept in input order.
    """
    if method not in NMS_METHODS:
        raise ValueError(f"method must be one of {NMS_METHODS}, got {method!r}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    items = list(instances)
    if not items:
        return []

    def group_key(pair):
        return (pair[1].video, 0 if class_agnostic else pair[1].label)

    kept = []
    for _, grp in groupby(sorted(enumerate(items), key=lambda p: (group_key(p), p[0])), key=group_key):
        kept.extend(_soft_nms_group(list(grp), sigma, score_floor, method, iou_threshold))
    kept.sort(key=lambda p: (-p[1].score, p[0]))
    out = [inst for _, inst in kept]
    return out[:max_instances] if max_instances is not None else out


__all__ = ["NMS_METHODS", "soft_nms", "tiou"]
