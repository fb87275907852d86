"""Per-timestep training targets for the anchor-free head.

A timestep at level ``i`` with bin centre ``tau`` is a candidate for a
ground-truth segment ``[s, e]`` when

* ``s < tau < e`` (strictly, so both regression targets are positive),
* with centre sampling, ``tau`` is within ``radius * stride_i`` of the
  segment's midpoint, and
* the larger of ``tau - s`` and ``e - tau``, measured in level-0 steps,
  falls in the level's regression range ``[lo, hi)``.

Among candidates the shortest segment wins; equal lengths go to the first
in input order.  Timesteps with no candidate are background.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import bin_centres


@dataclass(frozen=True)
class LevelGeometry:
    length: int
    stride: float  # seconds per step
    lo: float  # regression range in level-0 steps
    hi: float


def pyramid_geometry(
    t_tokens: int, step_seconds: float, ranges: Sequence[tuple[float, float]]
) -> list[LevelGeometry]:
    out = []
    length = t_tokens
    for i, (lo, hi) in enumerate(ranges):
        out.append(LevelGeometry(length, step_seconds * 2 ** i, lo, hi))
        length = -(-length // 2)
    return out


@dataclass
class Targets:
    labels: np.ndarray  # [M] int, background = n_classes
    offsets: np.ndarray  # [M, 2] (d_start, d_end) in units of the level stride; 0 on background
    gt_index: np.ndarray  # [M] int, -1 on background

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def assign_targets(
    gts: Sequence[tuple[float, float, int]],
    geometry: Sequence[LevelGeometry],
    n_classes: int,
    center_radius: float | None = 1.5,
) -> Targets:
    """Targets for one video, levels concatenated in order.

    ``gts`` holds ``(start_seconds, end_seconds, label)`` triples.
    """
    unit = geometry[0].stride
    total = sum(g.length for g in geometry)
    labels = np.full(total, n_classes, dtype=np.int64)
    offsets = np.zeros((total, 2))
    gt_index = np.full(total, -1, dtype=np.int64)
    if not gts:
        return Targets(labels, offsets, gt_index)
    arr = np.asarray([(s, e) for s, e, _ in gts], dtype=float)
    starts, ends = arr[:, 0], arr[:, 1]
    lengths = ends - starts
    mids = 0.5 * (starts + ends)
    gt_labels = np.asarray([c for _, _, c in gts], dtype=np.int64)
    # shortest first, stable on input order
    rank = np.argsort(lengths, kind="stable")

    base = 0
    for geo in geometry:
        tau = bin_centres(geo.length, geo.stride)[:, None]  # [T, 1]
        left = tau - starts[None, :]
        right = ends[None, :] - tau
        reach = np.maximum(left, right) / unit
        ok = (left > 0) & (right > 0) & (reach >= geo.lo) & (reach < geo.hi)
        if center_radius is not None:
            ok &= np.abs(tau - mids[None, :]) <= center_radius * geo.stride
        ok_ranked = ok[:, rank]
        has = ok_ranked.any(axis=1)
        pick = rank[np.argmax(ok_ranked, axis=1)]
        rows = np.nonzero(has)[0]
        j = pick[rows]
        labels[base + rows] = gt_labels[j]
        gt_index[base + rows] = j
        offsets[base + rows, 0] = left[rows, j] / geo.stride
        offsets[base + rows, 1] = right[rows, j] / geo.stride
        base += geo.length
    return Targets(labels, offsets, gt_index)


def stack_targets(items: Sequence[Targets]) -> Targets:
    return Targets(
        np.concatenate([t.labels for t in items]),
        np.concatenate([t.offsets for t in items]),
        np.concatenate([t.gt_index for t in items]),
    )


__all__ = ["LevelGeometry", "Targets", "assign_targets", "pyramid_geometry", "stack_targets"]
