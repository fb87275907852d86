"""Action segments as they flow between the detector, NMS and the evaluator."""

from __future__ import annotations

import math
from dataclasses import dataclass


class SegmentError(ValueError):
    pass


def _check_segment(t_start: float, t_end: float) -> None:
    if not (math.isfinite(t_start) and math.isfinite(t_end)):
        raise SegmentError(f"segment bounds must be finite, got ({t_start}, {t_end})")
    if t_start < 0:
        raise SegmentError(f"segment starts before 0: {t_start}")
    if not t_end > t_start:
        raise SegmentError(f"segment must satisfy t_end > t_start, got ({t_start}, {t_end})")


@dataclass(frozen=True)
class GroundTruthInstance:
    t_start: float
    t_end: float
    label: int
    video: str = ""

    def __post_init__(self):
        _check_segment(self.t_start, self.t_end)

    @property
    def segment(self) -> tuple[float, float]:
        return self.t_start, self.t_end


@dataclass(frozen=True)
class ActionInstance:
    t_start: float
    t_end: float
    label: int
    score: float
    video: str = ""

    def __post_init__(self):
        _check_segment(self.t_start, self.t_end)
        if not 0.0 <= self.score <= 1.0:
            raise SegmentError(f"score must lie in [0, 1], got {self.score}")

    @property
    def segment(self) -> tuple[float, float]:
        return self.t_start, self.t_end
