"""Average precision over temporal IoU thresholds, plus annotation and
prediction file handling.

Matching is greedy in score order: each prediction claims the unmatched
ground truth of the same video and class with the highest tIoU at or above
the threshold.  Predictions are ordered by score (descending), then by
earlier start, then by input position.  The precision/recall curve is
integrated with all-point interpolation, i.e. the area under its upper
envelope.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import jsonschema

from .instances import ActionInstance, GroundTruthInstance
from .postproc import tiou

DEFAULT_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


class EvaluationError(ValueError):
    """Bad input to the evaluator: unknown ids, labels or malformed files."""


# ---------------------------------------------------------------------------
# annotation containers
# ---------------------------------------------------------------------------

@dataclass
class VideoAnnotation:
    id: str
    duration: float
    fps: float
    instances: list[GroundTruthInstance] = field(default_factory=list)


@dataclass
class AnnotationSet:
    labels: list[str]
    videos: list[VideoAnnotation]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen = set()
        for i, v in enumerate(self.videos):
            where = f"/videos/{i}"
            if v.id in seen:
                raise EvaluationError(f"{where}/id: duplicate video id {v.id!r}")
            seen.add(v.id)
            if not v.duration > 0 or not v.fps > 0:
                raise EvaluationError(f"{where}: duration and fps must be positive")
            for j, g in enumerate(v.instances):
                if g.t_end > v.duration:
                    raise EvaluationError(
                        f"{where}/annotations/{j}/end: {g.t_end} exceeds video duration {v.duration}"
                    )
                if not 0 <= g.label < len(self.labels):
                    raise EvaluationError(f"{where}/annotations/{j}/label: class id {g.label} not in vocabulary")
                if g.video != v.id:
                    raise EvaluationError(f"{where}/annotations/{j}: instance tagged with video {g.video!r}")

    def by_id(self) -> dict[str, VideoAnnotation]:
        return {v.id: v for v in self.videos}

    def ground_truth(self) -> list[GroundTruthInstance]:
        return [g for v in self.videos for g in v.instances]


@dataclass
class MetricReport:
    thresholds: list[float]
    labels: list[str]
    ap: list[list[float | None]]  # [class][threshold]; None when the class has no gt and no predictions
    map_per_threshold: list[float]
    average_map: float

    def to_dict(self) -> dict:
        return {
            "thresholds": self.thresholds,
            "labels": self.labels,
            "ap": self.ap,
            "map_per_threshold": self.map_per_threshold,
            "average_map": self.average_map,
        }

    def format_table(self) -> str:
        name_w = max(8, *(len(n) for n in self.labels))
        head = f"{'class':<{name_w}}" + "".join(f"{t:>8.2f}" for t in self.thresholds) + f"{'Avg.':>8}"
        lines = [head, "-" * len(head)]
        for name, row in zip(self.labels, self.ap):
            vals = [v for v in row if v is not None]
            avg = sum(vals) / len(vals) if vals else None
            cells = "".join(f"{'-':>8}" if v is None else f"{100 * v:>8.2f}" for v in row + [avg])
            lines.append(f"{name:<{name_w}}" + cells)
        lines.append("-" * len(head))
        lines.append(
            f"{'mAP':<{name_w}}"
            + "".join(f"{100 * v:>8.2f}" for v in self.map_per_threshold)
            + f"{100 * self.average_map:>8.2f}"
        )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# AP
# ---------------------------------------------------------------------------

def _ranked(preds: Sequence[ActionInstance]) -> list[ActionInstance]:
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].t_start, i))
    return [preds[i] for i in order]


def match_predictions(
    preds: Sequence[ActionInstance], gts: Sequence[GroundTruthInstance], threshold: float
) -> list[bool]:
    """True-positive flags for ``preds`` in ranked order."""
    by_video: dict[str, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_video[g.video].append(j)
    taken = [False] * len(gts)
    flags = []
    for p in _ranked(preds):
        best, best_iou = None, threshold
        for j in by_video.get(p.video, ()):
            if taken[j]:
                continue
            ov = tiou(p.segment, gts[j].segment)
            if ov >= best_iou and (best is None or ov > best_iou):
                best, best_iou = j, ov
        if best is not None:
            taken[best] = True
        flags.append(best is not None)
    return flags


def average_precision(
    preds: Sequence[ActionInstance], gts: Sequence[GroundTruthInstance], threshold: float
) -> float | None:
    """All-point interpolated AP for a single class.

    Returns None when there is nothing to score (no ground truth and no
    predictions) and 0.0 when predictions exist without any ground truth.
    """
    if not gts:
        return None if not preds else 0.0
    flags = match_predictions(preds, gts, threshold)
    precision = []
    tp = 0
    for k, hit in enumerate(flags, start=1):
        tp += hit
        precision.append(tp / k)
    # upper envelope, evaluated only where recall steps up
    envelope = 0.0
    area = []
    for prec, hit in zip(reversed(precision), reversed(flags)):
        envelope = max(envelope, prec)
        if hit:
            area.append(envelope)
    return math.fsum(area) / len(gts)


def evaluate(
    preds: Mapping[str, Iterable[ActionInstance]] | Iterable[ActionInstance],
    annos: AnnotationSet,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> MetricReport:
    """Per-class AP at every threshold, averaged into mAP and then over thresholds.

    Classes whose AP is undefined at a threshold are left out of that
    threshold's mean; if no class is defined the mean is 0.
    """
    if isinstance(preds, Mapping):
        flat = []
        for vid, items in preds.items():
            for p in items:
                flat.append(p if p.video == vid else ActionInstance(p.t_start, p.t_end, p.label, p.score, vid))
    else:
        flat = list(preds)
    known = annos.by_id()
    n_classes = len(annos.labels)
    for i, p in enumerate(flat):
        if p.video not in known:
            raise EvaluationError(f"prediction {i} references unknown video {p.video!r}")
        if not 0 <= p.label < n_classes:
            raise EvaluationError(f"prediction {i} in video {p.video!r} has unknown label {p.label}")
    pred_by_class = defaultdict(list)
    for p in flat:
        pred_by_class[p.label].append(p)
    gt_by_class = defaultdict(list)
    for g in annos.ground_truth():
        gt_by_class[g.label].append(g)

    ths = [float(t) for t in thresholds]
    table = [
        [average_precision(pred_by_class[c], gt_by_class[c], t) for t in ths]
        for c in range(n_classes)
    ]
    maps = []
    for k in range(len(ths)):
        col = [row[k] for row in table if row[k] is not None]
        maps.append(sum(col) / len(col) if col else 0.0)
    return MetricReport(ths, list(annos.labels), table, maps, sum(maps) / len(maps) if maps else 0.0)


# ---------------------------------------------------------------------------
# JSON files
# ---------------------------------------------------------------------------

ANNOTATION_SCHEMA = {
    "type": "object",
    "required": ["version", "labels", "videos"],
    "properties": {
        "version": {"const": 1},
        "labels": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
        "videos": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "duration", "fps", "annotations"],
                "properties": {
                    "id": {"type": "string"},
                    "duration": {"type": "number", "exclusiveMinimum": 0},
                    "fps": {"type": "number", "exclusiveMinimum": 0},
                    "annotations": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["start", "end", "label"],
                            "properties": {
                                "start": {"type": "number", "minimum": 0},
                                "end": {"type": "number"},
                                "label": {"type": "string"},
                            },
                        },
                    },
                },
            },
        },
    },
}

PREDICTION_SCHEMA = {
    "type": "object",
    "required": ["results"],
    "properties": {
        "results": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["start", "end", "label", "score"],
                    "properties": {
                        "start": {"type": "number", "minimum": 0},
                        "end": {"type": "number"},
                        "label": {"type": "string"},
                        "score": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                },
            },
        }
    },
}


def json_pointer(parts: Iterable) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in parts)


def validate_schema(doc, schema, source: str = "<document>") -> None:
    """Raise :class:`EvaluationError` naming the first violation's JSON pointer."""
    errors = sorted(
        jsonschema.Draft202012Validator(schema).iter_errors(doc),
        key=lambda e: [str(p) for p in e.absolute_path],
    )
    if errors:
        err = errors[0]
        raise EvaluationError(f"{source}: {json_pointer(err.absolute_path) if err.absolute_path else '/'}: {err.message}")


def _read_json(path) -> object:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise EvaluationError(f"{path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise EvaluationError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def annotations_from_dict(doc: dict, source: str = "<annotations>") -> AnnotationSet:
    validate_schema(doc, ANNOTATION_SCHEMA, source)
    labels = doc["labels"]
    index = {name: i for i, name in enumerate(labels)}
    videos = []
    seen = set()
    for i, v in enumerate(doc["videos"]):
        if v["id"] in seen:
            raise EvaluationError(f"{source}: /videos/{i}/id: duplicate video id {v['id']!r}")
        seen.add(v["id"])
        insts = []
        for j, a in enumerate(v["annotations"]):
            where = f"{source}: /videos/{i}/annotations/{j}"
            if a["label"] not in index:
                raise EvaluationError(f"{where}/label: {a['label']!r} is not in the label vocabulary")
            if not a["end"] > a["start"]:
                raise EvaluationError(f"{where}/end: end {a['end']} must exceed start {a['start']}")
            if a["end"] > v["duration"]:
                raise EvaluationError(f"{where}/end: {a['end']} exceeds video duration {v['duration']}")
            insts.append(GroundTruthInstance(float(a["start"]), float(a["end"]), index[a["label"]], v["id"]))
        videos.append(VideoAnnotation(v["id"], float(v["duration"]), float(v["fps"]), insts))
    return AnnotationSet(list(labels), videos)


def annotations_to_dict(annos: AnnotationSet) -> dict:
    return {
        "version": 1,
        "labels": list(annos.labels),
        "videos": [
            {
                "id": v.id,
                "duration": v.duration,
                "fps": v.fps,
                "annotations": [
                    {"start": g.t_start, "end": g.t_end, "label": annos.labels[g.label]} for g in v.instances
                ],
            }
            for v in annos.videos
        ],
    }


def load_annotations(path) -> AnnotationSet:
    return annotations_from_dict(_read_json(path), str(path))


def save_annotations(path, annos: AnnotationSet) -> None:
    Path(path).write_text(json.dumps(annotations_to_dict(annos), indent=1) + "\n")


def predictions_from_dict(doc: dict, labels: Sequence[str], source: str = "<predictions>") -> list[ActionInstance]:
    validate_schema(doc, PREDICTION_SCHEMA, source)
    index = {name: i for i, name in enumerate(labels)}
    out = []
    for vid, items in doc["results"].items():
        for j, r in enumerate(items):
            where = f"{source}: {json_pointer(['results', vid, j])}"
            if r["label"] not in index:
                raise EvaluationError(f"{where}/label: unknown label {r['label']!r}")
            if not r["end"] > r["start"]:
                raise EvaluationError(f"{where}/end: end {r['end']} must exceed start {r['start']}")
            out.append(ActionInstance(float(r["start"]), float(r["end"]), index[r["label"]], float(r["score"]), vid))
    return out


def predictions_to_dict(preds: Iterable[ActionInstance], labels: Sequence[str], videos: Iterable[str] = ()) -> dict:
    results: dict[str, list] = {v: [] for v in videos}
    for p in preds:
        results.setdefault(p.video, []).append(
            {"start": p.t_start, "end": p.t_end, "label": labels[p.label], "score": p.score}
        )
    return {"results": results}


def load_predictions(path, labels: Sequence[str]) -> list[ActionInstance]:
    return predictions_from_dict(_read_json(path), labels, str(path))


def save_predictions(path, preds: Iterable[ActionInstance], labels: Sequence[str], videos: Iterable[str] = ()) -> None:
    Path(path).write_text(json.dumps(predictions_to_dict(preds, labels, videos), indent=1) + "\n")


__all__ = [
    "ANNOTATION_SCHEMA",
    "AnnotationSet",
    "DEFAULT_THRESHOLDS",
    "EvaluationError",
    "MetricReport",
    "PREDICTION_SCHEMA",
    "VideoAnnotation",
    "annotations_from_dict",
    "annotations_to_dict",
    "average_precision",
    "evaluate",
    "json_pointer",
    "load_annotations",
    "load_predictions",
    "match_predictions",
    "predictions_from_dict",
    "predictions_to_dict",
    "save_annotations",
    "save_predictions",
    "validate_schema",
]
