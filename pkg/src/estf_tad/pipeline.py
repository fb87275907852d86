"""Glue between a validated :class:`ExperimentConfig` and the training loop."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ConfigValidationError, ExperimentConfig
from .detector import Detector, EpochRecord, TrainResult, init_detector, predict, train
from .instances import ActionInstance
from .metrics import AnnotationSet
from .synthdata import generate, read_dataset

Split = tuple[Sequence[np.ndarray], AnnotationSet]


@dataclass
class Datasets:
    train: Split
    val: Split
    fps: float


def _split_fps(annos: AnnotationSet, where: str) -> float | None:
    rates = {v.fps for v in annos.videos}
    if len(rates) > 1:
        raise ConfigValidationError("", f"videos disagree on fps: {sorted(rates)}", where)
    return rates.pop() if rates else None


def load_datasets(cfg: ExperimentConfig, data_dir: str | Path | None = None) -> Datasets:
    """``data_dir/train`` and ``data_dir/val`` as written by ``synth``; without a
    directory both splits are generated from ``cfg.data`` in memory."""
    if data_dir is None:
        tr, va = generate(cfg.data.train), generate(cfg.data.val_spec())
        return Datasets(tr, va, cfg.data.train.fps)
    root = Path(data_dir)
    splits = []
    for name in ("train", "val"):
        d = root / name
        if not (d / "annotations.json").exists():
            raise FileNotFoundError(f"{d / 'annotations.json'}: no dataset split here (run `synth` first)")
        splits.append(read_dataset(d))
    expected = tuple(cfg.backbone.input_shape)
    for (videos, annos), name in zip(splits, ("train", "val")):
        for v, entry in zip(videos, annos.videos):
            if v.shape != expected:
                raise ConfigValidationError(
                    "/backbone/input_shape",
                    f"video {entry.id} has shape {list(v.shape)}, config expects {list(expected)}",
                    str(root / name),
                )
        if len(annos.labels) != cfg.detector.n_classes:
            raise ConfigValidationError(
                "/detector/n_classes",
                f"{cfg.detector.n_classes} but the annotations define {len(annos.labels)} labels",
                str(root / name / "annotations.json"),
            )
    rates = {r for r in (_split_fps(s[1], str(root)) for s in splits) if r is not None}
    if len(rates) > 1:
        raise ConfigValidationError("", f"train and val disagree on fps: {sorted(rates)}", str(root))
    fps = rates.pop() if rates else cfg.data.train.fps
    return Datasets(splits[0], splits[1], fps)


def build_detector(cfg: ExperimentConfig, fps: float | None = None) -> Detector:
    return init_detector(cfg.backbone, cfg.adapter, cfg.detector, cfg.seed, fps or cfg.data.train.fps)


def run_training(
    cfg: ExperimentConfig,
    data: Datasets,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Detector, TrainResult]:
    model = build_detector(cfg, data.fps)
    result = train(
        model,
        data.train[0],
        data.train[1],
        cfg.train,
        val=data.val,
        infer=cfg.inference,
        out_dir=out_dir,
        meta={"seed": cfg.seed, "config": cfg.to_dict()},
        on_epoch=on_epoch,
        seed=cfg.seed,
    )
    return model, result


def validation_predictions(model: Detector, cfg: ExperimentConfig, data: Datasets) -> list[ActionInstance]:
    return predict(model, data.val[0], data.val[1], cfg.inference)


__all__ = ["Datasets", "build_detector", "load_datasets", "run_training", "validation_predictions"]
