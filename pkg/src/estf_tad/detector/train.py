"""Optimisation, inference and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..instances import ActionInstance
from ..metrics import AnnotationSet, evaluate
from ..numerics import NumericError, Tensor, no_grad, ops, save_checkpoint
from ..postproc import soft_nms
from .loss import detection_loss
from .model import Detector, clip_segments, decode_level
from .targets import Targets, assign_targets, pyramid_geometry, stack_targets

log = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    warmup_epochs: int = 5
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    eval_every: int = 1


@dataclass
class InferenceConfig:
    pre_nms_threshold: float = 0.001
    pre_nms_topk: int = 100
    nms_method: str = "gaussian"
    nms_sigma: float = 0.5
    nms_threshold: float = 0.5
    score_floor: float = 0.001
    max_instances: int = 100


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def lr_at(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear ramp from 0 to ``peak`` over the warm-up, then cosine down to 0
    at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


def decays(name: str, t: Tensor) -> bool:
    """Weight decay applies to matrices and kernels, not to biases, norms or A."""
    return t.ndim >= 2 and "a_log" not in name


class AdamW:
    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay and decays(k, p):
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    sq = math.fsum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

@dataclass
class PreparedSplit:
    ids: list[str]
    stems: np.ndarray  # [V, N, D] frozen-prefix activations
    durations: list[float]
    targets: list[Targets]


def prepare_split(model: Detector, videos: Sequence[np.ndarray], annos: AnnotationSet, chunk: int = 16) -> PreparedSplit:
    geometry = pyramid_geometry(model.grid[0], model.step_seconds, model.config.ranges())
    stems = []
    for i in range(0, len(videos), chunk):
        stems.append(model.stem(np.stack(videos[i:i + chunk])))
    targets = [
        assign_targets(
            [(g.t_start, g.t_end, g.label) for g in v.instances],
            geometry,
            model.config.n_classes,
            model.config.center_radius,
        )
        for v in annos.videos
    ]
    return PreparedSplit(
        [v.id for v in annos.videos],
        np.concatenate(stems) if stems else np.zeros((0,)),
        [v.duration for v in annos.videos],
        targets,
    )


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def detections_for_video(
    model: Detector, outputs, b: int, video: str, duration: float, cfg: InferenceConfig
) -> list[ActionInstance]:
    c = model.config.n_classes
    cand = []
    for level, out, stride in zip(range(len(outputs)), outputs, model.level_strides()):
        logits = out.logits.data[b]
        z = logits - logits.max(axis=-1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        starts, ends = decode_level(out.offsets.data[b], stride)
        starts, ends, keep = clip_segments(starts, ends, duration)
        fg = probs[:, :c]
        t_idx, cls_idx = np.nonzero((fg > cfg.pre_nms_threshold) & keep[:, None])
        for t, k in zip(t_idx, cls_idx):
            cand.append((float(fg[t, k]), level, int(t), int(k), float(starts[t]), float(ends[t])))
    cand.sort(key=lambda r: (-r[0], r[1], r[2], r[3]))
    cand = cand[: cfg.pre_nms_topk]
    insts = [ActionInstance(s, e, k, min(score, 1.0), video) for score, _, _, k, s, e in cand]
    return soft_nms(
        insts,
        sigma=cfg.nms_sigma,
        score_floor=cfg.score_floor,
        method=cfg.nms_method,
        iou_threshold=cfg.nms_threshold,
        max_instances=cfg.max_instances,
    )


def predict_prepared(model: Detector, split: PreparedSplit, cfg: InferenceConfig, chunk: int = 16) -> list[ActionInstance]:
    preds = []
    with no_grad():
        for i in range(0, len(split.ids), chunk):
            outputs = model.forward_from_stem(split.stems[i:i + chunk])
            for b in range(outputs[0].logits.shape[0]):
                j = i + b
                preds.extend(detections_for_video(model, outputs, b, split.ids[j], split.durations[j], cfg))
    return preds


def predict(model: Detector, videos: Sequence[np.ndarray], annos: AnnotationSet, cfg: InferenceConfig | None = None):
    return predict_prepared(model, prepare_split(model, videos, annos), cfg or InferenceConfig())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss_cls: float
    loss_reg: float
    mAP: float | None
    map_at_05: float | None = None


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    checkpoint: Path | None = None

    @property
    def final_map(self) -> float | None:
        evaluated = [r for r in self.history if r.mAP is not None]
        return evaluated[-1].mAP if evaluated else None


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _save(model: Detector, directory: Path, meta: dict) -> Path:
    named = model.named_parameters()
    save_checkpoint(directory, named, meta)
    return directory


def train(
    model: Detector,
    train_videos: Sequence[np.ndarray],
    train_annos: AnnotationSet,
    cfg: TrainConfig,
    val: tuple[Sequence[np.ndarray], AnnotationSet] | None = None,
    infer: InferenceConfig | None = None,
    out_dir: Path | None = None,
    meta: dict | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    seed: int = 0,
) -> TrainResult:
    """Fit adapters and head; the backbone is never touched.

    Runs are deterministic given ``seed`` (batch order) and the model's own init.  On a
    non-finite loss or update the parameters from before the offending step
    are written to ``out_dir/last_good`` and :class:`TrainingDiverged` is
    raised.
    """
    infer = infer or InferenceConfig()
    out_dir = Path(out_dir) if out_dir is not None else None
    meta = dict(meta or {})
    params = model.trainable_parameters()
    opt = AdamW(params, cfg.betas, cfg.eps, cfg.weight_decay)
    prepared = prepare_split(model, train_videos, train_annos)
    val_prepared = prepare_split(model, val[0], val[1]) if val is not None else None
    n = len(prepared.ids)
    steps_per_epoch = max(-(-n // cfg.batch_size), 1)
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    rng = np.random.default_rng([seed, 3])
    result = TrainResult()
    writer = None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["epoch", "loss_cls", "loss_reg", "mAP"])
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            cls_sum = reg_sum = 0.0
            batches = 0
            for i in range(0, n, cfg.batch_size):
                idx = np.sort(order[i:i + cfg.batch_size])
                before = _snapshot(params)
                try:
                    outputs = model.forward_from_stem(prepared.stems[idx])
                    tg = stack_targets([prepared.targets[j] for j in idx])
                    loss = detection_loss(
                        outputs, tg, model.config.focal_gamma, model.config.focal_alpha, model.config.lambda_reg
                    )
                    loss.total.backward()
                    if cfg.grad_clip is not None:
                        clip_grad_norm(params, cfg.grad_clip)
                    step += 1
                    opt.step(lr_at(step, total, warmup, cfg.lr))
                    opt.zero_grad()
                    for k, p in params.items():
                        if not np.all(np.isfinite(p.data)):
                            raise NumericError(f"non-finite values in {k} after update")
                except NumericError as exc:
                    for k, p in params.items():
                        p.data = before[k]
                        p.grad = None
                    ckpt = None
                    if out_dir is not None:
                        ckpt = _save(model, out_dir / "last_good", {**meta, "epoch": epoch, "step": step, "diverged": True})
                    raise TrainingDiverged(f"training diverged at epoch {epoch}, step {step}: {exc}", ckpt) from exc
                cls_sum += loss.cls
                reg_sum += loss.reg
                batches += 1
            rec = EpochRecord(epoch, cls_sum / batches, reg_sum / batches, None)
            if val_prepared is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                preds = predict_prepared(model, val_prepared, infer)
                report = evaluate(preds, val[1])
                rec.mAP = report.average_map
                rec.map_at_05 = _map_at(report, 0.5)
            result.history.append(rec)
            if writer is not None:
                writer.writerow([rec.epoch, repr(rec.loss_cls), repr(rec.loss_reg), "" if rec.mAP is None else repr(rec.mAP)])
                log_file.flush()
            log.info("epoch %d cls %.4f reg %.4f mAP %s", epoch, rec.loss_cls, rec.loss_reg, rec.mAP)
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        result.checkpoint = _save(model, out_dir / "checkpoint", {**meta, "epoch": cfg.epochs, "step": step})
    return result


def _map_at(report, threshold: float) -> float | None:
    for t, m in zip(report.thresholds, report.map_per_threshold):
        if abs(t - threshold) < 1e-12:
            return m
    return None


__all__ = [
    "AdamW",
    "EpochRecord",
    "InferenceConfig",
    "PreparedSplit",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "clip_grad_norm",
    "decays",
    "detections_for_video",
    "lr_at",
    "predict",
    "predict_prepared",
    "prepare_split",
    "train",
]
