"""Softmax focal classification loss plus 1-D distance-IoU regression loss.

Both terms are sums normalised by ``max(num_positive, 1)``.  With no positive
timestep in the batch the regression term is the constant 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..numerics import Tensor, ops
from .model import LevelOutput
from .targets import Targets


def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Summed softmax focal loss over rows of ``logits`` [M, C+1].

    The last column is background.  Foreground rows are weighted by
    ``alpha`` and background rows by ``1 - alpha``.
    """
    m, k = logits.shape
    logp = ops.log_softmax(logits, axis=-1)
    logp_t = ops.getitem(logp, (np.arange(m), labels))
    p_t = ops.exp(logp_t)
    modulator = ops.power(ops.sub(1.0, p_t), gamma)
    weight = np.where(labels == k - 1, 1.0 - alpha, alpha)
    return ops.mul(ops.sum(ops.mul(ops.mul(modulator, logp_t), Tensor(weight))), -1.0)


def diou_loss_1d(pred: Tensor, target: np.ndarray) -> Tensor:
    """Summed ``1 - IoU + rho^2 / c^2`` for segments sharing an anchor point.

    ``pred`` and ``target`` are [P, 2] distances (left, right) from the same
    bin centre, both positive, so the segments always intersect.
    """
    tgt = Tensor(np.asarray(target, dtype=pred.data.dtype))
    ps, pe = ops.getitem(pred, (slice(None), 0)), ops.getitem(pred, (slice(None), 1))
    ts, te = ops.getitem(tgt, (slice(None), 0)), ops.getitem(tgt, (slice(None), 1))
    inter = ops.minimum(ps, ts) + ops.minimum(pe, te)
    union = ps + pe + ts + te - inter
    enclose = ops.maximum(ps, ts) + ops.maximum(pe, te)
    rho = ops.mul((pe - ps) - (te - ts), 0.5)
    iou = ops.div(inter, union)
    penalty = ops.div(ops.square(rho), ops.square(enclose))
    return ops.sum(ops.sub(1.0, iou) + penalty)


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    reg: float
    num_positive: int


def flatten_outputs(outputs: Sequence[LevelOutput]) -> tuple[Tensor, Tensor]:
    """Concatenate levels along time, then fold batch into rows: ([B*M, C+1], [B*M, 2])."""
    logits = ops.concat([o.logits for o in outputs], axis=-2)
    offsets = ops.concat([o.offsets for o in outputs], axis=-2)
    if logits.ndim == 2:
        return logits, offsets
    b, m, k = logits.shape
    return ops.reshape(logits, (b * m, k)), ops.reshape(offsets, (b * m, 2))


def detection_loss(
    outputs: Sequence[LevelOutput],
    targets: Targets,
    gamma: float = 2.0,
    alpha: float = 0.25,
    lambda_reg: float = 1.0,
) -> LossBreakdown:
    """``targets`` is the batch's per-video targets stacked in batch order."""
    logits, offsets = flatten_outputs(outputs)
    if logits.shape[0] != targets.labels.shape[0]:
        raise ValueError(f"{logits.shape[0]} predictions vs {targets.labels.shape[0]} targets")
    npos = targets.num_positive
    norm = 1.0 / max(npos, 1)
    cls = ops.mul(focal_loss(logits, targets.labels, gamma, alpha), norm)
    if npos:
        idx = np.nonzero(targets.positive)[0]
        reg = ops.mul(diou_loss_1d(ops.getitem(offsets, idx), targets.offsets[idx]), norm * lambda_reg)
        total = cls + reg
        reg_value = float(reg.data)
    else:
        total = cls
        reg_value = 0.0
    return LossBreakdown(total, float(cls.data), reg_value, npos)


__all__ = ["LossBreakdown", "detection_loss", "diou_loss_1d", "flatten_outputs", "focal_loss"]
