"""Temporal pyramid neck, shared anchor-free head, and the full detector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..estf import (
    Backbone,
    BackboneConfig,
    EstfConfig,
    EstfParams,
    backbone_forward,
    init_backbone,
    init_estf_params,
    patch_embed,
)
from ..numerics import ConfigError, ShapeError, Tensor, no_grad, ops, parameter

POOL_MODES = ("max", "mean")


@dataclass
class DetectorConfig:
    n_classes: int = 4
    n_levels: int = 4
    pool: str = "max"
    head_hidden: int = 32
    head_kernel: int = 3
    prior_prob: float = 0.01
    center_radius: float | None = 1.5
    # [lo, hi) of the largest gt offset, in level-0 steps; None = doubling ranges
    regression_ranges: list[tuple[float, float]] | None = None
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    lambda_reg: float = 1.0

    def validate(self) -> None:
        if self.n_classes < 1:
            raise ConfigError("detector.n_classes must be positive")
        if self.n_levels < 1:
            raise ConfigError("detector.n_levels must be positive")
        if self.pool not in POOL_MODES:
            raise ConfigError(f"detector.pool must be one of {POOL_MODES}, got {self.pool!r}")
        if self.head_kernel < 1 or self.head_kernel % 2 == 0:
            raise ConfigError(f"detector.head_kernel must be odd, got {self.head_kernel}")
        if not 0 < self.prior_prob < 1:
            raise ConfigError("detector.prior_prob must lie in (0, 1)")
        if self.regression_ranges is not None and len(self.regression_ranges) != self.n_levels:
            raise ConfigError(
                f"detector.regression_ranges has {len(self.regression_ranges)} entries for {self.n_levels} levels"
            )

    def ranges(self) -> list[tuple[float, float]]:
        if self.regression_ranges is not None:
            return [(float(lo), float(hi)) for lo, hi in self.regression_ranges]
        out = []
        for i in range(self.n_levels):
            lo = 0.0 if i == 0 else float(2 ** (i + 1))
            hi = float("inf") if i == self.n_levels - 1 else float(2 ** (i + 2))
            out.append((lo, hi))
        return out


# ---------------------------------------------------------------------------
# neck
# ---------------------------------------------------------------------------

@dataclass
class PyramidFeatures:
    levels: list[Tensor]  # each [B, T_i, D]

    @property
    def lengths(self) -> list[int]:
        return [lv.shape[-2] for lv in self.levels]


def spatial_pool(tokens: Tensor, grid: tuple[int, int, int]) -> Tensor:
    """[B, N, D] tokens on ``grid`` -> [B, T', D] by averaging each frame's cells."""
    b, n, d = tokens.shape
    t, h, w = grid
    if n != t * h * w:
        raise ShapeError(f"spatial_pool: {n} tokens do not fit grid {grid}")
    return ops.mean(ops.reshape(tokens, (b, t, h * w, d)), axis=2)


def build_pyramid(x: Tensor, n_levels: int, pool: str = "max") -> PyramidFeatures:
    """Level 0 is ``x`` ([B, T, D] or [T, D]); each next level halves time."""
    t = x.shape[-2]
    if n_levels < 1 or t < 2 ** (n_levels - 1):
        raise ConfigError(f"build_pyramid: {n_levels} levels need T >= {2 ** max(n_levels - 1, 0)}, got T={t}")
    if pool not in POOL_MODES:
        raise ConfigError(f"build_pyramid: pool must be one of {POOL_MODES}")
    down = ops.maxpool1d if pool == "max" else ops.avgpool1d
    levels = [x]
    for _ in range(n_levels - 1):
        levels.append(down(levels[-1], 2))
    return PyramidFeatures(levels)


# ---------------------------------------------------------------------------
# head
# ---------------------------------------------------------------------------

@dataclass
class HeadParams:
    w_shared: Tensor  # [k, D, hidden]
    b_shared: Tensor
    w_cls: Tensor  # [k, hidden, C + 1]; the last class is background
    b_cls: Tensor
    w_reg: Tensor  # [k, hidden, 2]
    b_reg: Tensor

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        names = ("w_shared", "b_shared", "w_cls", "b_cls", "w_reg", "b_reg")
        return {prefix + n: getattr(self, n) for n in names}


def init_head(cfg: DetectorConfig, d_model: int, rng: np.random.Generator) -> HeadParams:
    k, h, c = cfg.head_kernel, cfg.head_hidden, cfg.n_classes
    b_cls = np.zeros(c + 1)
    # start with each foreground class at roughly prior_prob
    b_cls[c] = np.log(c * (1 - cfg.prior_prob) / cfg.prior_prob)
    return HeadParams(
        w_shared=parameter(rng.normal(scale=(k * d_model) ** -0.5, size=(k, d_model, h)), "w_shared"),
        b_shared=parameter(np.zeros(h), "b_shared"),
        w_cls=parameter(rng.normal(scale=0.01, size=(k, h, c + 1)), "w_cls"),
        b_cls=parameter(b_cls, "b_cls"),
        w_reg=parameter(rng.normal(scale=0.01, size=(k, h, 2)), "w_reg"),
        b_reg=parameter(np.zeros(2), "b_reg"),
    )


@dataclass
class LevelOutput:
    logits: Tensor  # [B, T_i, C + 1]
    offsets: Tensor  # [B, T_i, 2], (d_start, d_end) in units of the level stride, > 0


def head_forward(pyr: PyramidFeatures, head: HeadParams) -> list[LevelOutput]:
    out = []
    for lv in pyr.levels:
        squeeze = lv.ndim == 2
        x = ops.reshape(lv, (1,) + lv.shape) if squeeze else lv
        h = ops.relu(ops.conv1d(x, head.w_shared, head.b_shared))
        logits = ops.conv1d(h, head.w_cls, head.b_cls)
        offsets = ops.softplus(ops.conv1d(h, head.w_reg, head.b_reg))
        if squeeze:
            logits = ops.reshape(logits, logits.shape[1:])
            offsets = ops.reshape(offsets, offsets.shape[1:])
        out.append(LevelOutput(logits, offsets))
    return out


def bin_centres(length: int, stride: float) -> np.ndarray:
    """Seconds at the centre of each of ``length`` bins of width ``stride``."""
    return (np.arange(length) + 0.5) * stride


def decode_level(offsets: np.ndarray, stride: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-timestep segments in seconds from [T, 2] offsets at a level of ``stride`` seconds.

    Offsets come out of a softplus, so every segment strictly contains its
    bin centre; the check below guards that contract.
    """
    tau = bin_centres(offsets.shape[0], stride)
    starts = tau - offsets[:, 0] * stride
    ends = tau + offsets[:, 1] * stride
    if not np.all(ends > starts):
        bad = int(np.argmin(ends - starts))
        raise ShapeError(f"decode_level: ill-ordered segment at t={bad}: ({starts[bad]}, {ends[bad]})")
    return starts, ends


def clip_segments(starts: np.ndarray, ends: np.ndarray, duration: float):
    """Clip to ``[0, duration]``; returns (starts, ends, keep) with ``keep`` masking
    segments that still have positive length."""
    s = np.maximum(starts, 0.0)
    e = np.minimum(ends, duration)
    return s, e, e > s


# ---------------------------------------------------------------------------
# full detector
# ---------------------------------------------------------------------------

@dataclass
class Detector:
    backbone: Backbone
    adapters: dict[int, EstfParams]
    head: HeadParams
    config: DetectorConfig
    adapter_config: EstfConfig | None = None
    fps: float = 4.0

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.backbone.config.grid()

    @property
    def step_seconds(self) -> float:
        """Seconds per level-0 step (one temporal patch)."""
        return self.backbone.config.patch[0] / self.fps

    @property
    def first_adapted_block(self) -> int:
        return min(self.adapters) if self.adapters else len(self.backbone.blocks)

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.backbone.named_parameters("backbone."))
        for i in sorted(self.adapters):
            out.update(self.adapters[i].named_parameters(f"adapter{i}."))
        out.update(self.head.named_parameters("head."))
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def stem(self, videos: np.ndarray) -> np.ndarray:
        """Frozen prefix (patch embedding and blocks before the first adapter).

        Nothing in it is trainable, so it is computed once without a tape.
        """
        with no_grad():
            x = patch_embed(Tensor(np.asarray(videos)), self.backbone)
            x = backbone_forward(x, self.backbone, None, 0, self.first_adapted_block)
        return x.data

    def forward_from_stem(self, stem: np.ndarray | Tensor) -> list[LevelOutput]:
        x = stem if isinstance(stem, Tensor) else Tensor(stem)
        x = backbone_forward(x, self.backbone, self.adapters, start=self.first_adapted_block)
        if x.ndim == 2:
            x = ops.reshape(x, (1,) + x.shape)
        pyr = build_pyramid(spatial_pool(x, self.grid), self.config.n_levels, self.config.pool)
        return head_forward(pyr, self.head)

    def forward(self, videos: np.ndarray) -> list[LevelOutput]:
        return self.forward_from_stem(self.stem(videos))

    def level_strides(self) -> list[float]:
        return [self.step_seconds * 2 ** i for i in range(self.config.n_levels)]


def init_detector(
    backbone_cfg: BackboneConfig,
    adapter_cfg: EstfConfig | None,
    det_cfg: DetectorConfig,
    seed: int = 0,
    fps: float = 4.0,
) -> Detector:
    """Backbone, adapters and head draw from separate seeded streams, so a
    variant without adapters shares its backbone and head init with the full
    model."""
    det_cfg.validate()
    backbone = init_backbone(backbone_cfg, np.random.default_rng([seed, 0]))
    adapters = {}
    if adapter_cfg is not None:
        for i in backbone_cfg.blocks_with_adapters():
            adapters[i] = init_estf_params(adapter_cfg, np.random.default_rng([seed, 1, i]))
    head = init_head(det_cfg, backbone_cfg.d_model, np.random.default_rng([seed, 2]))
    t = backbone_cfg.grid()[0]
    if t < 2 ** (det_cfg.n_levels - 1):
        raise ConfigError(f"{det_cfg.n_levels} pyramid levels need T' >= {2 ** (det_cfg.n_levels - 1)}, got {t}")
    return Detector(backbone, adapters, head, det_cfg, adapter_cfg, fps)


__all__ = [
    "Detector",
    "DetectorConfig",
    "HeadParams",
    "LevelOutput",
    "PyramidFeatures",
    "bin_centres",
    "build_pyramid",
    "clip_segments",
    "decode_level",
    "head_forward",
    "init_detector",
    "init_head",
    "spatial_pool",
]
