"""ESTF adapter, toy frozen backbone and adapter insertion.

Shapes follow the post-patch token grid ``(T', H', W')``: tokens are laid out
row-major over that grid, so ``N = T' * H' * W'``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigError, ShapeError, Tensor, ops, parameter
from .ssm import (
    AttentionParams,
    SsmConfig,
    SsmParams,
    attention_baseline,
    init_attention_params,
    init_ssm_params,
    tb_ssm_forward,
)

TEMPORAL_MODULES = ("tbssm", "attention", "none")
FUSION_MODES = ("canonical", "literal", "none")


@dataclass
class EstfConfig:
    d_model: int = 32
    rank: int = 8
    pool_factor: tuple[int, int] = (2, 2)
    k_spatial: int = 3
    k_temporal: int = 3
    spatial: bool = True
    temporal: str = "tbssm"
    fusion: str = "canonical"
    pointwise: bool = False
    ssm: SsmConfig = field(default_factory=SsmConfig)

    def validate(self) -> None:
        if not 0 < self.rank < self.d_model:
            raise ConfigError(f"adapter.rank must satisfy 0 < rank < d_model, got {self.rank} vs {self.d_model}")
        if self.temporal not in TEMPORAL_MODULES:
            raise ConfigError(f"adapter.temporal must be one of {TEMPORAL_MODULES}, got {self.temporal!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"adapter.fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        for k, name in ((self.k_spatial, "k_spatial"), (self.k_temporal, "k_temporal")):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"adapter.{name} must be odd, got {k}")
        if self.ssm.d_model != self.rank:
            raise ConfigError(f"adapter.ssm.d_model ({self.ssm.d_model}) must equal adapter.rank ({self.rank})")


@dataclass
class EstfParams:
    w_down: Tensor
    w_up: Tensor
    k_spatial1: Tensor | None
    k_spatial2: Tensor | None
    k_temporal: Tensor | None
    temporal: SsmParams | AttentionParams | None
    pw1: Tensor | None = None
    pw2: Tensor | None = None
    config: EstfConfig = field(default_factory=EstfConfig)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for n in ("w_down", "w_up", "k_spatial1", "k_spatial2", "k_temporal", "pw1", "pw2"):
            t = getattr(self, n)
            if t is not None:
                out[prefix + n] = t
        if self.temporal is not None:
            tag = "ssm." if isinstance(self.temporal, SsmParams) else "attn."
            out.update(self.temporal.named_parameters(prefix + tag))
        return out


def _dw_kernel(rng, c, shape):
    """Identity tap plus small noise, so a fresh branch starts near pass-through."""
    k = rng.normal(scale=0.1, size=(c,) + shape)
    k[(slice(None),) + tuple(s // 2 for s in shape)] += 1.0
    return k


def init_estf_params(cfg: EstfConfig, rng: np.random.Generator) -> EstfParams:
    cfg.validate()
    d, r = cfg.d_model, cfg.rank
    ks, kt = cfg.k_spatial, cfg.k_temporal
    use_t = cfg.temporal != "none"
    if cfg.temporal == "tbssm":
        temporal = init_ssm_params(cfg.ssm, rng)
    elif cfg.temporal == "attention":
        temporal = init_attention_params(r, rng)
    else:
        temporal = None
    return EstfParams(
        w_down=parameter(rng.normal(scale=d ** -0.5, size=(d, r)), "w_down"),
        w_up=parameter(np.zeros((r, d)), "w_up"),
        k_spatial1=parameter(_dw_kernel(rng, r, (ks, ks)), "k_spatial1") if cfg.spatial else None,
        k_spatial2=parameter(_dw_kernel(rng, r, (ks, ks)), "k_spatial2") if cfg.spatial else None,
        k_temporal=parameter(_dw_kernel(rng, r, (kt,)), "k_temporal") if use_t else None,
        temporal=temporal,
        pw1=parameter(np.eye(r), "pw1") if cfg.pointwise and cfg.spatial else None,
        pw2=parameter(np.eye(r), "pw2") if cfg.pointwise and cfg.spatial else None,
        config=cfg,
    )


def _spatial_conv(z: Tensor, kernel: Tensor, pointwise: Tensor | None) -> Tensor:
    out = ops.dwconv2d(z, kernel)
    return ops.matmul(out, pointwise) if pointwise is not None else out


def _temporal_conv(z: Tensor, kernel: Tensor) -> Tensor:
    # [B, T, H, W, C] -> [B, H, W, T, C] so time sits on axis -2
    zt = ops.permute(z, (0, 2, 3, 1, 4))
    return ops.permute(ops.dwconv1d(zt, kernel), (0, 3, 1, 2, 4))


def _temporal_mix(pooled: Tensor, module) -> Tensor:
    b, t, h, w, c = pooled.shape
    seq = ops.reshape(ops.permute(pooled, (0, 2, 3, 1, 4)), (b * h * w, t, c))
    if isinstance(module, SsmParams):
        mixed = tb_ssm_forward(seq, module)
    else:
        mixed = attention_baseline(seq, module)
    return ops.permute(ops.reshape(mixed, (b, h, w, t, c)), (0, 3, 1, 2, 4))


def estf_forward(x: Tensor, p: EstfParams, grid: tuple[int, int, int]) -> Tensor:
    """Adapter output for tokens ``x`` ([N, D] or [B, N, D]) on ``grid``."""
    cfg = p.config
    squeeze = x.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    b, n, d = x.shape
    t, h, w = grid
    if n != t * h * w:
        raise ShapeError(f"estf_forward: N={n} tokens do not fit grid {grid} (needs {t * h * w})")
    fh, fw = cfg.pool_factor
    if h % fh or w % fw:
        raise ConfigError(f"estf_forward: pool factor {cfg.pool_factor} does not divide grid {h}x{w}")

    z = ops.reshape(ops.matmul(x, p.w_down), (b, t, h, w, cfg.rank))
    total = z
    zs_mid = _spatial_conv(z, p.k_spatial1, p.pw1) if cfg.spatial else None
    zt_up = zt_mid = None
    if cfg.temporal != "none":
        zt_mid = _temporal_conv(z, p.k_temporal)
        pool_in = zt_mid + zs_mid if (cfg.spatial and cfg.fusion != "none") else zt_mid
        zt = _temporal_mix(ops.avgpool_spatial(pool_in, cfg.pool_factor), p.temporal)
        zt_up = ops.upsample_nearest(zt, cfg.pool_factor)
        total = total + zt_up
    if cfg.spatial:
        if zt_up is not None and cfg.fusion == "canonical":
            s_in = zs_mid + zt_up
        elif zt_mid is not None and cfg.fusion == "literal":
            s_in = zs_mid + zt_mid
        else:
            s_in = zs_mid
        total = total + _spatial_conv(s_in, p.k_spatial2, p.pw2)
    out = ops.matmul(ops.reshape(total, (b, n, cfg.rank)), p.w_up)
    return ops.reshape(out, (n, d)) if squeeze else out


# ---------------------------------------------------------------------------
# frozen backbone
# ---------------------------------------------------------------------------

@dataclass
class BackboneConfig:
    depth: int = 2
    d_model: int = 32
    patch: tuple[int, int, int] = (1, 4, 4)
    input_shape: tuple[int, int, int, int] = (64, 16, 16, 3)  # T, H, W, D_in
    mlp_ratio: int = 2
    adapter_blocks: list[int] | None = None  # None = every block

    def grid(self) -> tuple[int, int, int]:
        (t, h, w, _), (tp, hp, wp) = self.input_shape, self.patch
        return t // tp, h // hp, w // wp

    def validate(self) -> None:
        (t, h, w, _), (tp, hp, wp) = self.input_shape, self.patch
        rem = [(-n) % p for n, p in ((t, tp), (h, hp), (w, wp))]
        if any(rem):
            raise ConfigError(
                f"input extents (T={t}, H={h}, W={w}) not divisible by patch {self.patch}; "
                f"pad by (T+{rem[0]}, H+{rem[1]}, W+{rem[2]})"
            )
        if self.adapter_blocks is not None:
            bad = [i for i in self.adapter_blocks if not 0 <= i < self.depth]
            if bad:
                raise ConfigError(f"adapter_blocks {bad} outside 0..{self.depth - 1}")

    @property
    def n_tokens(self) -> int:
        t, h, w = self.grid()
        return t * h * w

    def blocks_with_adapters(self) -> list[int]:
        return list(range(self.depth)) if self.adapter_blocks is None else sorted(self.adapter_blocks)


@dataclass
class Block:
    ln_gamma: Tensor
    ln_beta: Tensor
    fc1: Tensor
    b1: Tensor
    fc2: Tensor
    b2: Tensor

    def named_parameters(self, prefix=""):
        return {prefix + n: getattr(self, n) for n in ("ln_gamma", "ln_beta", "fc1", "b1", "fc2", "b2")}


@dataclass
class Backbone:
    w_patch: Tensor
    b_patch: Tensor
    e_pos: Tensor
    blocks: list[Block]
    config: BackboneConfig

    def named_parameters(self, prefix=""):
        out = {prefix + "w_patch": self.w_patch, prefix + "b_patch": self.b_patch, prefix + "e_pos": self.e_pos}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_parameters(f"{prefix}block{i}."))
        return out


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> Backbone:
    """Random, frozen stand-in for a pretrained video transformer."""
    cfg.validate()
    d = cfg.d_model
    tp, hp, wp = cfg.patch
    patch_dim = tp * hp * wp * cfg.input_shape[3]
    hidden = cfg.mlp_ratio * d

    def frozen(arr):
        return Tensor(arr)

    blocks = [
        Block(
            ln_gamma=frozen(np.ones(d)),
            ln_beta=frozen(np.zeros(d)),
            fc1=frozen(rng.normal(scale=d ** -0.5, size=(d, hidden))),
            b1=frozen(rng.normal(scale=0.1, size=hidden)),
            fc2=frozen(rng.normal(scale=hidden ** -0.5, size=(hidden, d))),
            b2=frozen(np.zeros(d)),
        )
        for _ in range(cfg.depth)
    ]
    return Backbone(
        w_patch=frozen(rng.normal(scale=patch_dim ** -0.5, size=(patch_dim, d))),
        b_patch=frozen(np.zeros(d)),
        e_pos=frozen(0.1 * sinusoidal_table(cfg.grid()[0], d)),
        blocks=blocks,
        config=cfg,
    )


def patch_embed(video: Tensor, bb: Backbone) -> Tensor:
    """[T, H, W, D_in] (or batched) -> [N, D] tokens plus temporal position table."""
    cfg = bb.config
    squeeze = video.ndim == 4
    if squeeze:
        video = ops.reshape(video, (1,) + video.shape)
    b, t, h, w, c = video.shape
    tp, hp, wp = cfg.patch
    rem = [(-n) % p for n, p in ((t, tp), (h, hp), (w, wp))]
    if any(rem):
        raise ConfigError(f"patch_embed: video {video.shape[1:]} not divisible by patch {cfg.patch}; pad by {tuple(rem)}")
    gt, gh, gw = t // tp, h // hp, w // wp
    if bb.e_pos.shape[0] != gt:
        raise ShapeError(f"patch_embed: positional table has {bb.e_pos.shape[0]} rows, grid needs {gt}")
    blocks = ops.reshape(video, (b, gt, tp, gh, hp, gw, wp, c))
    blocks = ops.permute(blocks, (0, 1, 3, 5, 2, 4, 6, 7))  # grid axes first, then patch interior
    flat = ops.reshape(blocks, (b, gt * gh * gw, tp * hp * wp * c))
    tokens = ops.matmul(flat, bb.w_patch) + ops.broadcast_to(bb.b_patch, (b, gt * gh * gw, cfg.d_model))
    pos = ops.reshape(ops.broadcast_spatial(bb.e_pos, (gh, gw)), (gt * gh * gw, cfg.d_model))
    out = tokens + ops.broadcast_to(pos, tokens.shape)
    return ops.reshape(out, out.shape[1:]) if squeeze else out


def block_forward(x: Tensor, blk: Block) -> Tensor:
    shape = x.shape
    hidden = blk.fc1.shape[1]
    h = ops.layernorm(x, blk.ln_gamma, blk.ln_beta)
    h = ops.silu(ops.matmul(h, blk.fc1) + ops.broadcast_to(blk.b1, shape[:-1] + (hidden,)))
    h = ops.matmul(h, blk.fc2) + ops.broadcast_to(blk.b2, shape)
    return x + h


def backbone_forward(
    x: Tensor, bb: Backbone, adapters: dict[int, EstfParams] | None = None, start: int = 0, stop: int | None = None
) -> Tensor:
    """Residual blocks ``start..stop-1``, each optionally followed by its residual adapter."""
    grid = bb.config.grid()
    adapters = adapters or {}
    stop = len(bb.blocks) if stop is None else stop
    for i in range(start, stop):
        x = block_forward(x, bb.blocks[i])
        if i in adapters:
            x = x + estf_forward(x, adapters[i], grid)
    return x


def count_parameters(named: dict[str, Tensor]) -> tuple[int, int]:
    """(trainable, total) scalar counts over a name -> tensor mapping."""
    seen: dict[int, Tensor] = {id(t): t for t in named.values()}
    total = sum(t.size for t in seen.values())
    trainable = sum(t.size for t in seen.values() if t.requires_grad)
    return trainable, total


__all__ = [
    "Backbone",
    "BackboneConfig",
    "Block",
    "EstfConfig",
    "EstfParams",
    "backbone_forward",
    "block_forward",
    "count_parameters",
    "estf_forward",
    "init_backbone",
    "init_estf_params",
    "patch_embed",
    "sinusoidal_table",
]
