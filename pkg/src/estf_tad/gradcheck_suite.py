"""Small fixed instances of each differentiable block, checked against
central differences.  Used by ``estf-tad gradcheck``."""

from __future__ import annotations

import numpy as np

from .detector import DetectorConfig, assign_targets, detection_loss, init_detector, pyramid_geometry
from .estf import BackboneConfig, EstfConfig, estf_forward, init_estf_params
from .numerics import CheckReport, Tensor, grad_check, ops, parameter
from .ssm import SsmConfig, init_ssm_params, tb_ssm_forward

GRADCHECK_MODULES = ("ssm", "estf", "head")


def _jitter(named: dict[str, Tensor], rng: np.random.Generator, scale: float) -> list[Tensor]:
    # move off the structured init so every parameter has a nontrivial gradient
    for t in named.values():
        t.data = t.data + rng.normal(scale=scale, size=t.shape)
    return list(named.values())


def check_ssm(seed: int = 0) -> CheckReport:
    rng = np.random.default_rng([seed, 20])
    worst = None
    for mode in ("selective", "literal"):
        p = init_ssm_params(SsmConfig(d_model=3, d_state=2, mode=mode), rng)
        params = _jitter(p.named_parameters(), rng, 0.1)
        x = parameter(rng.normal(size=(2, 5, 3)))
        w = Tensor(rng.normal(size=(2, 5, 3)))
        rep = grad_check(lambda: ops.sum(tb_ssm_forward(x, p) * w), [x] + params)
        if worst is None or rep.max_rel_error > worst.max_rel_error:
            worst = rep
    return worst


def check_estf(seed: int = 0) -> CheckReport:
    rng = np.random.default_rng([seed, 21])
    cfg = EstfConfig(d_model=6, rank=3, pool_factor=(2, 2), ssm=SsmConfig(d_model=3, d_state=2))
    p = init_estf_params(cfg, rng)
    params = _jitter(p.named_parameters(), rng, 0.3)
    grid = (3, 4, 4)
    x = parameter(rng.normal(size=(1, 48, 6)))
    w = Tensor(rng.normal(size=(1, 48, 6)))
    return grad_check(lambda: ops.sum(estf_forward(x, p, grid) * w), [x] + params)


def check_head(seed: int = 0) -> CheckReport:
    """Detection loss through the head and one adapter of a tiny detector."""
    rng = np.random.default_rng([seed, 22])
    bb = BackboneConfig(depth=1, d_model=6, patch=(1, 2, 2), input_shape=(8, 4, 4, 3))
    acfg = EstfConfig(d_model=6, rank=2, pool_factor=(1, 1), ssm=SsmConfig(d_model=2, d_state=2))
    model = init_detector(bb, acfg, DetectorConfig(n_classes=2, n_levels=2, head_hidden=4), seed=seed)
    _jitter(model.adapters[0].named_parameters(), rng, 0.2)
    stem = model.stem(rng.normal(size=(1, 8, 4, 4, 3)))
    geo = pyramid_geometry(8, model.step_seconds, model.config.ranges())
    targets = assign_targets([(0.5, 1.5, 1)], geo, 2)
    return grad_check(
        lambda: detection_loss(model.forward_from_stem(stem), targets).total,
        list(model.trainable_parameters().values()),
    )


_CHECKS = {"ssm": check_ssm, "estf": check_estf, "head": check_head}


def run_gradchecks(module: str = "all", seed: int = 0) -> dict[str, CheckReport]:
    names = GRADCHECK_MODULES if module == "all" else (module,)
    unknown = [n for n in names if n not in _CHECKS]
    if unknown:
        raise ValueError(f"unknown module {unknown[0]!r}; choose from {', '.join(GRADCHECK_MODULES)} or all")
    return {n: _CHECKS[n](seed) for n in names}


__all__ = ["GRADCHECK_MODULES", "check_estf", "check_head", "check_ssm", "run_gradchecks"]
