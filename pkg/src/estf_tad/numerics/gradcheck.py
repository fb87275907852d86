"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NumericError, Tensor, precision


@dataclass
class CheckReport:
    max_rel_error: float
    max_abs_error: float
    worst: tuple[int, int] | None  # (parameter index, flat entry index)
    n_checked: int
    tol_rel: float
    per_param: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol_rel


def _loss_value(f, where) -> float:
    out = f()
    val = float(out.data if not isinstance(out, Tensor) else out.data.reshape(-1)[0])
    if not np.isfinite(val):
        raise NumericError(f"grad_check: non-finite loss at {where}")
    return val


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol_rel: float = 1e-4,
    floor: float = 1e-7,
    max_entries: int | None = None,
    seed: int = 0,
) -> CheckReport:
    """Compare taped gradients of the scalar ``f()`` with central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor_eff)``
    where ``floor_eff = max(floor, 10 * eps_mach * max(|f|, 1) / (eps * tol_rel))``.
    The second term is the smallest gradient a central difference can resolve
    to ``tol_rel`` given float64 rounding of ``f``; entries below it are
    effectively judged on absolute error.
    ``max_entries`` subsamples entries of large parameters (deterministically
    per ``seed``); by default every entry is perturbed.  Runs in float64.
    """
    with precision(np.float64):
        for p in params:
            p.grad = None
            if p.data.dtype != np.float64:
                p.data = p.data.astype(np.float64)
        loss = f()
        if not np.isfinite(loss.data).all():
            raise NumericError("grad_check: non-finite loss at the unperturbed point")
        loss.backward()
        scale = max(abs(float(loss.data.reshape(-1)[0])), 1.0)
        floor_eff = max(floor, 10.0 * np.finfo(np.float64).eps * scale / (eps * tol_rel))
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
        rng = np.random.default_rng(seed)

        worst_rel, worst_abs, worst_at, count = 0.0, 0.0, None, 0
        per_param = []
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            p_worst = 0.0
            for j in idx:
                orig = flat[j]
                flat[j] = orig + eps
                up = _loss_value(f, (pi, int(j), "+eps"))
                flat[j] = orig - eps
                down = _loss_value(f, (pi, int(j), "-eps"))
                flat[j] = orig
                numeric = (up - down) / (2.0 * eps)
                a = analytic[pi].reshape(-1)[j]
                err = abs(a - numeric)
                rel = err / max(abs(a), abs(numeric), floor_eff)
                count += 1
                p_worst = max(p_worst, rel)
                worst_abs = max(worst_abs, err)
                if rel > worst_rel:
                    worst_rel, worst_at = rel, (pi, int(j))
            per_param.append(p_worst)
            p.grad = None
    return CheckReport(worst_rel, worst_abs, worst_at, count, tol_rel, per_param)
