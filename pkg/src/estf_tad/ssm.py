"""Selective scan and the bidirectional boundary-aware SSM block.

The block normalises its input once, projects it to two streams, scans the
first forward in time and the second backward in time, each with its own
diagonal state matrix, and projects the concatenated outputs back::

    u         = LN(x) @ w_in             -> x_f | x_b
    x_b       = flip_T(x_b)
    B, C      = split(stream @ w_bc)     (shared generator)
    delta     = softplus(stream @ w_delta + b_delta)   (selective mode)
    h_t       = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t
    y_t       = <C_t, h_t>
    out       = concat(y_f, flip_T(y_b)) @ w_out

with ``A = -exp(a_log)``.  In ``literal`` mode ``delta`` is fixed to one, so
the discrete transition is ``exp(A)`` and the input matrix is ``B_t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigError, NumericError, ShapeError, Tensor, grad_enabled, make_result, ops, parameter

SCAN_MODES = ("selective", "literal")


@dataclass
class SsmConfig:
    d_model: int = 8
    d_state: int = 4
    mode: str = "selective"
    gate: bool = False
    tied: bool = False
    scan: str = "sequential"
    chunk: int = 64
    dt_min: float = 0.01
    dt_max: float = 0.1
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.mode not in SCAN_MODES:
            raise ConfigError(f"ssm.mode must be one of {SCAN_MODES}, got {self.mode!r}")
        if self.scan not in ("sequential", "chunked"):
            raise ConfigError(f"ssm.scan must be 'sequential' or 'chunked', got {self.scan!r}")
        if self.d_model < 1 or self.d_state < 1 or self.chunk < 1:
            raise ConfigError("ssm dimensions and chunk must be positive")


@dataclass
class SsmParams:
    a_log_fwd: Tensor
    a_log_bwd: Tensor
    w_in: Tensor
    w_out: Tensor
    w_bc: Tensor
    w_delta: Tensor
    b_delta: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    w_gate: Tensor | None = None
    config: SsmConfig = field(default_factory=SsmConfig)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        names = ["a_log_fwd", "a_log_bwd", "w_in", "w_out", "w_bc", "w_delta", "b_delta", "ln_gamma", "ln_beta"]
        if self.w_gate is not None:
            names.append("w_gate")
        out = {}
        for n in names:
            t = getattr(self, n)
            if n == "a_log_bwd" and t is self.a_log_fwd:
                continue
            out[prefix + n] = t
        return out


def init_ssm_params(cfg: SsmConfig, rng: np.random.Generator) -> SsmParams:
    """Diagonal S4D-real style init; the backward matrix gets a +-0.01 jitter."""
    cfg.validate()
    d, s = cfg.d_model, cfg.d_state
    a_log = np.log(np.tile(np.arange(1, s + 1, dtype=np.float64), (d, 1)))
    a_fwd = parameter(a_log.copy(), "a_log_fwd")
    a_bwd = a_fwd if cfg.tied else parameter(a_log + rng.uniform(-0.01, 0.01, size=(d, s)), "a_log_bwd")
    dt = np.exp(rng.uniform(math.log(cfg.dt_min), math.log(cfg.dt_max), size=d))
    b_delta = dt + np.log(-np.expm1(-dt))  # inverse softplus
    return SsmParams(
        a_log_fwd=a_fwd,
        a_log_bwd=a_bwd,
        w_in=parameter(rng.normal(scale=d ** -0.5, size=(d, 2 * d)), "w_in"),
        w_out=parameter(rng.normal(scale=(2 * d) ** -0.5, size=(2 * d, d)), "w_out"),
        w_bc=parameter(rng.normal(scale=d ** -0.5, size=(d, 2 * s)), "w_bc"),
        w_delta=parameter(rng.normal(scale=0.1 * d ** -0.5, size=(d, 1)), "w_delta"),
        b_delta=parameter(b_delta, "b_delta"),
        ln_gamma=parameter(np.ones(d), "ln_gamma"),
        ln_beta=parameter(np.zeros(d), "ln_beta"),
        w_gate=parameter(rng.normal(scale=d ** -0.5, size=(d, d)), "w_gate") if cfg.gate else None,
        config=cfg,
    )


def swap_directions(p: SsmParams) -> SsmParams:
    """Exchange the roles of the two scan directions.

    The state matrices trade places, the two halves of ``w_in`` (which stream
    feeds which scan) trade places, and so do the two halves of ``w_out``
    (the concat order).  Running the swapped block on ``x`` and flipping the
    result reproduces the original block on ``flip(x)``.
    """
    d = p.config.d_model

    def halves(w, axis):
        a, b = np.split(w.data, [d], axis=axis)
        return parameter(np.concatenate([b, a], axis=axis))

    return SsmParams(
        a_log_fwd=parameter(p.a_log_bwd.data.copy()),
        a_log_bwd=parameter(p.a_log_fwd.data.copy()),
        w_in=halves(p.w_in, 1),
        w_out=halves(p.w_out, 0),
        w_bc=p.w_bc,
        w_delta=p.w_delta,
        b_delta=p.b_delta,
        ln_gamma=p.ln_gamma,
        ln_beta=p.ln_beta,
        w_gate=p.w_gate,
        config=p.config,
    )


# ---------------------------------------------------------------------------
# scan kernels (time-major numpy arrays [T, B, D, S])
# ---------------------------------------------------------------------------

def _linear_scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """h_t = a_t * h_{t-1} + b_t with h_{-1} = 0."""
    hs = np.empty_like(b)
    h = np.zeros_like(b[0])
    for t in range(b.shape[0]):
        h = a[t] * h
        h += b[t]
        hs[t] = h
    return hs


def _linear_scan_chunked(a: np.ndarray, b: np.ndarray, chunk: int) -> np.ndarray:
    """Same recurrence, composing affine maps within chunks by doubling."""
    T = b.shape[0]
    hs = np.empty_like(b)
    carry = np.zeros_like(b[0])
    for t0 in range(0, T, chunk):
        ca = a[t0:t0 + chunk].copy()
        cb = b[t0:t0 + chunk].copy()
        n = cb.shape[0]
        off = 1
        while off < n:
            # (a1, b1) then (a2, b2) composes to (a2 * a1, a2 * b1 + b2)
            cb[off:] = ca[off:] * cb[:-off] + cb[off:]
            ca[off:] = ca[off:] * ca[:-off]
            off *= 2
        hs[t0:t0 + n] = ca * carry + cb
        carry = hs[t0 + n - 1]
    return hs


def linear_scan(a: np.ndarray, b: np.ndarray, method: str = "sequential", chunk: int = 64) -> np.ndarray:
    if method == "sequential":
        return _linear_scan_sequential(a, b)
    if method == "chunked":
        return _linear_scan_chunked(a, b, chunk)
    raise ConfigError(f"unknown scan method {method!r}")


def _raise_nonfinite(arr: np.ndarray, what: str) -> None:
    # arr is time-major [T, B, D, ...]
    t, b, d = (int(i) for i in np.argwhere(~np.isfinite(arr))[0][:3])
    raise NumericError(f"selective_scan: non-finite {what} at (batch={b}, t={t}, channel={d})")


def selective_scan(
    x: Tensor,
    a_log: Tensor,
    b_seq: Tensor,
    c_seq: Tensor,
    delta_seq: Tensor | None = None,
    method: str = "sequential",
    chunk: int = 64,
) -> Tensor:
    """Diagonal selective scan.

    x: [B, T, D], a_log: [D, S], b_seq / c_seq: [B, T, S], delta_seq: [B, T, D]
    or ``None`` for the literal recurrence (delta fixed to 1).
    Returns y: [B, T, D].
    """
    if x.ndim != 3:
        raise ShapeError(f"selective_scan: x must be [B, T, D], got {x.shape}")
    bsz, T, d = x.shape
    s = a_log.shape[1]
    if a_log.shape != (d, s) or b_seq.shape != (bsz, T, s) or c_seq.shape != (bsz, T, s):
        raise ShapeError(
            f"selective_scan: x {x.shape}, a_log {a_log.shape}, B {b_seq.shape}, C {c_seq.shape} disagree"
        )
    if delta_seq is not None and delta_seq.shape != x.shape:
        raise ShapeError(f"selective_scan: delta {delta_seq.shape} vs x {x.shape}")
    if T < 1:
        raise ShapeError("selective_scan: empty sequence")

    A = -np.exp(a_log.data)  # [D, S]
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2))  # [T, B, D]
    bt = np.ascontiguousarray(b_seq.data.transpose(1, 0, 2))  # [T, B, S]
    ct = np.ascontiguousarray(c_seq.data.transpose(1, 0, 2))
    if delta_seq is None:
        dt = None
        dA = np.broadcast_to(np.exp(A), (T, bsz, d, s))
        dBx = bt[:, :, None, :] * xt[:, :, :, None]
    else:
        dt = np.ascontiguousarray(delta_seq.data.transpose(1, 0, 2))
        dA = np.exp(dt[..., None] * A)
        dBx = (dt * xt)[..., None] * bt[:, :, None, :]
    hs = linear_scan(dA, dBx, method, chunk)
    if not np.isfinite(hs).all():
        _raise_nonfinite(hs, "state")
    y = np.einsum("tbds,tbs->tbd", hs, ct)
    if not np.isfinite(y).all():
        _raise_nonfinite(y, "output")
    out = np.ascontiguousarray(y.transpose(1, 0, 2))

    if not grad_enabled():
        return make_result(out, (), None, "selective_scan")

    def backward(g):
        gy = np.ascontiguousarray(g.transpose(1, 0, 2))  # [T, B, D]
        gc = np.einsum("tbd,tbds->tbs", gy, hs)
        inject = gy[..., None] * ct[:, :, None, :]
        # adjoint recurrence: gh_t = inject_t + dA_{t+1} * gh_{t+1}
        a_rev = np.empty_like(hs)
        a_rev[0] = 0.0
        a_rev[1:] = dA[:0:-1]
        gh = linear_scan(a_rev, inject[::-1].copy(), "sequential")[::-1]
        h_prev = np.empty_like(hs)
        h_prev[0] = 0.0
        h_prev[1:] = hs[:-1]
        g_dA = gh * h_prev * dA  # d/d(delta*A) of exp(delta*A), already times dA
        if dt is None:
            gx = np.einsum("tbds,tbs->tbd", gh, bt)
            gb = np.einsum("tbds,tbd->tbs", gh, xt)
            gA = g_dA.sum(axis=(0, 1))
            grads_delta = None
        else:
            gx = np.einsum("tbds,tbs->tbd", gh, bt) * dt
            gb = np.einsum("tbds,tbd->tbs", gh, dt * xt)
            gA = np.einsum("tbds,tbd->ds", g_dA, dt)
            gdelta = np.einsum("tbds,ds->tbd", g_dA, A) + np.einsum("tbds,tbs->tbd", gh, bt) * xt
            grads_delta = np.ascontiguousarray(gdelta.transpose(1, 0, 2))
        g_alog = gA * A  # dA/da_log = A
        grads = [
            np.ascontiguousarray(gx.transpose(1, 0, 2)),
            g_alog,
            np.ascontiguousarray(gb.transpose(1, 0, 2)),
            np.ascontiguousarray(gc.transpose(1, 0, 2)),
        ]
        if grads_delta is not None:
            grads.append(grads_delta)
        return tuple(grads)

    parents = (x, a_log, b_seq, c_seq) if delta_seq is None else (x, a_log, b_seq, c_seq, delta_seq)
    return make_result(out, parents, backward, "selective_scan")


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def _stream_scan(stream: Tensor, a_log: Tensor, p: SsmParams) -> Tensor:
    cfg = p.config
    bsz, T, d = stream.shape
    s = cfg.d_state
    b_seq, c_seq = ops.split(ops.matmul(stream, p.w_bc), [s, s], axis=-1)
    delta = None
    if cfg.mode == "selective":
        raw = ops.broadcast_to(ops.matmul(stream, p.w_delta), (bsz, T, d))
        delta = ops.softplus(raw + ops.broadcast_to(p.b_delta, (bsz, T, d)))
    return selective_scan(stream, a_log, b_seq, c_seq, delta, method=cfg.scan, chunk=cfg.chunk)


def tb_ssm_forward(x: Tensor, p: SsmParams) -> Tensor:
    """x: [B, T, D_r] -> [B, T, D_r]; B counts independent sequences."""
    cfg = p.config
    d = cfg.d_model
    if x.ndim != 3 or x.shape[-1] != d:
        raise ShapeError(f"tb_ssm_forward: expected [B, T, {d}], got {x.shape}")
    xn = ops.layernorm(x, p.ln_gamma, p.ln_beta, cfg.ln_eps)
    x_f, x_b = ops.split(ops.matmul(xn, p.w_in), [d, d], axis=-1)
    x_b = ops.flip(x_b, axis=1)
    y_f = _stream_scan(x_f, p.a_log_fwd, p)
    y_b = ops.flip(_stream_scan(x_b, p.a_log_bwd, p), axis=1)
    if p.w_gate is not None:
        gate = ops.silu(ops.matmul(xn, p.w_gate))
        y_f, y_b = y_f * gate, y_b * gate
    return ops.matmul(ops.concat([y_f, y_b], axis=-1), p.w_out)


# -- attention baseline -----------------------------------------------------

@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    block_elems: int = 1 << 18  # score-matrix entries per query block

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + n: getattr(self, n) for n in ("w_q", "w_k", "w_v", "w_o", "ln_gamma", "ln_beta")}


def init_attention_params(d: int, rng: np.random.Generator) -> AttentionParams:
    def w(name):
        return parameter(rng.normal(scale=d ** -0.5, size=(d, d)), name)

    return AttentionParams(w("w_q"), w("w_k"), w("w_v"), w("w_o"),
                           parameter(np.ones(d), "ln_gamma"), parameter(np.zeros(d), "ln_beta"))


def attention_baseline(x: Tensor, p: AttentionParams) -> Tensor:
    """Single-head softmax self-attention over T; x: [B, T, D] -> [B, T, D].

    Without a gradient tape the score matrix is built in blocks of query rows
    holding about ``block_elems`` entries, so long sequences stay in memory and
    every block has the same cache footprint; the arithmetic is unchanged.
    """
    d = x.shape[-1]
    xn = ops.layernorm(x, p.ln_gamma, p.ln_beta)
    q, k, v = ops.matmul(xn, p.w_q), ops.matmul(xn, p.w_k), ops.matmul(xn, p.w_v)
    scale = 1.0 / math.sqrt(d)
    if not grad_enabled():
        qd, kd, vd = q.data, k.data, v.data
        kt = np.swapaxes(kd, -1, -2)
        out = np.empty_like(qd)
        rows = max(1, p.block_elems // (kd.shape[0] * kd.shape[1]))
        for i in range(0, qd.shape[1], rows):
            sc = (qd[:, i:i + rows] @ kt) * scale
            sc -= sc.max(axis=-1, keepdims=True)
            np.exp(sc, out=sc)
            sc /= sc.sum(axis=-1, keepdims=True)
            out[:, i:i + rows] = sc @ vd
        return ops.matmul(Tensor(out), p.w_o)
    scores = ops.bmm(q, ops.permute(k, (0, 2, 1))) * scale
    return ops.matmul(ops.bmm(ops.softmax(scores, axis=-1), v), p.w_o)
