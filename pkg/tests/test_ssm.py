import math
import time

import numpy as np
import pytest

import oracles
from estf_tad.numerics import NumericError, Tensor, grad_check, no_grad, ops, parameter
from estf_tad.ssm import (
    SsmConfig,
    attention_baseline,
    init_attention_params,
    init_ssm_params,
    linear_scan,
    selective_scan,
    swap_directions,
    tb_ssm_forward,
)


def random_params(rng, d, s, mode="selective", scale=1.0):
    p = init_ssm_params(SsmConfig(d_model=d, d_state=s, mode=mode), rng)
    # move away from the symmetric init so every parameter matters
    for t in p.named_parameters().values():
        t.data = t.data + rng.normal(scale=0.1 * scale, size=t.shape)
    return p


def as_numpy(p):
    return {k: v.data for k, v in p.named_parameters().items()}


class TestSelectiveScan:
    def test_single_step(self):
        rng = np.random.default_rng(0)
        x, a_log = rng.normal(size=(1, 1, 2)), rng.normal(size=(2, 3))
        b, c, delta = rng.normal(size=(1, 1, 3)), rng.normal(size=(1, 1, 3)), rng.uniform(0.1, 1, size=(1, 1, 2))
        y = selective_scan(Tensor(x), Tensor(a_log), Tensor(b), Tensor(c), Tensor(delta)).data
        expected = (c[0, 0] @ (delta[0, 0][:, None] * b[0, 0][None, :]).T) * x[0, 0]
        np.testing.assert_allclose(y[0, 0], expected, atol=1e-14)

    def test_literal_direct(self):
        a_log = np.array([[math.log(math.log(2.0))]])  # exp(-exp(a_log)) = 0.5
        x = np.ones((1, 3, 1))
        ones = np.ones((1, 3, 1))
        y = selective_scan(Tensor(x), Tensor(a_log), Tensor(ones), Tensor(ones), None).data
        np.testing.assert_allclose(y[0, :, 0], [1.0, 1.5, 1.75], atol=1e-12)

    @pytest.mark.parametrize("literal", [False, True])
    def test_vs_loop_oracle(self, literal):
        rng = np.random.default_rng(1)
        for _ in range(20):
            B, T, D, S = int(rng.integers(1, 4)), int(rng.integers(1, 20)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
            x, a_log = rng.normal(size=(B, T, D)), rng.normal(scale=0.5, size=(D, S))
            b, c = rng.normal(size=(B, T, S)), rng.normal(size=(B, T, S))
            delta = None if literal else rng.uniform(0.01, 1.0, size=(B, T, D))
            got = selective_scan(Tensor(x), Tensor(a_log), Tensor(b), Tensor(c), None if literal else Tensor(delta))
            np.testing.assert_allclose(got.data, oracles.selective_scan(x, a_log, b, c, delta), atol=1e-10, rtol=0)

    @pytest.mark.parametrize("literal", [False, True])
    def test_grad(self, literal):
        rng = np.random.default_rng(2)
        B, T, D, S = 2, 6, 3, 2
        x, a_log = parameter(rng.normal(size=(B, T, D))), parameter(rng.normal(scale=0.5, size=(D, S)))
        b, c = parameter(rng.normal(size=(B, T, S))), parameter(rng.normal(size=(B, T, S)))
        delta = None if literal else parameter(rng.uniform(0.1, 1.0, size=(B, T, D)))
        w = Tensor(rng.normal(size=(B, T, D)))
        params = [x, a_log, b, c] + ([] if literal else [delta])
        rep = grad_check(lambda: ops.sum(selective_scan(x, a_log, b, c, delta) * w), params)
        assert rep.passed, rep

    def test_chunked_matches_sequential(self):
        rng = np.random.default_rng(3)
        for chunk in (1, 3, 8, 64):
            a = rng.uniform(0.0, 1.0, size=(50, 2, 3, 4))
            b = rng.normal(size=(50, 2, 3, 4))
            np.testing.assert_allclose(
                linear_scan(a, b, "chunked", chunk), linear_scan(a, b, "sequential"), atol=1e-10, rtol=0
            )

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_reports_location(self):
        x = np.ones((1, 4, 2))
        x[0, 2, 1] = 1e308
        b = np.full((1, 4, 1), 1e10)
        with pytest.raises(NumericError, match=r"batch=0, t=2, channel=1"):
            selective_scan(Tensor(x), Tensor(np.zeros((2, 1))), Tensor(b), Tensor(np.ones((1, 4, 1))), None)


class TestTbSsm:
    def test_vs_naive_oracle(self):
        rng = np.random.default_rng(4)
        for mode in ("selective", "literal"):
            for _ in range(5):
                B, T, D, S = int(rng.integers(1, 3)), int(rng.integers(1, 12)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
                p = random_params(rng, D, S, mode)
                x = rng.normal(size=(B, T, D))
                np.testing.assert_allclose(
                    tb_ssm_forward(Tensor(x), p).data, oracles.tb_ssm(x, as_numpy(p), mode), atol=1e-10, rtol=0
                )

    def test_symmetric_parameters_flip_equivariance(self):
        rng = np.random.default_rng(5)
        p = random_params(rng, 4, 3)
        p.a_log_bwd = p.a_log_fwd
        d = 4
        # tied matrices alone are not enough: the two stream projections must match too
        p.w_in.data[:, d:] = p.w_in.data[:, :d]
        p.w_out.data[d:] = p.w_out.data[:d]
        x = rng.normal(size=(2, 9, 4))
        left = tb_ssm_forward(Tensor(x[:, ::-1].copy()), p).data
        right = tb_ssm_forward(Tensor(x), p).data[:, ::-1]
        np.testing.assert_allclose(left, right, atol=1e-12)

    @pytest.mark.parametrize("mode", ["selective", "literal"])
    def test_direction_swap(self, mode):
        rng = np.random.default_rng(6)
        for _ in range(20):
            D, S, T = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 30))
            p = random_params(rng, D, S, mode)
            x = rng.normal(size=(int(rng.integers(1, 4)), T, D))
            left = tb_ssm_forward(Tensor(x[:, ::-1].copy()), p).data
            right = tb_ssm_forward(Tensor(x), swap_directions(p)).data[:, ::-1]
            np.testing.assert_allclose(left, right, atol=1e-10, rtol=0)

    def test_t1_closed_form(self):
        rng = np.random.default_rng(7)
        p = random_params(rng, 3, 2)
        x = rng.normal(size=(2, 1, 3))
        d, s = 3, 2
        out = tb_ssm_forward(Tensor(x), p).data
        for bb in range(2):
            xn = oracles.layernorm_row(x[bb, 0], p.ln_gamma.data, p.ln_beta.data)
            u = xn @ p.w_in.data
            ys = []
            for stream in (u[:d], u[d:]):
                bc = stream @ p.w_bc.data
                delta = np.logaddexp(0.0, stream @ p.w_delta.data[:, 0] + p.b_delta.data)
                ys.append(delta * stream * (bc[:s] @ bc[s:]))
            np.testing.assert_allclose(out[bb, 0], np.concatenate(ys) @ p.w_out.data, atol=1e-12)

    def test_stability_long_sequence(self):
        rng = np.random.default_rng(8)
        p = init_ssm_params(SsmConfig(d_model=4, d_state=4), rng)
        x = rng.uniform(-1, 1, size=(1, 10_000, 4))
        delta_check = np.logaddexp(0.0, p.b_delta.data)
        assert (delta_check > 0).all()
        abar = np.exp(delta_check[:, None] * -np.exp(p.a_log_fwd.data))
        assert ((abar > 0) & (abar < 1)).all()
        with no_grad():
            y = tb_ssm_forward(Tensor(x), p).data
        assert np.isfinite(y).all() and np.abs(y).max() < 1e6

    def test_gradient_asymmetry(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            p = random_params(rng, 4, 3)
            x = Tensor(rng.normal(size=(2, 10, 4)))
            w = Tensor(rng.normal(size=(2, 10, 4)))
            ops.sum(tb_ssm_forward(x, p) * w).backward()
            assert np.abs(p.a_log_fwd.grad - p.a_log_bwd.grad).max() > 1e-6

    def test_tied_shares_one_parameter(self):
        p = init_ssm_params(SsmConfig(d_model=4, d_state=2, tied=True), np.random.default_rng(0))
        assert p.a_log_bwd is p.a_log_fwd
        assert "a_log_bwd" not in p.named_parameters()

    def test_bwd_init_perturbation(self):
        p = init_ssm_params(SsmConfig(d_model=4, d_state=3), np.random.default_rng(0))
        np.testing.assert_allclose(p.a_log_fwd.data, np.log(np.tile([1.0, 2.0, 3.0], (4, 1))))
        diff = p.a_log_bwd.data - p.a_log_fwd.data
        assert 0 < np.abs(diff).max() <= 0.01

    def test_chunked_block_matches(self):
        rng = np.random.default_rng(10)
        p = random_params(rng, 4, 3)
        x = Tensor(rng.normal(size=(2, 37, 4)))
        ref = tb_ssm_forward(x, p).data
        p.config.scan, p.config.chunk = "chunked", 8
        np.testing.assert_allclose(tb_ssm_forward(x, p).data, ref, atol=1e-10, rtol=0)

    @pytest.mark.parametrize("mode", ["selective", "literal"])
    def test_grad_check_block(self, mode):
        rng = np.random.default_rng(11)
        p = random_params(rng, 3, 2, mode)
        x = parameter(rng.normal(size=(2, 5, 3)))
        params = [x] + list(p.named_parameters().values())
        rep = grad_check(lambda: ops.mean(tb_ssm_forward(x, p)), params)
        assert rep.passed, rep

    def test_gate_flag(self):
        rng = np.random.default_rng(12)
        p = init_ssm_params(SsmConfig(d_model=3, d_state=2, gate=True), rng)
        x = parameter(rng.normal(size=(1, 4, 3)))
        assert grad_check(lambda: ops.mean(tb_ssm_forward(x, p)), [x, p.w_gate]).passed


class TestAttentionBaseline:
    def test_t1_is_projection(self):
        rng = np.random.default_rng(13)
        p = init_attention_params(3, rng)
        x = rng.normal(size=(2, 1, 3))
        out = attention_baseline(Tensor(x), p).data
        for bb in range(2):
            xn = oracles.layernorm_row(x[bb, 0], p.ln_gamma.data, p.ln_beta.data)
            np.testing.assert_allclose(out[bb, 0], xn @ p.w_v.data @ p.w_o.data, atol=1e-12)

    def test_identical_tokens_uniform_weights(self):
        rng = np.random.default_rng(14)
        p = init_attention_params(3, rng)
        x = np.tile(rng.normal(size=3), (1, 5, 1))
        xn = ops.layernorm(Tensor(x), p.ln_gamma, p.ln_beta)
        q, k = ops.matmul(xn, p.w_q).data, ops.matmul(xn, p.w_k).data
        logits = q[0] @ k[0].T
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(w, 1 / 5, atol=1e-15)

    def test_vs_loop_oracle(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            D, T = int(rng.integers(1, 5)), int(rng.integers(1, 10))
            p = init_attention_params(D, rng)
            x = rng.normal(size=(2, T, D))
            pn = {k: v.data for k, v in p.named_parameters().items()}
            np.testing.assert_allclose(attention_baseline(Tensor(x), p).data, oracles.attention(x, pn), atol=1e-10, rtol=0)
            with no_grad():
                p.block_elems = 3 * T
                np.testing.assert_allclose(attention_baseline(Tensor(x), p).data, oracles.attention(x, pn), atol=1e-10, rtol=0)

    def test_grad(self):
        rng = np.random.default_rng(16)
        p = init_attention_params(3, rng)
        x = parameter(rng.normal(size=(2, 4, 3)))
        w = Tensor(rng.normal(size=(2, 4, 3)))
        rep = grad_check(lambda: ops.mean(attention_baseline(x, p) * w), [x] + list(p.named_parameters().values()))
        assert rep.passed, rep


@pytest.mark.slow
def test_linear_runtime_ratio():
    rng = np.random.default_rng(17)
    p = init_ssm_params(SsmConfig(d_model=16, d_state=8), rng)
    pa = init_attention_params(16, rng)

    def best_time(fn, n, reps=5):
        x = Tensor(rng.normal(size=(1, n, 16)))
        times = []
        with no_grad():
            for _ in range(reps):
                t0 = time.perf_counter()
                fn(x)
                times.append(time.perf_counter() - t0)
        return min(times)

    for n in (4096, 8192):
        r = best_time(lambda x: tb_ssm_forward(x, p), 2 * n) / best_time(lambda x: tb_ssm_forward(x, p), n)
        assert 1.5 <= r <= 2.7, (n, r)
        r = best_time(lambda x: attention_baseline(x, pa), 2 * n) / best_time(lambda x: attention_baseline(x, pa), n)
        assert 3.2 <= r <= 4.8, (n, r)
