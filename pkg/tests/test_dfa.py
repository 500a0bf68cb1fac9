from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fracdet import oracles
from fracdet import params as P
from fracdet.core import Graph, Tensor, grad_check, make_rng, ops
from fracdet.dfa import (
    DfaConfig, DfaParams, bias_from_mlp, build_rel_pos, dfa_attend, dfa_forward, global_downsample,
    param_count_formula,
)
from fracdet.verify import _dfa_with_random_proj


def cfg(**kw) -> DfaConfig:
    return replace(DfaConfig(8), **kw)


class TestConfig:
    def test_defaults(self):
        c = DfaConfig(16)
        assert (c.heads, c.window, c.pool_ratio, c.mlp_hidden, c.dropout, c.eps) == (1, 8, 4, 32, 0.1, 1e-12)

    @pytest.mark.parametrize("kw", [dict(channels=6, heads=4), dict(channels=8, window=0), dict(channels=8, pool_ratio=0)])
    def test_invalid_rejected(self, kw):
        with pytest.raises(ValueError):
            DfaConfig(**kw)

    def test_projection_zero_init_and_count(self):
        c = cfg()
        p = DfaParams.init(c, make_rng(0))
        assert not p.proj_w.data.any() and not p.proj_b.data.any()
        assert p.proj_w.shape == (8, 16)
        assert P.count_params(p) == param_count_formula(c)


class TestGlobalDownsample:
    def _identity_params(self, c: DfaConfig) -> DfaParams:
        p = DfaParams.init(c, make_rng(0))
        p.pre_w.data = np.eye(c.channels)
        p.pre_b.data = np.zeros(c.channels)
        return p

    def test_constant_input_gives_zero(self):
        c = cfg(pool_ratio=1)
        out = global_downsample(Tensor(np.full((1, 8, 3, 3), 0.4)), self._identity_params(c), c)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_quadrant_means(self):
        c = DfaConfig(1, pool_ratio=2)
        p = self._identity_params(c)
        x = make_rng(1).normal(size=(1, 1, 4, 4))
        pooled = ops.pool2d(ops.gelu(Tensor(x)), "avg", 2, 2).data
        g = np.vectorize(oracles.gelu_scalar)(x)[0, 0]
        quads = np.array([[g[:2, :2].mean(), g[:2, 2:].mean()], [g[2:, :2].mean(), g[2:, 2:].mean()]])
        np.testing.assert_allclose(pooled[0, 0], quads, atol=1e-15)
        assert global_downsample(Tensor(x), p, c).shape == (1, 1, 2, 2)

    def test_step_oracle(self):
        c = cfg(pool_ratio=3)
        p = DfaParams.init(c, make_rng(2))
        p.ln_gamma.data = make_rng(3).normal(size=8)
        x = make_rng(4).normal(size=(1, 8, 8, 8))
        got = global_downsample(Tensor(x), p, c).data
        assert got.shape == (1, 8, 3, 3)
        assert np.abs(got - oracles.global_downsample_steps(x, p, 3, c.ln_eps)).max() < 1e-12


class TestRelPos:
    def test_extremes(self):
        t = build_rel_pos(5, 5, "local", cfg())
        np.testing.assert_array_equal(t.offsets[4 * 5 + 0, 0 * 5 + 4], [1.0, -1.0])

    def test_self_pair_is_zero(self):
        t = build_rel_pos(4, 6, "local", cfg(window=3))
        idx = np.arange(t.offsets.shape[0])
        np.testing.assert_array_equal(t.offsets[idx, idx], 0.0)

    def test_degenerate_axis(self):
        t = build_rel_pos(1, 3, "local", cfg())
        np.testing.assert_array_equal(t.offsets[0, 2], [0.0, -1.0])
        np.testing.assert_array_equal(t.offsets[2, 0], [0.0, 1.0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 9), st.integers(1, 5), st.sampled_from(["local", "global"]))
    def test_components_bounded(self, h, w, win, r, branch):
        t = build_rel_pos(h, w, branch, cfg(window=win, pool_ratio=r))
        assert np.abs(t.offsets).max() <= 1.0

    def test_global_key_centres(self):
        t = build_rel_pos(5, 5, "global", cfg(pool_ratio=2))
        # cell centres 0.5, 2.5, 4 (last clamped); query (0,0) against cell (2,2)
        np.testing.assert_allclose(t.offsets[0, 2 * 3 + 2], [-1.0, -1.0])
        np.testing.assert_allclose(t.offsets[0, 0], [-0.125, -0.125])


class TestBiasMlp:
    def test_constant_mlp(self):
        c = cfg(heads=2)
        mlp = DfaParams.init(c, make_rng(0)).local_mlp
        for t in (mlp.w1, mlp.b1, mlp.w2):
            t.data = np.zeros_like(t.data)
        mlp.b2.data = np.array([0.3, -1.2])
        b = bias_from_mlp(build_rel_pos(3, 3, "local", c), mlp).data
        np.testing.assert_array_equal(b[0], 0.3)
        np.testing.assert_array_equal(b[1], -1.2)

    def test_w2_zero_gives_b2(self):
        c = cfg()
        mlp = DfaParams.init(c, make_rng(1)).global_mlp
        mlp.w2.data = np.zeros_like(mlp.w2.data)
        mlp.b2.data = np.array([0.7])
        np.testing.assert_array_equal(bias_from_mlp(build_rel_pos(4, 4, "global", c), mlp).data, 0.7)

    def test_loop_oracle(self):
        c = cfg(heads=2, window=3)
        mlp = DfaParams.init(c, make_rng(2)).local_mlp
        rng = make_rng(3)
        for t in P.parameters(mlp):
            t.data = rng.normal(size=t.shape)
        table = build_rel_pos(3, 3, "local", c)
        got = bias_from_mlp(table, mlp).data
        assert got.shape == (2, 9, 9)
        for q in range(9):
            for k in range(9):
                want = oracles.mlp_scalar(table.offsets[q, k], mlp.w1.data, mlp.b1.data, mlp.w2.data, mlp.b2.data)
                assert np.abs(got[:, q, k] - want).max() < 1e-12


class TestAttend:
    def test_uniform_within_window(self):
        c = cfg(window=2, pool_ratio=2)
        p = DfaParams.init(c, make_rng(0))
        for mlp in (p.local_mlp, p.global_mlp):
            mlp.w2.data[:] = 0.0
        x = np.ones((1, 8, 4, 4)) * make_rng(1).normal(size=(1, 8, 1, 1))
        trace = {}
        out_l, _ = dfa_attend(Tensor(x), p, c, trace)
        np.testing.assert_allclose(trace["a_local"].data, 0.25, atol=1e-15)
        v = ops.conv2d(Tensor(x), ops.reshape(p.v_local_w, (8, 8, 1, 1)), p.v_local_b, padding=0).data
        means = v.reshape(1, 8, 2, 2, 2, 2).mean(axis=(3, 5))
        np.testing.assert_allclose(out_l.data, np.repeat(np.repeat(means, 2, 2), 2, 3), atol=1e-14)

    def test_single_token(self):
        c = cfg(window=1, pool_ratio=1)
        p = _dfa_with_random_proj(c, 4)
        x = make_rng(5).normal(size=(1, 8, 1, 1))
        trace = {}
        out_l, _ = dfa_attend(Tensor(x), p, c, trace)
        np.testing.assert_array_equal(trace["a_local"].data, 1.0)
        v = p.v_local_w.data @ x[0, :, 0, 0] + p.v_local_b.data
        np.testing.assert_allclose(out_l.data[0, :, 0, 0], v, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("heads,window,pool,shape", [
        (1, 3, 3, (1, 8, 6, 6)), (2, 4, 3, (1, 8, 5, 7)), (4, 2, 2, (2, 8, 3, 5)), (1, 8, 4, (1, 8, 6, 6)),
    ])
    def test_loop_oracle(self, heads, window, pool, shape):
        c = cfg(heads=heads, window=window, pool_ratio=pool)
        p = _dfa_with_random_proj(c, 6)
        x = make_rng(7).normal(size=shape)
        out_l, out_g = dfa_attend(Tensor(x), p, c)
        ol, og = oracles.dfa_attend_loops(x, p, c)
        assert np.abs(out_l.data - ol).max() < 1e-10
        assert np.abs(out_g.data - og).max() < 1e-10

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 9), st.integers(1, 9), st.integers(1, 5), st.integers(1, 4),
           st.sampled_from([1, 2, 4]))
    def test_rows_and_norms(self, seed, h, w, win, r, heads):
        c = cfg(window=win, pool_ratio=r, heads=heads)
        p = _dfa_with_random_proj(c, seed)
        trace = {}
        dfa_attend(Tensor(make_rng(seed + 1).normal(size=(1, 8, h, w))), p, c, trace)
        for key in ("a_local", "a_global"):
            a = trace[key].data
            assert np.abs(a.sum(-1) - 1).max() < 1e-12
        mask = trace["local_mask"]
        valid = np.broadcast_to(mask, trace["a_local"].shape) if mask is not None else slice(None)
        assert (trace["a_local"].data[valid] > 0).all()
        assert (trace["a_global"].data > 0).all()
        for key in ("q_hat_global", "k_hat_global"):
            assert np.abs(np.linalg.norm(trace[key].data, axis=-1) - 1).max() < 1e-10

    def test_locality(self):
        c = cfg(window=3, pool_ratio=2)
        p = _dfa_with_random_proj(c, 8)
        p.proj_w.data[:, 8:] = 0.0
        xa = make_rng(9).normal(size=(1, 8, 6, 6))
        for pos in [(3, 0), (0, 3), (5, 5)]:
            xb = xa.copy()
            xb[0, :, pos[0], pos[1]] += make_rng(10).normal(size=8) * 5
            la, _ = dfa_attend(Tensor(xa), p, c)
            lb, _ = dfa_attend(Tensor(xb), p, c)
            np.testing.assert_array_equal(la.data[..., :3, :3], lb.data[..., :3, :3])
            np.testing.assert_array_equal(dfa_forward(Tensor(xa), p, c).data[..., :3, :3],
                                          dfa_forward(Tensor(xb), p, c).data[..., :3, :3])

    @pytest.mark.parametrize("scale", [2.0, 0.5, 8.0])
    def test_local_scale_invariance_without_bias(self, scale):
        c = cfg(window=3, pool_ratio=2)
        p = _dfa_with_random_proj(c, 11)
        p.q_b.data[:] = 0.0
        p.k_local_b.data[:] = 0.0
        x = make_rng(12).normal(size=(1, 8, 6, 6))
        t1, t2 = {}, {}
        dfa_attend(Tensor(x), p, c, t1)
        dfa_attend(Tensor(scale * x), p, c, t2)
        np.testing.assert_array_equal(t1["a_local"].data, t2["a_local"].data)
        np.testing.assert_array_equal(t1["s_local"].data, t2["s_local"].data)


class TestForward:
    def test_identity_at_init(self):
        c = cfg()
        x = make_rng(0).normal(size=(2, 8, 7, 5))
        np.testing.assert_array_equal(dfa_forward(Tensor(x), DfaParams.init(c, make_rng(1)), c).data, x)

    def test_dropout_zero_matches_eval(self):
        c = cfg(dropout=0.0)
        p = _dfa_with_random_proj(c, 2)
        x = Tensor(make_rng(3).normal(size=(1, 8, 6, 6)))
        np.testing.assert_array_equal(dfa_forward(x, p, c, "train", make_rng(4)).data, dfa_forward(x, p, c, "eval").data)

    def test_train_mode_deterministic(self):
        c = cfg(dropout=0.4)
        p = _dfa_with_random_proj(c, 5)
        x = Tensor(make_rng(6).normal(size=(1, 8, 6, 6)))
        a = dfa_forward(x, p, c, "train", make_rng(7)).data
        np.testing.assert_array_equal(a, dfa_forward(x, p, c, "train", make_rng(7)).data)
        assert not np.array_equal(a, dfa_forward(x, p, c, "eval").data)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 10), st.integers(1, 10), st.integers(1, 10), st.integers(1, 6))
    def test_shape_preserved(self, h, w, win, r):
        c = cfg(window=win, pool_ratio=r)
        p = _dfa_with_random_proj(c, 0)
        assert dfa_forward(Tensor(np.ones((1, 8, h, w))), p, c).shape == (1, 8, h, w)

    @pytest.mark.parametrize("seed", range(10))
    def test_grad_check(self, seed):
        c = cfg()
        p = _dfa_with_random_proj(c, 100 + seed)
        r = make_rng(200 + seed)
        x, wt = r.normal(size=(1, 8, 6, 6)), r.normal(size=(1, 8, 6, 6))
        e = grad_check(lambda t: ops.sum(ops.mul(dfa_forward(t, p, c), wt)), x)
        assert e.passed, e.measured

    def test_parameter_gradients_flow(self):
        c = cfg(dropout=0.0)
        p = _dfa_with_random_proj(c, 13)
        with Graph() as g:
            loss = ops.sum(ops.mul(dfa_forward(Tensor(make_rng(14).normal(size=(1, 8, 4, 4))), p, c), 1.0))
        grads = g.backward(loss)
        missing = [name for name, t in P.named_parameters(p) if t not in grads]
        assert not missing
