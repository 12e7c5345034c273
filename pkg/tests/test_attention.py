import math

import numpy as np
import pytest

from jetmoe import ndauto as nd
from jetmoe.attention import (MoaExpertWeights, MoaLayer, RopeTable, apply_rope, attend, moa_forward, mha)
from jetmoe.errors import ConfigurationError, DimensionError, RangeError
from jetmoe.ndauto import Tensor, grad_check

from oracles import (dense_moa, grads_of, moa_params, np_causal_mha, np_dense_moa, np_rope, random_moa,
                     rel_err, untied_input)


class TestRope:
    def test_table_row_zero(self):
        tb = RopeTable(8, 4)
        assert np.all(tb.cos[0] == 1.0) and np.all(tb.sin[0] == 0.0)

    def test_angles(self):
        tb = RopeTable(8, 10)
        j = np.arange(4)
        np.testing.assert_allclose(tb.angles[7], 7 * 10000.0 ** (-2 * j / 8), rtol=1e-15)

    def test_position_zero_is_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 3, 8))
        out = apply_rope(Tensor(x), [0], RopeTable(8, 4)).data
        assert np.array_equal(out, x)

    def test_matches_direct_rotation(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 2, 6))
        pos = np.array([0, 3, 1, 4, 2])
        np.testing.assert_allclose(apply_rope(Tensor(x), pos, RopeTable(6, 8)).data, np_rope(x, pos),
                                   rtol=1e-13, atol=1e-15)

    def test_pair_norms_preserved(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((64, 2, 16))
        out = apply_rope(Tensor(x), np.arange(64), RopeTable(16, 64)).data
        pn = lambda a: np.hypot(a[..., 0::2], a[..., 1::2])  # noqa: E731
        assert np.max(np.abs(pn(out) - pn(x))) <= 1e-12

    def test_relative_position(self):
        rng = np.random.default_rng(3)
        tb = RopeTable(16, 32)
        q, k = rng.standard_normal(16), rng.standard_normal(16)

        def rot(v, m):
            return apply_rope(Tensor(v[None, None, :]), [m], tb).data[0, 0]
        for m in range(32):
            for n in range(0, m + 1):
                assert abs(rot(q, m) @ rot(k, n) - rot(q, m - n) @ k) <= 1e-9

    def test_errors(self):
        with pytest.raises(ConfigurationError):
            RopeTable(7, 4)
        with pytest.raises(RangeError):
            apply_rope(Tensor(np.zeros((1, 1, 4))), [4], RopeTable(4, 4))
        with pytest.raises(ConfigurationError):
            apply_rope(Tensor(np.zeros((1, 1, 5))), [0], RopeTable(4, 4))

    def test_gradient(self):
        x = Tensor(np.random.default_rng(4).standard_normal((4, 2, 6)))
        r = np.random.default_rng(5).standard_normal((4, 2, 6))
        assert grad_check(lambda z: nd.sum(apply_rope(z, np.arange(4), RopeTable(6, 4)) * r), x) <= 1e-5


class TestMha:
    def test_single_position_returns_v(self):
        rng = np.random.default_rng(0)
        q, k, v = (Tensor(rng.standard_normal((1, 2, 4))) for _ in range(3))
        np.testing.assert_allclose(mha(q, k, v).data, v.data.reshape(1, 8), rtol=1e-15)

    def test_identical_values(self):
        rng = np.random.default_rng(1)
        q, k = Tensor(rng.standard_normal((5, 2, 3))), Tensor(rng.standard_normal((5, 2, 3)))
        row = rng.standard_normal((1, 2, 3))
        out = mha(q, k, Tensor(np.repeat(row, 5, axis=0))).data
        np.testing.assert_allclose(out, np.repeat(row.reshape(1, 6), 5, axis=0), rtol=1e-13)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        q, k, v = (rng.standard_normal((6, 3, 4)) for _ in range(3))
        np.testing.assert_allclose(mha(Tensor(q), Tensor(k), Tensor(v)).data, np_causal_mha(q, k, v),
                                   rtol=1e-12, atol=1e-14)

    def test_causality_exact(self):
        rng = np.random.default_rng(3)
        q, k, v = (rng.standard_normal((6, 2, 4)) for _ in range(3))
        base = mha(Tensor(q), Tensor(k), Tensor(v)).data
        for t in range(5):
            q2, k2, v2 = q.copy(), k.copy(), v.copy()
            for a in (q2, k2, v2):
                a[t + 1:] += rng.standard_normal(a[t + 1:].shape)
            out = mha(Tensor(q2), Tensor(k2), Tensor(v2)).data
            assert np.array_equal(out[: t + 1], base[: t + 1])

    def test_attention_rows_normalized(self):
        rng = np.random.default_rng(4)
        q, k = rng.standard_normal((2, 5, 3)), rng.standard_normal((2, 5, 3))
        eye = np.broadcast_to(np.eye(5), (2, 5, 5)).copy()
        probs = attend(Tensor(q), Tensor(k), Tensor(eye)).data
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(np.triu(probs[0], 1) == 0)

    def test_non_causal(self):
        rng = np.random.default_rng(5)
        q, k, v = (rng.standard_normal((3, 1, 2)) for _ in range(3))
        s = (q[:, 0] @ k[:, 0].T) / math.sqrt(2)
        p = np.exp(s - s.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        np.testing.assert_allclose(mha(Tensor(q), Tensor(k), Tensor(v), causal=False).data, p @ v[:, 0],
                                   rtol=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mha(Tensor(np.zeros((2, 1, 4))), Tensor(np.zeros((3, 1, 4))), Tensor(np.zeros((3, 1, 4))))

    def test_gradients(self):
        rng = np.random.default_rng(6)
        q, k, v = (Tensor(rng.standard_normal((5, 2, 3))) for _ in range(3))
        r = rng.standard_normal((5, 6))
        for target in (q, k, v):
            assert grad_check(lambda _: nd.sum(mha(q, k, v) * r), target) <= 1e-5


class TestMoa:
    def test_single_expert_is_standard_block(self):
        rng = np.random.default_rng(0)
        layer = random_moa(rng, n=1, k=1)
        tb = RopeTable(4, 16)
        x = rng.standard_normal((6, 6))
        y, _ = moa_forward(Tensor(x), layer, tb)
        pos = np.arange(6)
        q = np_rope((x @ layer.experts[0].w_q.data.T).reshape(6, 2, 4), pos)
        k = np_rope((x @ layer.shared.w_k.data.T).reshape(6, 2, 4), pos)
        v = (x @ layer.shared.w_v.data.T).reshape(6, 2, 4)
        np.testing.assert_allclose(y.data, np_causal_mha(q, k, v) @ layer.experts[0].w_o.data.T,
                                   rtol=1e-12, atol=1e-14)

    def test_identical_experts(self):
        rng = np.random.default_rng(1)
        layer = random_moa(rng)
        e0 = layer.experts[0]
        layer.experts = [MoaExpertWeights(e0.w_q, e0.w_o) for _ in layer.experts]
        single = MoaLayer(layer.router, layer.shared, [e0] * 4, 1, 2, 4)
        tb = RopeTable(4, 16)
        x = Tensor(rng.standard_normal((7, 6)))
        np.testing.assert_allclose(moa_forward(x, layer, tb)[0].data, moa_forward(x, single, tb)[0].data,
                                   rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        layer = random_moa(rng)
        tb = RopeTable(4, 16)
        x = untied_input(rng, layer.router, layer.k, 8)
        y, _ = moa_forward(x, layer, tb)
        assert rel_err(y.data, np_dense_moa(x.data, layer)) <= 1e-8
        r = rng.standard_normal(y.shape)
        params = {**moa_params(layer), "x": x}
        sparse = grads_of(lambda: nd.sum(moa_forward(x, layer, tb)[0] * r), params)
        dense = grads_of(lambda: nd.sum(dense_moa(x, layer, tb) * r), params)
        for name in params:
            assert rel_err(sparse[name], dense[name]) <= 1e-8, name

    def test_batched_equals_per_sequence(self):
        rng = np.random.default_rng(2)
        layer = random_moa(rng)
        tb = RopeTable(4, 16)
        x = rng.standard_normal((3, 5, 6))
        yb, _ = moa_forward(Tensor(x), layer, tb)
        for i in range(3):
            np.testing.assert_allclose(yb.data[i], moa_forward(Tensor(x[i]), layer, tb)[0].data,
                                       rtol=1e-12, atol=1e-14)

    def test_shared_kv_computed_once(self):
        rng = np.random.default_rng(3)
        for n, k in ((1, 1), (4, 2), (8, 8)):
            layer = random_moa(rng, n=n, k=k)
            moa_forward(Tensor(rng.standard_normal((2, 9, 6))), layer, RopeTable(4, 16))
            assert layer.calls["kv_proj"] == 1
            assert layer.calls["expert_rows"] == 18 * k
            assert np.all(layer.last_token_load == k)

    def test_causality(self):
        rng = np.random.default_rng(4)
        layer = random_moa(rng)
        tb = RopeTable(4, 16)
        x = rng.standard_normal((8, 6))
        base = moa_forward(Tensor(x), layer, tb)[0].data
        x2 = x.copy()
        x2[5:] = rng.standard_normal((3, 6))
        assert np.array_equal(moa_forward(Tensor(x2), layer, tb)[0].data[:5], base[:5])

    def test_layer_gradient_check(self):
        rng = np.random.default_rng(5)
        layer = random_moa(rng)
        tb = RopeTable(4, 16)
        x = untied_input(rng, layer.router, layer.k, 5, min_margin=1e-2)
        r = rng.standard_normal((5, 6))
        idx0 = np.argsort(-(x.data @ layer.router.w_rtr.data.T), axis=1, kind="stable")[:, :2]

        def f(_):
            idx = np.argsort(-(x.data @ layer.router.w_rtr.data.T), axis=1, kind="stable")[:, :2]
            assert np.array_equal(idx, idx0), "routing flipped under perturbation"
            return nd.sum(moa_forward(x, layer, tb)[0] * r)
        for name, p in {**moa_params(layer), "x": x}.items():
            assert grad_check(f, p) <= 1e-5, name
