import numpy as np
import pytest

from jetmoe import ndauto as nd
from jetmoe.errors import ConfigurationError
from jetmoe.experts import FfdExpertWeights, MoeFfdLayer, ffd_forward, moe_ffd_forward
from jetmoe.ndauto import Tensor, grad_check
from jetmoe.routing import RouterWeights

from oracles import (dense_moe_ffd, grads_of, moe_params, np_dense_moe_ffd, np_ffd, random_moe, rel_err,
                     untied_input)


def test_zero_input_gives_zero():
    w = random_moe(np.random.default_rng(0)).experts[0]
    assert np.all(ffd_forward(Tensor(np.zeros((3, 6))), w).data == 0.0)


def test_scalar_hand_value():
    w = FfdExpertWeights(Tensor([[1.0], [1.0]]), Tensor([[1.0]]))
    assert ffd_forward(Tensor([[1.0]]), w).data[0, 0] == pytest.approx(0.731059, abs=1e-6)


def test_gate_half_comes_first():
    # gate half zero -> silu(0) = 0 kills the output whatever the linear half says
    w = FfdExpertWeights(Tensor([[0.0], [5.0]]), Tensor([[1.0]]))
    assert ffd_forward(Tensor([[1.0]]), w).data[0, 0] == 0.0


def test_matches_numpy():
    rng = np.random.default_rng(1)
    w = random_moe(rng).experts[1]
    x = rng.standard_normal((4, 6))
    np.testing.assert_allclose(ffd_forward(Tensor(x), w).data, np_ffd(x, w.w_in.data, w.w_out.data), rtol=1e-13)


def test_odd_w_in_rejected():
    with pytest.raises(ConfigurationError):
        FfdExpertWeights(Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 1))))


@pytest.mark.parametrize("seed", range(3))
def test_ffd_gradients(seed):
    rng = np.random.default_rng(seed)
    w = random_moe(rng).experts[0]
    x = Tensor(rng.standard_normal((4, 6)))
    r = rng.standard_normal((4, 6))
    for target in (x, w.w_in, w.w_out):
        assert grad_check(lambda _: nd.sum(ffd_forward(x, w) * r), target) <= 1e-5


def test_single_expert_is_plain_ffd():
    rng = np.random.default_rng(2)
    layer = random_moe(rng, n=1, k=1)
    x = Tensor(rng.standard_normal((5, 6)))
    y, _ = moe_ffd_forward(x, layer)
    np.testing.assert_array_equal(y.data, ffd_forward(x, layer.experts[0]).data)


def test_identical_experts_equal_one_expert():
    rng = np.random.default_rng(3)
    layer = random_moe(rng)
    for e in layer.experts[1:]:
        e.w_in, e.w_out = layer.experts[0].w_in, layer.experts[0].w_out
    x = Tensor(rng.standard_normal((7, 6)))
    y, _ = moe_ffd_forward(x, layer)
    np.testing.assert_allclose(y.data, ffd_forward(x, layer.experts[0]).data, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    layer = random_moe(rng)
    x = untied_input(rng, layer.router, layer.k, 9)
    y, _ = moe_ffd_forward(x, layer)
    assert rel_err(y.data, np_dense_moe_ffd(x.data, layer)) <= 1e-8
    r = rng.standard_normal(y.shape)
    params = {**moe_params(layer), "x": x}
    sparse = grads_of(lambda: nd.sum(moe_ffd_forward(x, layer)[0] * r), params)
    dense = grads_of(lambda: nd.sum(dense_moe_ffd(x, layer) * r), params)
    for name in params:
        assert rel_err(sparse[name], dense[name]) <= 1e-8, name


def test_layer_gradient_check():
    rng = np.random.default_rng(7)
    layer = random_moe(rng)
    x = untied_input(rng, layer.router, layer.k, 6, min_margin=1e-2)
    r = rng.standard_normal((6, 6))
    idx0 = np.argsort(-(x.data @ layer.router.w_rtr.data.T), axis=1, kind="stable")[:, :2]

    def f(_):
        y, _ = moe_ffd_forward(x, layer)
        idx = np.argsort(-(x.data @ layer.router.w_rtr.data.T), axis=1, kind="stable")[:, :2]
        assert np.array_equal(idx, idx0), "routing flipped under perturbation"
        return nd.sum(y * r)
    for name, p in {**moe_params(layer), "x": x}.items():
        assert grad_check(f, p) <= 1e-5, name


def test_permutation_equivariance():
    rng = np.random.default_rng(5)
    layer = random_moe(rng)
    x = rng.standard_normal((8, 6))
    perm = rng.permutation(8)
    y, _ = moe_ffd_forward(Tensor(x), layer)
    yp, _ = moe_ffd_forward(Tensor(x[perm]), layer)
    np.testing.assert_allclose(yp.data, y.data[perm], rtol=1e-13, atol=1e-15)


def test_invocation_counts():
    rng = np.random.default_rng(6)
    for t in (1, 3, 16):
        layer = random_moe(rng, n=5, k=2)
        moe_ffd_forward(Tensor(rng.standard_normal((t, 6))), layer)
        assert layer.calls["ffd_forward"] <= min(5, t * 2)
        assert layer.calls["expert_rows"] == 2 * t
        assert layer.last_token_load.tolist() == [2] * t


def test_layer_validation():
    rng = np.random.default_rng(0)
    layer = random_moe(rng)
    with pytest.raises(ConfigurationError):
        MoeFfdLayer(layer.router, layer.experts, 5)
    with pytest.raises(ConfigurationError):
        MoeFfdLayer(RouterWeights(Tensor(np.zeros((3, 6)))), layer.experts, 2)
