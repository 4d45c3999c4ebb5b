from __future__ import annotations

import math

import numpy as np
import pytest

from ammnet import tensor as T
from ammnet.errors import InvariantError
from ammnet.gradcheck import check_module_gradients
from ammnet.nn import (
    AdamW,
    BatchNorm,
    Conv2d,
    Linear,
    ParamStore,
    Parameter,
    batchnorm_forward,
    cosine_factor,
    init_params,
)
from ammnet.tensor import Tensor


def test_linear_identity():
    layer = Linear(3, 3)
    layer.weight.data = np.eye(3, dtype=np.float32)
    layer.bias.data = np.zeros(3, dtype=np.float32)
    x = np.array([[1.0, -2.0, 3.0]], dtype=np.float32)
    np.testing.assert_array_equal(layer(Tensor(x)).data, x)


def test_linear_sum():
    layer = Linear(2, 1)
    layer.weight.data = np.array([[1.0, 1.0]], dtype=np.float32)
    layer.bias.data = np.zeros(1, dtype=np.float32)
    assert layer(Tensor([[3.0, 4.0]])).data.tolist() == [[7.0]]


def test_linear_gradient_of_mean():
    with T.precision("f64"):
        layer = Linear(4, 3).to_dtype(np.float64)
        store = ParamStore.from_module(layer)
        init_params(store, 0)
        x = Tensor(np.random.default_rng(0).uniform(-1, 1, (5, 4)))
        reports = check_module_gradients(lambda: layer(x).mean(), dict(store))
    assert max(r.max_rel_error for r in reports) < 1e-6


def test_param_counts():
    assert Linear(10, 5).param_count() == 55
    assert Conv2d(4, 8, 1).param_count() == 32
    assert BatchNorm(6).param_count() == 12


def test_batchnorm_training_normalizes():
    rng = np.random.default_rng(1)
    with T.precision("f64"):
        bn = BatchNorm(3).to_dtype(np.float64)
        x = Tensor(rng.normal(5.0, 3.0, size=(64, 3)))
        y = batchnorm_forward(bn, x, training=True).data
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-4)


def test_batchnorm_eval_identity_statistics():
    x = np.random.default_rng(2).standard_normal((4, 3, 2, 2)).astype(np.float32)
    bn = BatchNorm(3)
    y = batchnorm_forward(bn, Tensor(x), training=False).data
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), rtol=1e-6)
    np.testing.assert_allclose(y, x, atol=1e-4)


def test_batchnorm_gradient_4x3():
    with T.precision("f64"):
        bn = BatchNorm(3).to_dtype(np.float64)
        bn.gamma.data = np.array([0.5, 1.5, -1.0])
        x = Tensor(np.random.default_rng(3).uniform(-1, 1, (4, 3)), requires_grad=True)
        params = {"x": x, **dict(ParamStore.from_module(bn))}
        reports = check_module_gradients(lambda: batchnorm_forward(bn, x, True), params)
    assert max(r.max_rel_error for r in reports) < 1e-4


def test_batchnorm_running_stats_update():
    bn = BatchNorm(2)
    x = np.array([[1.0, 10.0], [3.0, 20.0]], dtype=np.float32)
    batchnorm_forward(bn, Tensor(x), training=True)
    np.testing.assert_allclose(bn.running_mean, [0.2, 1.5], rtol=1e-6)
    # unbiased variance of [1, 3] is 2, of [10, 20] is 50
    np.testing.assert_allclose(bn.running_var, [0.9 + 0.2, 0.9 + 5.0], rtol=1e-6)


def test_adamw_zero_gradient_is_fixed_point():
    p = Parameter(np.array([1.0, -2.0], dtype=np.float32))
    opt = AdamW(ParamStore(p=p), lr=0.1, weight_decay=0.0)
    opt.step({"p": np.zeros(2, dtype=np.float32)})
    assert p.data.tolist() == [1.0, -2.0]


def test_adamw_first_step_by_hand():
    with T.precision("f64"):
        p = Parameter(np.array([1.0]))
        opt = AdamW(ParamStore(p=p), lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
        opt.step({"p": np.array([1.0])})
    # m̂ = 1, v̂ = 1, update = lr · 1 / (1 + eps)
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-12)
    assert p.data[0] == pytest.approx(0.9, abs=1e-7)


def test_adamw_decoupled_weight_decay():
    with T.precision("f64"):
        p = Parameter(np.array([2.0]))
        opt = AdamW(ParamStore(p=p), lr=0.1, weight_decay=0.5)
        opt.step({"p": np.array([0.0])})
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-12)


def test_adamw_missing_gradient_names_parameter():
    store = ParamStore(a=Parameter(np.zeros(1)), b=Parameter(np.zeros(1)))
    with pytest.raises(InvariantError, match="'b'"):
        AdamW(store).step({"a": np.zeros(1)})


def test_cosine_schedule():
    assert cosine_factor(0, 10) == 1.0
    assert abs(cosine_factor(5, 10) - 0.5) < 1e-9
    assert cosine_factor(10, 10) == pytest.approx(0.0, abs=1e-12)
    assert all(cosine_factor(t, 10) >= cosine_factor(t + 1, 10) for t in range(10))


def test_param_store_rejects_duplicates():
    store = ParamStore(a=Parameter(np.zeros(1)))
    with pytest.raises(InvariantError):
        store["a"] = Parameter(np.zeros(1))


def test_init_is_seeded():
    def make(seed):
        layer = Conv2d(8, 8, 3)
        init_params(ParamStore.from_module(layer), seed)
        return layer.weight.data.copy()

    assert np.array_equal(make(1), make(1))
    assert not np.array_equal(make(1), make(2))


def test_init_variance_matches_fan_in():
    layer = Linear(1000, 1000)
    init_params(ParamStore.from_module(layer), 0)
    target = 2.0 / 1000
    assert abs(layer.weight.data.var() / target - 1.0) < 0.10


def test_state_dict_round_trip():
    a, b = Conv2d(3, 4, 3, bias=True), Conv2d(3, 4, 3, bias=True)
    init_params(ParamStore.from_module(a), 0)
    init_params(ParamStore.from_module(b), 1)
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    with pytest.raises(InvariantError):
        Conv2d(3, 5, 3, bias=True).load_state_dict(a.state_dict())


def test_state_dict_is_a_snapshot():
    layer = Linear(2, 2)
    snap = layer.state_dict()
    layer.weight.data += 1.0
    assert not np.array_equal(snap["weight"], layer.weight.data)


def test_kaiming_scale_is_sqrt_two_over_fan_in():
    conv = Conv2d(16, 4, 3)
    init_params(ParamStore.from_module(conv), 3)
    assert conv.weight.fan_in == 16 * 9
    assert abs(conv.weight.data.std() - math.sqrt(2 / 144)) < 0.03
