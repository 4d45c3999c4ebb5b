from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ammnet import tensor as T
from ammnet.alignment import LatentMapper, alignment_loss, da_forward, latent_map, latent_to_probs
from ammnet.errors import DimensionError, InvariantError, NumericError
from ammnet.gradcheck import check_module_gradients
from ammnet.nn import ParamStore, init_params
from ammnet.tensor import Tensor


def _fixed_mapper(in_features, latent_len, mu, logvar, dtype=np.float64):
    lm = LatentMapper(in_features, latent_len).to_dtype(dtype)
    lm.to_mu.weight.data[:] = 0
    lm.to_mu.bias.data[:] = mu
    lm.to_logvar.weight.data[:] = 0
    lm.to_logvar.bias.data[:] = logvar
    return lm


def test_degenerate_noise_returns_mean():
    with T.precision("f64"):
        lm = _fixed_mapper(3, 4, 0.7, -40.0)
        pair = latent_map(Tensor(np.ones((2, 3))), lm, 0)
    np.testing.assert_allclose(pair.z.data, pair.mu.data, atol=1e-8)


def test_fixed_seed_reproduces_noise():
    lm = LatentMapper(4, 6)
    init_params(ParamStore.from_module(lm), 0)
    f = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    a, b = latent_map(f, lm, 11), latent_map(f, lm, 11)
    assert np.array_equal(a.eps, b.eps) and np.array_equal(a.z.data, b.z.data)


def test_reparameterized_moments():
    with T.precision("f64"):
        lm = _fixed_mapper(2, 1, 1.0, 2 * math.log(2.0))
        pair = latent_map(Tensor(np.zeros((10_000, 2))), lm, 2024)
    z = pair.z.data[:, 0]
    assert abs(z.mean() - 1.0) < 0.06
    assert abs(z.std() - 2.0) < 0.06


def test_latent_mapper_rejects_wrong_width():
    with pytest.raises(DimensionError):
        latent_map(Tensor(np.zeros((2, 5))), LatentMapper(4, 3), 0)


def test_probs_uniform_for_equal_latents():
    np.testing.assert_allclose(latent_to_probs(Tensor(np.full((2, 8), 3.0))).data, 1 / 8, rtol=1e-6)


def test_probs_hand_example():
    with T.precision("f64"):
        p = latent_to_probs(Tensor([[math.log(2), math.log(1)]])).data
    np.testing.assert_allclose(p, [[2 / 3, 1 / 3]], rtol=1e-12)


def test_probs_nan_is_numeric_error():
    with pytest.raises(NumericError):
        latent_to_probs(Tensor([[np.nan, 0.0]]))


def test_kl_identity_is_zero():
    p = np.random.default_rng(1).dirichlet(np.ones(6), size=4)
    with T.precision("f64"):
        assert abs(float(alignment_loss(Tensor(p), Tensor(p)).data)) < 1e-9


def test_kl_hand_example():
    with T.precision("f64"):
        kl = float(alignment_loss(Tensor([[1.0, 0.0]]), Tensor([[0.5, 0.5]])).data)
    assert kl == pytest.approx(math.log(2), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 16), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_kl_non_negative(length, batch, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(length, 0.5), size=batch)
    q = rng.dirichlet(np.full(length, 0.5), size=batch)
    with T.precision("f64"):
        assert float(alignment_loss(Tensor(p), Tensor(q)).data) >= -1e-12


def test_kl_rejects_non_stochastic_rows():
    with pytest.raises(InvariantError):
        alignment_loss(Tensor([[0.7, 0.7]]), Tensor([[0.5, 0.5]]))


def test_shared_weights_and_noise_give_zero_loss():
    lm = LatentMapper(5, 8)
    init_params(ParamStore.from_module(lm), 0)
    f = Tensor(np.random.default_rng(2).standard_normal((3, 5)))
    loss, _, _ = da_forward(f, f, lm, lm, seed=5, shared_noise=True)
    assert abs(float(loss.data)) < 1e-6


def test_detached_rgb_side_gets_no_gradient():
    lm_rgb, lm_dsm = LatentMapper(5, 8), LatentMapper(5, 8)
    init_params(ParamStore.from_module(lm_rgb), 0)
    init_params(ParamStore.from_module(lm_dsm), 1)
    rng = np.random.default_rng(3)
    loss, _, _ = da_forward(Tensor(rng.standard_normal((4, 5))), Tensor(rng.standard_normal((4, 5))), lm_rgb, lm_dsm, seed=0)
    loss.backward()
    for p in lm_rgb.parameters():
        assert p.grad is None or not np.any(p.grad)
    assert any(p.grad is not None and np.abs(p.grad).max() > 0 for p in lm_dsm.parameters())


def test_alignment_gradient_wrt_dsm_mapper():
    with T.precision("f64"):
        lm_rgb, lm_dsm = LatentMapper(4, 5).to_dtype(np.float64), LatentMapper(4, 5).to_dtype(np.float64)
        init_params(ParamStore.from_module(lm_rgb), 0)
        store = ParamStore.from_module(lm_dsm)
        init_params(store, 1)
        rng = np.random.default_rng(4)
        f_rgb = Tensor(rng.uniform(-1, 1, (3, 4)))
        f_dsm = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        reports = check_module_gradients(
            lambda: da_forward(f_rgb, f_dsm, lm_rgb, lm_dsm, seed=9)[0], {"f_dsm": f_dsm, **store}
        )
    assert max(r.max_rel_error for r in reports) < 1e-4
