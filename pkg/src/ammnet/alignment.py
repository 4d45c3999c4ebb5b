"""Distribution alignment between DSM and RGB latents.

Features are mapped to a mean and a log-variance, sampled with the
reparameterization ``z = mu + sigma * eps`` (``sigma = exp(logvar / 2)``),
turned into discrete distributions by a softmax over the latent axis, and
compared with KL(p_dsm || p_rgb).  The RGB side is a fixed target: its
probabilities are detached, so the loss only trains the DSM branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, InvariantError, NumericError
from .nn import Linear, Module, linear_forward
from .tensor import Tensor

PROB_FLOOR = 1e-12


class LatentMapper(Module):
    def __init__(self, in_features: int, latent_len: int):
        super().__init__()
        self.in_features = in_features
        self.latent_len = latent_len
        self.to_mu = Linear(in_features, latent_len)
        self.to_logvar = Linear(in_features, latent_len)


@dataclass
class LatentPair:
    mu: Tensor
    sigma: Tensor
    z: Tensor
    eps: np.ndarray


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def latent_map(f, lm: LatentMapper, rng_seed) -> LatentPair:
    f = T.as_tensor(f)
    if f.ndim != 2 or f.shape[1] != lm.in_features:
        raise DimensionError(f"latent mapper expects B×{lm.in_features} input, got {f.shape}")
    mu = linear_forward(lm.to_mu, f)
    sigma = T.exp(linear_forward(lm.to_logvar, f) * 0.5)
    eps = _rng(rng_seed).standard_normal(mu.shape).astype(mu.dtype)
    z = mu + sigma * T.Tensor(eps, dtype=mu.dtype)
    return LatentPair(mu, sigma, z, eps)


def latent_to_probs(z) -> Tensor:
    z = T.as_tensor(z)
    if np.isnan(z.data).any():
        raise NumericError("latent variables contain NaN")
    return T.softmax(z, axis=-1)


def _check_stochastic(p: Tensor, label: str, tol: float = 1e-4) -> None:
    rows = p.data.sum(axis=-1)
    if (p.data < -tol).any() or np.abs(rows - 1.0).max() > tol:
        raise InvariantError(f"{label} rows are not probability vectors (max row-sum error {np.abs(rows - 1).max():.3g})")


def alignment_loss(p_dsm, p_rgb) -> Tensor:
    """Batch mean of KL(p_dsm || p_rgb); the RGB distribution is detached."""
    p_dsm, p_rgb = T.as_tensor(p_dsm), T.as_tensor(p_rgb)
    if p_dsm.shape != p_rgb.shape:
        raise DimensionError(f"distribution shapes differ: {p_dsm.shape} vs {p_rgb.shape}")
    _check_stochastic(p_dsm, "p_dsm")
    _check_stochastic(p_rgb, "p_rgb")
    target = p_rgb.detach()
    log_ratio = T.log(T.clamp_min(p_dsm, PROB_FLOOR)) - T.log(T.clamp_min(target, PROB_FLOOR))
    kl = (p_dsm * log_ratio).sum(axis=-1)
    return kl.mean()


def da_forward(f_rgb, f_dsm, lm_rgb: LatentMapper, lm_dsm: LatentMapper, seed, shared_noise: bool = False):
    """Returns ``(loss, rgb_pair, dsm_pair)``; the loss is KL(dsm || rgb)."""
    rng = _rng(seed)
    if shared_noise:
        state = rng.bit_generator.state
        rgb = latent_map(f_rgb, lm_rgb, rng)
        rng.bit_generator.state = state
        dsm = latent_map(f_dsm, lm_dsm, rng)
    else:
        rgb = latent_map(f_rgb, lm_rgb, rng)
        dsm = latent_map(f_dsm, lm_dsm, rng)
    loss = alignment_loss(latent_to_probs(dsm.z), latent_to_probs(rgb.z))
    return loss, rgb, dsm
