"""Asymmetric prior fusion of RGB and DSM tokens, plus the concat baseline.

Tokens are the spatial cells of the final encoder stage, laid out N×c
(or B×N×c for a batch).  Two linear residual mappers keep the contextual
(RGB) and structural (DSM) features; a semantic enhancer (linear, batch norm,
ReLU) runs on the RGB side only.  The prior is a row-stochastic N×N matrix

    prior = softmax_rows(f_sem @ f_str.T / sqrt(d))

and the fused tokens are ``prior @ f_con``, so every fused token is a convex
combination of contextual tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import profiler as _prof
from . import tensor as T
from .errors import DimensionError
from .nn import BatchNorm, Conv2d, Linear, Module, batchnorm_forward, linear_forward
from .tensor import Tensor


def to_tokens(fmap: Tensor) -> Tensor:
    """B×C×H×W feature map to B×N×C tokens (row-major cells)."""
    B, C, H, W = fmap.shape
    return fmap.transpose(0, 2, 3, 1).reshape(B, H * W, C)


def from_tokens(tokens: Tensor, h: int, w: int) -> Tensor:
    B, N, C = tokens.shape
    if N != h * w:
        raise DimensionError(f"{N} tokens cannot be laid out as {h}×{w}")
    return tokens.reshape(B, h, w, C).transpose(0, 3, 1, 2)


class SemanticEnhancer(Module):
    def __init__(self, c_in: int, d: int):
        super().__init__()
        self.linear = Linear(c_in, d)
        self.bn = BatchNorm(d)


class ApfWeights(Module):
    def __init__(self, c1: int, d: int):
        super().__init__()
        self.c1, self.d = c1, d
        self.rm_rgb = Linear(c1, d)
        self.rm_dsm = Linear(c1, d)
        self.se = SemanticEnhancer(c1, d)

    def forward(self, f_rgb: Tensor, f_dsm: Tensor, training: bool | None = None) -> "FusionBundle":
        return apf_forward(f_rgb, f_dsm, self, self.training if training is None else training)


@dataclass
class FusionBundle:
    f_con: Tensor
    f_str: Tensor
    f_sem: Tensor
    f_prior: Tensor
    f_fuse: Tensor

    @property
    def d_str(self) -> int:
        return self.f_str.shape[-1]


def residual_map(x, rm: Linear) -> Tensor:
    """Linear retention of modality features: tokens (…, N, c₁) to (…, N, d)."""
    x = T.as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"residual_map expects token layout N×c, got {x.shape}")
    return linear_forward(rm, x)


def semantic_enhance(x_rgb, se: SemanticEnhancer, training: bool) -> Tensor:
    x_rgb = T.as_tensor(x_rgb)
    if x_rgb.ndim < 2:
        raise DimensionError(f"semantic_enhance expects token layout N×c, got {x_rgb.shape}")
    h = linear_forward(se.linear, x_rgb)
    lead = h.shape[:-1]
    flat = h.reshape(-1, h.shape[-1]) if h.ndim != 2 else h
    out = T.relu(batchnorm_forward(se.bn, flat, training))
    if _prof.active():
        _prof.record(f"{_prof._names.get(id(se), 'se')}.relu", "relu", out.size, 0, out.shape)
    return out.reshape(lead + (h.shape[-1],)) if h.ndim != 2 else out


def prior_matrix(f_sem, f_str) -> Tensor:
    f_sem, f_str = T.as_tensor(f_sem), T.as_tensor(f_str)
    if f_sem.shape != f_str.shape:
        raise DimensionError(f"f_sem {f_sem.shape} and f_str {f_str.shape} must share token count and width")
    d = f_str.shape[-1]
    if d < 1:
        raise DimensionError("feature width must be at least 1")
    axes = tuple(range(f_str.ndim - 2)) + (f_str.ndim - 1, f_str.ndim - 2)
    logits = T.matmul(f_sem, f_str.transpose(axes)) * (1.0 / math.sqrt(d))
    prior = T.softmax_rows(logits)
    if _prof.active():
        n = f_sem.shape[-2]
        batch = f_sem.size // (n * d)
        _prof.record("apf.prior", "matmul", batch * (2 * n * n * d + n * n + 3 * n * n), 0, prior.shape)
    return prior


def fuse(f_prior, f_con) -> Tensor:
    f_prior, f_con = T.as_tensor(f_prior), T.as_tensor(f_con)
    n = f_con.shape[-2]
    if f_prior.shape[-1] != n or f_prior.shape[-2] != n or f_prior.shape[:-2] != f_con.shape[:-2]:
        raise DimensionError(f"prior {f_prior.shape} cannot be applied to contextual tokens {f_con.shape}")
    out = T.matmul(f_prior, f_con)
    if _prof.active():
        batch = f_con.size // (n * f_con.shape[-1])
        _prof.record("apf.fuse", "matmul", batch * 2 * n * n * f_con.shape[-1], 0, out.shape)
    return out


def apf_forward(f_rgb, f_dsm, w: ApfWeights, training: bool = False) -> FusionBundle:
    f_rgb, f_dsm = T.as_tensor(f_rgb), T.as_tensor(f_dsm)
    if f_rgb.shape != f_dsm.shape:
        raise DimensionError(f"APF inputs must be channel-matched: {f_rgb.shape} vs {f_dsm.shape}")
    f_con = residual_map(f_rgb, w.rm_rgb)
    f_str = residual_map(f_dsm, w.rm_dsm)
    f_sem = semantic_enhance(f_rgb, w.se, training)
    f_prior = prior_matrix(f_sem, f_str)
    return FusionBundle(f_con, f_str, f_sem, f_prior, fuse(f_prior, f_con))


class ConcatFusion(Module):
    """Naive baseline: channel concatenation followed by a 1×1 convolution."""

    def __init__(self, c1: int, d: int):
        super().__init__()
        self.conv = Conv2d(2 * c1, d, 1, bias=True)

    def forward(self, f_rgb: Tensor, f_dsm: Tensor) -> Tensor:
        return self.conv(T.concat([f_rgb, f_dsm], axis=1))
