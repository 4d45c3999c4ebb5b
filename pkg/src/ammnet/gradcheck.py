"""Central finite-difference gradient checks for the autograd engine.

Relative error is normwise: ``max|a - n| / max(max|a|, max|n|, SCALE_FLOOR)``.
Elementwise ratios blow up on entries whose true gradient is near zero,
which says nothing about the correctness of the backward rule.  The floor
covers tensors whose gradient is identically zero (a bias feeding a
training-mode batch norm, a shift that softmax cancels): there the check
degrades to an absolute bound on the finite-difference round-off.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray


SCALE_FLOOR = 1e-4


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)), SCALE_FLOOR)
    return float(np.abs(a - n).max(initial=0.0)) / scale


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    projection_seed: int = 0,
) -> list[GradReport]:
    """Compare backward against central differences of ``sum(fn(*xs) * R)``.

    ``R`` is a fixed random projection so that non-scalar outputs exercise
    every output element.  Runs in float64.
    """
    with T.precision("f64"):
        leaves = {f"x{i}": Tensor(np.array(a, dtype=np.float64), requires_grad=True) for i, a in enumerate(inputs)}
        return check_module_gradients(lambda: fn(*leaves.values()), leaves, step, projection_seed)


def check_module_gradients(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    projection_seed: int = 0,
) -> list[GradReport]:
    """Gradient check for a closure over existing leaf tensors (module parameters or inputs).

    Each tensor in ``params`` must already hold float64 data and
    ``requires_grad=True``.
    """
    with T.precision("f64"):
        rng = np.random.default_rng(projection_seed)
        for p in params.values():
            p.grad = None
        out = T.as_tensor(fn())
        proj = Tensor(rng.standard_normal(out.shape))
        T.tsum(out * proj).backward()
        analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

        def scalar() -> float:
            with T.no_grad():
                return float(np.sum(T.as_tensor(fn()).data * proj.data))

        reports = []
        for k, p in params.items():
            n = numeric_grad(scalar, p.data, step)
            reports.append(GradReport(k, relative_error(analytic[k], n), analytic[k], n))
        return reports
