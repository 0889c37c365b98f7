"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .autodiff import Parameter


def numerical_gradient(f: Callable[[], float], params: Iterable[Parameter],
                       h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of the scalar ``f()`` with respect to each parameter.

    ``f`` must read parameter values at call time; each element is perturbed
    in place and restored afterwards.
    """
    out = {}
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = f()
            flat[k] = orig - h
            fm = f()
            flat[k] = orig
            gflat[k] = (fp - fm) / (2.0 * h)
        out[p.name] = g
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       abs_floor: float = 1e-8) -> float:
    """Largest relative error; entries with |analytic| < ``abs_floor`` are compared absolutely.

    An absolutely compared entry contributes 0 when within the floor and
    ``inf`` otherwise, so a single bad entry fails any relative threshold.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    small = np.abs(a) < abs_floor
    worst = 0.0
    if np.any(small):
        if np.any(np.abs(a[small] - n[small]) >= abs_floor):
            return float("inf")
    big = ~small
    if np.any(big):
        rel = np.abs(a[big] - n[big]) / np.maximum(np.abs(a[big]), np.abs(n[big]))
        worst = float(rel.max())
    return worst
