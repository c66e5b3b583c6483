"""Central finite-difference gradient oracle.

Independent of the autodiff path: it only ever calls the forward function,
perturbing one input element at a time in float64.
"""

from __future__ import annotations

import numpy as np


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f`` at ``x`` (float64)."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-9) -> float:
    """Worst-case relative error, with an absolute floor for near-zero pairs."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor / 1e-5)
    return float((diff / scale).max()) if diff.size else 0.0


def assert_grad_matches(f, x: np.ndarray, analytic: np.ndarray, rtol: float = 1e-5,
                        h: float = 1e-5) -> None:
    numeric = numerical_grad(f, x, h=h)
    err = max_rel_error(analytic, numeric)
    assert err < rtol, f"gradient mismatch: max relative error {err:.3e} >= {rtol:.0e}"
