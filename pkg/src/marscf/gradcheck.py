"""Central-difference oracles used by the test suite."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    if isinstance(value, (list, tuple)):
        return np.concatenate([_as_array(v).reshape(-1) for v in value])
    return np.asarray(value, dtype=np.float64)


def finite_diff_jacobian(f, x, eps: float = 1e-5) -> np.ndarray:
    """Jacobian of ``f`` at ``x`` by central differences, shape ``[out, in]``.

    ``f`` receives an array shaped like ``x`` and may return an array, a
    Tensor or a sequence of them (flattened and concatenated in order).
    """
    x0 = np.array(_as_array(x), dtype=np.float64)
    flat = x0.reshape(-1)
    columns = []
    with no_grad():
        for i in range(flat.size):
            xp, xm = flat.copy(), flat.copy()
            xp[i] += eps
            xm[i] -= eps
            fp = _as_array(f(xp.reshape(x0.shape))).reshape(-1)
            fm = _as_array(f(xm.reshape(x0.shape))).reshape(-1)
            columns.append((fp - fm) / (2.0 * eps))
    return np.stack(columns, axis=1)


def finite_diff_grad(f, x, eps: float = 1e-5) -> np.ndarray:
    """Gradient of a scalar-valued ``f`` by central differences."""
    x0 = np.array(_as_array(x), dtype=np.float64)
    return finite_diff_jacobian(f, x0, eps).reshape(x0.shape)


def log_abs_det(jacobian: np.ndarray) -> float:
    sign, value = np.linalg.slogdet(jacobian)
    if sign == 0:
        return -np.inf
    return float(value)
