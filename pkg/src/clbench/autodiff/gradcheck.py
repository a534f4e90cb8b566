"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Union

import numpy as np

from ..errors import ParameterError
from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: tuple = ()

    def __bool__(self):
        return self.passed


def rel_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(f: Callable, point: Union[np.ndarray, Mapping[str, np.ndarray]],
               eps: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    """Compare ``backward`` against ``(f(x+eps) - f(x-eps)) / (2 eps)``.

    ``point`` is either one array (``f`` receives a Tensor) or a dict of
    arrays (``f`` receives a dict of Tensors with the same keys).
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    single = not isinstance(point, Mapping)
    base: Dict[str, np.ndarray] = {"x": np.asarray(point, dtype=np.float64)} if single else {
        k: np.asarray(v, dtype=np.float64) for k, v in point.items()}

    def call(arrays, track):
        ts = {k: Tensor(v.copy(), requires_grad=track, name=k) for k, v in arrays.items()}
        return f(ts["x"] if single else ts), ts

    loss, ts = call(base, True)
    analytic = backward(loss, params=ts.values())

    worst_err, worst_at = 0.0, ()
    with no_grad():
        for key, arr in base.items():
            for idx in np.ndindex(arr.shape):
                plus = dict(base)
                minus = dict(base)
                plus[key] = arr.copy()
                minus[key] = arr.copy()
                plus[key][idx] += eps
                minus[key][idx] -= eps
                fp = call(plus, False)[0].item()
                fm = call(minus, False)[0].item()
                numeric = (fp - fm) / (2 * eps)
                err = float(rel_error(analytic[key][idx], numeric))
                if err > worst_err:
                    worst_err, worst_at = err, (key, idx)
    return GradCheckReport(worst_err, worst_err < tol, worst_at)
