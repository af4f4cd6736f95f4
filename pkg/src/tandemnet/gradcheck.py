"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .tensor import Tensor, fresh_tape, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from dominating the
    maximum through round-off in the finite difference.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            plus = _scalar(f())
            flat[k] = orig - eps
            minus = _scalar(f())
            flat[k] = orig
            gflat[k] = (plus - minus) / (2.0 * eps)
    return grad


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.requires_grad = True
        p.grad = np.zeros_like(p.data)
    with fresh_tape() as tape:
        out = f()
        _scalar(out)
        if out.requires_grad:
            tape.backward(out)
    return [np.array(p.grad, copy=True) for p in params]


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Maximum relative error between tape and central-difference gradients.

    ``f`` must rebuild its graph from ``params`` on every call and be
    deterministic (seed any rng inside ``f``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    worst = 0.0
    for p, ga in zip(params, analytic_grads(f, params)):
        gn = numeric_grad(f, p, eps)
        if ga.size:
            worst = max(worst, float(relative_error(ga, gn, floor).max()))
    return worst


def _scalar(t: Tensor) -> float:
    if t.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {t.shape}")
    v = float(t.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError("grad_check: function returned a non-finite value")
    return v
