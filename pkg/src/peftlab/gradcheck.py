"""Finite-difference verification of analytic gradients.

Central differences with a fixed step, compared elementwise against the
tape's gradient under a relative error that guards against tiny
denominators.  This is the independent oracle the unit and acceptance tests
lean on: it is derived from the loss function alone and never inspects the
backward closures it is checking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

__all__ = ["GradCheckResult", "numeric_grad", "check_gradients"]

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class GradCheckResult:
    """Worst relative error over all checked parameters."""

    max_rel_err: float
    worst_param: str
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self) -> str:
        return (
            f"max rel err {self.max_rel_err:.3e} at {self.worst_param}{list(self.worst_index)} "
            f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}, tol {self.tol:g})"
        )


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def numeric_grad(loss_fn: Callable[[], float], param: T.Tensor, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central-difference gradient of loss_fn w.r.t. every entry of `param`.

    loss_fn must re-run the forward pass from the current parameter values;
    it is called 2 * param.size times with single entries perturbed in place.
    """
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn()
        flat[i] = orig - eps
        lo = loss_fn()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(param.data.shape)


def check_gradients(
    loss_fn: Callable[[], T.Tensor],
    params: Sequence[tuple[str, T.Tensor]],
    eps: float = DEFAULT_EPS,
    tol: float = DEFAULT_TOL,
) -> GradCheckResult:
    """Compare tape gradients of loss_fn against central differences.

    loss_fn builds the forward pass from scratch and returns the scalar loss;
    it is executed once under a recording tape for the analytic gradients and
    then repeatedly without a tape for the numeric probes.  Returns the worst
    relative error across all entries of all named parameters.
    """
    for _, p in params:
        p.zero_grad()
    with T.record() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {}
    for name, p in params:
        if p.grad is None:
            analytic[name] = np.zeros_like(p.data)
        else:
            analytic[name] = p.grad.copy()

    def scalar_loss() -> float:
        return float(loss_fn().data)

    worst = GradCheckResult(0.0, "", (), 0.0, 0.0, tol)
    for name, p in params:
        num = numeric_grad(scalar_loss, p, eps=eps)
        ana = analytic[name]
        rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        idx = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        if rel.size and rel[idx] > worst.max_rel_err:
            worst = GradCheckResult(
                float(rel[idx]), name, tuple(int(i) for i in idx),
                float(ana[idx]), float(num[idx]), tol,
            )
    return worst
