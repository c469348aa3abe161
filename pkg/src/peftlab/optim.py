"""Deterministic optimizers over named parameter lists.

Parameters are (name, Tensor) pairs; gradients live on the tensors.  Both
optimizers skip parameters whose gradient is None, so frozen or unused
tensors cost nothing.  Adam keeps its moment state keyed by parameter
name, which makes optimizer state checkpointable if ever needed.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["SGD", "Adam", "make_optimizer", "average_gradients", "zero_gradients"]


class SGD:
    def __init__(self, params, lr: float):
        self.params = list(params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr

    def step(self) -> None:
        for _, p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        zero_gradients(self.params)


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        zero_gradients(self.params)


def make_optimizer(kind: str, params, lr: float):
    kind = kind.lower()
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}; expected sgd or adam")


def average_gradients(params, count: int) -> None:
    """Scale accumulated gradient sums down to a mean over `count` samples."""
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    inv = 1.0 / count
    for _, p in params:
        if p.grad is not None:
            p.grad *= inv


def zero_gradients(params) -> None:
    for _, p in params:
        p.grad = None
