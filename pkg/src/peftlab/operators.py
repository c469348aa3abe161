"""Temporal sequence operators applied inside the rank-r bottleneck.

Every operator maps [N, T, r] -> [N, T, r], where N indexes independent
per-location sequences and T is the frame axis.  The menu: multi-head
attention (the default), single-head self-attention, a unidirectional LSTM,
a depthwise temporal convolution, and the identity.

The attention variants are bare: no biases, no layer norm, no residual
connection, no feedforward.  MHA optionally adds a learnable temporal
positional embedding (zero-initialized) to its input; without it the
operator is exactly frame-permutation-equivariant.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import SplitMix64
from .tensor import Tensor

__all__ = [
    "ConfigError",
    "TemporalOperator",
    "IdentityOp",
    "MHAOp",
    "SelfAttentionOp",
    "LSTMOp",
    "TemporalConvOp",
    "make_operator",
    "OPERATOR_KINDS",
]

OPERATOR_KINDS = ("mha", "self_attention", "lstm", "temporal_conv", "identity")


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


def _gauss(rng: SplitMix64, shape: tuple[int, ...], std: float) -> np.ndarray:
    flat = rng.normals(int(np.prod(shape)), std=std)
    return np.asarray(flat, dtype=np.float64).reshape(shape)


class TemporalOperator:
    kind = "base"

    def __call__(self, zseq: Tensor) -> Tensor:
        raise NotImplementedError

    def named_params(self) -> list[tuple[str, Tensor]]:
        return []


class IdentityOp(TemporalOperator):
    """Exact pass-through; reduces the surrounding adapter to a pointwise map."""

    kind = "identity"

    def __call__(self, zseq: Tensor) -> Tensor:
        return zseq


class MHAOp(TemporalOperator):
    """Multi-head scaled dot-product attention over the frame axis.

    Head dimension is r / heads and the score scale is 1/sqrt(r/heads).
    The optional positional embedding is a [t_max, r] table added to the
    input sequence; it starts at zero so the operator is initially
    permutation-equivariant even when enabled.
    """

    kind = "mha"

    def __init__(self, r: int, heads: int, rng: SplitMix64,
                 pos_embed: bool = True, t_max: int = 8):
        if r % heads != 0:
            raise ConfigError(f"width {r} not divisible by {heads} heads")
        self.r = r
        self.heads = heads
        self.t_max = t_max
        std = 1.0 / math.sqrt(r)
        self.w_q = Tensor(_gauss(rng, (r, r), std), requires_grad=True)
        self.w_k = Tensor(_gauss(rng, (r, r), std), requires_grad=True)
        self.w_v = Tensor(_gauss(rng, (r, r), std), requires_grad=True)
        self.w_o = Tensor(_gauss(rng, (r, r), std), requires_grad=True)
        self.pos_embed = Tensor(np.zeros((t_max, r)), requires_grad=True) if pos_embed else None

    def named_params(self):
        out = [("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_o", self.w_o)]
        if self.pos_embed is not None:
            out.append(("pos_embed", self.pos_embed))
        return out

    def __call__(self, zseq: Tensor) -> Tensor:
        n, t, r = zseq.shape
        if self.pos_embed is not None:
            if t > self.t_max:
                raise ConfigError(
                    f"sequence length {t} exceeds positional table size {self.t_max}"
                )
            zseq = T.add(zseq, T.slice_axis(self.pos_embed, 0, 0, t))
        h = self.heads
        hd = r // h

        def split_heads(x):
            return T.transpose(T.reshape(x, (n, t, h, hd)), (0, 2, 1, 3))

        q = split_heads(T.matmul(zseq, self.w_q))
        k = split_heads(T.matmul(zseq, self.w_k))
        v = split_heads(T.matmul(zseq, self.w_v))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, t, r))
        return T.matmul(merged, self.w_o)


class SelfAttentionOp(TemporalOperator):
    """Single-head attention over frames, score scale 1/sqrt(r), no output map."""

    kind = "self_attention"

    def __init__(self, r: int, rng: SplitMix64):
        self.r = r
        std = 1.0 / math.sqrt(r)
        self.w_q = Tensor(_gauss(rng, (r, r), std), requires_grad=True)
        self.w_k = Tensor(_gauss(rng, (r, r), std), requires_grad=True)
        self.w_v = Tensor(_gauss(rng, (r, r), std), requires_grad=True)

    def named_params(self):
        return [("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v)]

    def __call__(self, zseq: Tensor) -> Tensor:
        q = T.matmul(zseq, self.w_q)
        k = T.matmul(zseq, self.w_k)
        v = T.matmul(zseq, self.w_v)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.r))
        return T.matmul(T.softmax(scores, axis=-1), v)


class LSTMOp(TemporalOperator):
    """Unidirectional LSTM of width r emitting the hidden state at every step.

    Gate layout along the 4r axis is input, forget, cell, output.
    """

    kind = "lstm"

    def __init__(self, r: int, rng: SplitMix64):
        self.r = r
        std = 1.0 / math.sqrt(r)
        self.w_x = Tensor(_gauss(rng, (r, 4 * r), std), requires_grad=True)
        self.w_h = Tensor(_gauss(rng, (r, 4 * r), std), requires_grad=True)
        self.b = Tensor(np.zeros(4 * r), requires_grad=True)

    def named_params(self):
        return [("w_x", self.w_x), ("w_h", self.w_h), ("b", self.b)]

    def __call__(self, zseq: Tensor) -> Tensor:
        n, t, r = zseq.shape
        h = Tensor(np.zeros((n, r)))
        c = Tensor(np.zeros((n, r)))
        steps = []
        for step in range(t):
            x_t = T.reshape(T.slice_axis(zseq, 1, step, step + 1), (n, r))
            gates = T.add(T.add(T.matmul(x_t, self.w_x), T.matmul(h, self.w_h)), self.b)
            i_g = T.sigmoid(T.slice_axis(gates, 1, 0, r))
            f_g = T.sigmoid(T.slice_axis(gates, 1, r, 2 * r))
            g_g = T.tanh(T.slice_axis(gates, 1, 2 * r, 3 * r))
            o_g = T.sigmoid(T.slice_axis(gates, 1, 3 * r, 4 * r))
            c = T.add(T.mul(f_g, c), T.mul(i_g, g_g))
            h = T.mul(o_g, T.tanh(c))
            steps.append(T.reshape(h, (n, 1, r)))
        return T.concat(steps, axis=1)


class TemporalConvOp(TemporalOperator):
    """Depthwise convolution along the frame axis, zero padded, odd kernel."""

    kind = "temporal_conv"

    def __init__(self, r: int, rng: SplitMix64, k_t: int = 3):
        if k_t % 2 == 0:
            raise ConfigError(f"temporal kernel length must be odd, got {k_t}")
        self.r = r
        self.k_t = k_t
        self.kernel = Tensor(_gauss(rng, (k_t, r), 1.0 / math.sqrt(k_t)), requires_grad=True)

    def named_params(self):
        return [("kernel", self.kernel)]

    def __call__(self, zseq: Tensor) -> Tensor:
        return T.depthwise_conv_time(zseq, self.kernel)


def make_operator(kind: str, r: int, rng: SplitMix64, heads: int = 4,
                  pos_embed: bool = True, t_max: int = 8, k_t: int = 3) -> TemporalOperator:
    kind = kind.lower().replace("-", "_")
    if kind == "mha":
        return MHAOp(r, heads, rng, pos_embed=pos_embed, t_max=t_max)
    if kind == "self_attention":
        return SelfAttentionOp(r, rng)
    if kind == "lstm":
        return LSTMOp(r, rng)
    if kind == "temporal_conv":
        return TemporalConvOp(r, rng, k_t=k_t)
    if kind == "identity":
        return IdentityOp()
    raise ConfigError(f"unknown temporal operator {kind!r}, expected one of {OPERATOR_KINDS}")
