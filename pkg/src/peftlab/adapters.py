"""Parameter-efficient adapters over frozen linear projections.

The zoo, all sharing the zero-start contract (a freshly initialized adapter
leaves the wrapped layer's output bitwise unchanged):

  lora           Y = X W0 + (a/r) (X A) B
  dora           Y = X W_eff, W_eff col j = m[j] (W0 + (a/r)AB)[:,j] / ||.||
  st_adapter     Y = X W0 + gelu(conv_t(X W_down)) W_up
  temporal_dora  Y = X W0 + (a/r) op(X W_down) W_up,  W_up = (diag(m) V_hat)^T
  lora_mha       lora with the bottleneck routed through a temporal operator
  dora_mha       dora's decomposition of the full static W0 + (a/r)AB, with
                 the low-rank branch routed through a temporal operator

temporal_dora is the only variant that decomposes *just the residual branch*
into direction (row-normalized V) and magnitude (m, zero at init); the base
weight stays frozen and undecomposed.  Temporal variants expect 4-D inputs
[B, T, P, C_in]; the pointwise variants accept any leading shape.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from . import tensor as T
from .operators import ConfigError, IdentityOp, TemporalOperator, make_operator
from .rng import SplitMix64
from .tensor import Tensor

__all__ = [
    "AdapterNumericError",
    "FrozenLinear",
    "AdaptedLinear",
    "LoRAAdapter",
    "DoRAAdapter",
    "STAdapter",
    "TemporalDoRAAdapter",
    "LoRAMHAAdapter",
    "DoRAMHAAdapter",
    "ADAPTER_KINDS",
    "make_adapter",
    "to_temporal_sequences",
    "from_temporal_sequences",
    "tdora_up_weight",
    "param_count",
    "weight_fingerprint",
]

ADAPTER_KINDS = ("none", "lora", "dora", "st_adapter", "temporal_dora", "lora_mha", "dora_mha")

DORA_NORM_FLOOR = 1e-12


class AdapterNumericError(FloatingPointError):
    """Raised when a normalization denominator collapses below the floor."""


def _gauss(rng: SplitMix64, shape: tuple[int, ...], std: float) -> np.ndarray:
    flat = rng.normals(int(np.prod(shape)), std=std)
    return np.asarray(flat, dtype=np.float64).reshape(shape)


class FrozenLinear:
    """Base projection X W0 (+ bias); weights are never trainable."""

    def __init__(self, w0: np.ndarray, bias: np.ndarray | None = None):
        self.w0 = Tensor(np.asarray(w0, dtype=np.float64))
        self.bias = Tensor(np.asarray(bias, dtype=np.float64)) if bias is not None else None

    @property
    def c_in(self) -> int:
        return self.w0.shape[0]

    @property
    def c_out(self) -> int:
        return self.w0.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w0)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y

    def named_tensors(self):
        out = [("w0", self.w0, False)]
        if self.bias is not None:
            out.append(("bias", self.bias, False))
        return out


def to_temporal_sequences(z: Tensor) -> Tensor:
    """[B, T, P, r] -> [B*P, T, r]; element (b,t,p,c) lands at (b*P+p, t, c)."""
    b, t, p, r = z.shape
    return T.reshape(T.transpose(z, (0, 2, 1, 3)), (b * p, t, r))


def from_temporal_sequences(z: Tensor, batch: int, patches: int) -> Tensor:
    """Inverse of to_temporal_sequences; restores [B, T, P, r] exactly."""
    n, t, r = z.shape
    if n != batch * patches:
        raise T.ShapeError(f"cannot split {n} sequences into batch {batch} x patches {patches}")
    return T.transpose(T.reshape(z, (batch, patches, t, r)), (0, 2, 1, 3))


def tdora_up_weight(v: Tensor, m: Tensor, epsilon: float) -> Tensor:
    """Materialize the decomposed up-projection [r, C_out].

    Row i of V is normalized to V(i,:)/(||V(i,:)|| + epsilon) and scaled by
    m[i]; the transpose of the stacked rows is the up-projection, so column i
    of the result has norm |m[i]| * ||V_hat(i,:)||.  Gradients flow to both V
    and m through the normalization.
    """
    sq = T.reduce_sum(T.pow_scalar(v, 2.0), axis=1)
    inv = T.pow_scalar(T.add_scalar(T.pow_scalar(sq, 0.5), epsilon), -1.0)
    vt = T.transpose(v, (1, 0))
    return T.mul(T.mul(vt, inv), m)


class LoRAAdapter:
    """Low-rank additive residual; B starts at zero."""

    kind = "lora"

    def __init__(self, c_in: int, c_out: int, r: int, alpha: float, rng: SplitMix64):
        self.r = r
        self.alpha = alpha
        self.a = Tensor(_gauss(rng, (c_in, r), 1.0 / math.sqrt(r)), requires_grad=True)
        self.b = Tensor(np.zeros((r, c_out)), requires_grad=True)

    def forward(self, base: FrozenLinear, x: Tensor) -> Tensor:
        delta = T.scale(T.matmul(T.matmul(x, self.a), self.b), self.alpha / self.r)
        return T.add(base(x), delta)

    def named_params(self):
        return [("a", self.a), ("b", self.b)]


class DoRAAdapter:
    """Full-weight decomposition: per-column magnitude over the normalized
    direction of W0 + (a/r)AB.  At init m equals the column norms of W0 and
    B is zero, so the effective weight is exactly W0.
    """

    kind = "dora"

    def __init__(self, base: FrozenLinear, r: int, alpha: float, rng: SplitMix64):
        c_in, c_out = base.c_in, base.c_out
        self.r = r
        self.alpha = alpha
        self.a = Tensor(_gauss(rng, (c_in, r), 1.0 / math.sqrt(r)), requires_grad=True)
        self.b = Tensor(np.zeros((r, c_out)), requires_grad=True)
        self.m_full = Tensor(np.sqrt((base.w0.data ** 2).sum(axis=0)), requires_grad=True)

    def _column_scale(self, base: FrozenLinear):
        combined = T.add(base.w0, T.scale(T.matmul(self.a, self.b), self.alpha / self.r))
        norms = T.pow_scalar(T.reduce_sum(T.pow_scalar(combined, 2.0), axis=0), 0.5)
        bad = np.flatnonzero(norms.data < DORA_NORM_FLOOR)
        if bad.size:
            raise AdapterNumericError(
                f"combined weight column {int(bad[0])} has norm {norms.data[bad[0]]:.3e} "
                f"< {DORA_NORM_FLOOR:g}"
            )
        return combined, T.mul(self.m_full, T.pow_scalar(norms, -1.0))

    def forward(self, base: FrozenLinear, x: Tensor) -> Tensor:
        combined, col_scale = self._column_scale(base)
        w_eff = T.mul(combined, col_scale)
        y = T.matmul(x, w_eff)
        if base.bias is not None:
            y = T.add(y, base.bias)
        return y

    def named_params(self):
        return [("a", self.a), ("b", self.b), ("m_full", self.m_full)]


class STAdapter:
    """Bottleneck of width d_st with a depthwise temporal conv and gelu;
    the up-projection starts at zero.
    """

    kind = "st_adapter"

    def __init__(self, c_in: int, c_out: int, d_st: int, k_t: int, rng: SplitMix64):
        if k_t % 2 == 0:
            raise ConfigError(f"temporal kernel length must be odd, got {k_t}")
        self.d_st = d_st
        self.k_t = k_t
        self.w_down = Tensor(_gauss(rng, (c_in, d_st), 1.0 / math.sqrt(c_in)), requires_grad=True)
        self.kernel = Tensor(_gauss(rng, (k_t, d_st), 1.0 / math.sqrt(k_t)), requires_grad=True)
        self.w_up = Tensor(np.zeros((d_st, c_out)), requires_grad=True)

    def forward(self, base: FrozenLinear, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise T.ShapeError(f"st_adapter needs [B,T,P,C] input, got shape {x.shape}")
        b, t, p, _ = x.shape
        z = T.matmul(x, self.w_down)
        seq = to_temporal_sequences(z)
        mixed = T.gelu(T.depthwise_conv_time(seq, self.kernel))
        delta = T.matmul(from_temporal_sequences(mixed, b, p), self.w_up)
        return T.add(base(x), delta)

    def named_params(self):
        return [("w_down", self.w_down), ("kernel", self.kernel), ("w_up", self.w_up)]


class TemporalDoRAAdapter:
    """Temporal mixing inside the rank-r bottleneck, with direction-magnitude
    decomposition applied only to the trainable up-projection.

    Forward: X W0 + (a/r) * op(X W_down) W_up with W_up built by
    tdora_up_weight.  m starts at zero, so the residual branch is exactly
    silent at init regardless of the other weights.
    """

    kind = "temporal_dora"

    def __init__(self, c_in: int, c_out: int, r: int, alpha: float,
                 temporal_op: TemporalOperator, rng: SplitMix64, epsilon: float = 1e-8):
        self.r = r
        self.alpha = alpha
        self.epsilon = epsilon
        self.temporal_op = temporal_op
        self.w_down = Tensor(_gauss(rng, (c_in, r), 1.0 / math.sqrt(r)), requires_grad=True)
        self.v = Tensor(_gauss(rng, (c_out, r), 1.0 / math.sqrt(r)), requires_grad=True)
        self.m = Tensor(np.zeros(c_out), requires_grad=True)

    def forward(self, base: FrozenLinear, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise T.ShapeError(f"temporal_dora needs [B,T,P,C] input, got shape {x.shape}")
        b, t, p, _ = x.shape
        z = T.matmul(x, self.w_down)
        mixed = self.temporal_op(to_temporal_sequences(z))
        w_up = tdora_up_weight(self.v, self.m, self.epsilon)
        delta = T.scale(T.matmul(from_temporal_sequences(mixed, b, p), w_up), self.alpha / self.r)
        return T.add(base(x), delta)

    def named_params(self):
        out = [("w_down", self.w_down), ("v", self.v), ("m", self.m)]
        out.extend((f"op.{n}", p) for n, p in self.temporal_op.named_params())
        return out


class LoRAMHAAdapter:
    """LoRA with the bottleneck activations routed through a temporal operator."""

    kind = "lora_mha"

    def __init__(self, c_in: int, c_out: int, r: int, alpha: float,
                 temporal_op: TemporalOperator, rng: SplitMix64):
        self.r = r
        self.alpha = alpha
        self.temporal_op = temporal_op
        self.a = Tensor(_gauss(rng, (c_in, r), 1.0 / math.sqrt(r)), requires_grad=True)
        self.b = Tensor(np.zeros((r, c_out)), requires_grad=True)

    def forward(self, base: FrozenLinear, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise T.ShapeError(f"lora_mha needs [B,T,P,C] input, got shape {x.shape}")
        bsz, t, p, _ = x.shape
        z = T.matmul(x, self.a)
        mixed = self.temporal_op(to_temporal_sequences(z))
        delta = T.scale(T.matmul(from_temporal_sequences(mixed, bsz, p), self.b), self.alpha / self.r)
        return T.add(base(x), delta)

    def named_params(self):
        out = [("a", self.a), ("b", self.b)]
        out.extend((f"op.{n}", p) for n, p in self.temporal_op.named_params())
        return out


class DoRAMHAAdapter:
    """dora with a temporal operator in the bottleneck.

    The direction-magnitude decomposition still covers the full combined
    weight: columns are rescaled by m[j] / ||(W0 + (a/r)AB)[:,j]|| computed
    from the static materialized weight, while the data path routes the
    bottleneck through the operator.  With the identity operator this reduces
    exactly to dora.
    """

    kind = "dora_mha"

    def __init__(self, base: FrozenLinear, r: int, alpha: float,
                 temporal_op: TemporalOperator, rng: SplitMix64):
        c_in, c_out = base.c_in, base.c_out
        self.r = r
        self.alpha = alpha
        self.temporal_op = temporal_op
        self.a = Tensor(_gauss(rng, (c_in, r), 1.0 / math.sqrt(r)), requires_grad=True)
        self.b = Tensor(np.zeros((r, c_out)), requires_grad=True)
        self.m_full = Tensor(np.sqrt((base.w0.data ** 2).sum(axis=0)), requires_grad=True)

    def forward(self, base: FrozenLinear, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise T.ShapeError(f"dora_mha needs [B,T,P,C] input, got shape {x.shape}")
        bsz, t, p, _ = x.shape
        combined = T.add(base.w0, T.scale(T.matmul(self.a, self.b), self.alpha / self.r))
        norms = T.pow_scalar(T.reduce_sum(T.pow_scalar(combined, 2.0), axis=0), 0.5)
        bad = np.flatnonzero(norms.data < DORA_NORM_FLOOR)
        if bad.size:
            raise AdapterNumericError(
                f"combined weight column {int(bad[0])} has norm {norms.data[bad[0]]:.3e} "
                f"< {DORA_NORM_FLOOR:g}"
            )
        col_scale = T.mul(self.m_full, T.pow_scalar(norms, -1.0))
        z = T.matmul(x, self.a)
        mixed = self.temporal_op(to_temporal_sequences(z))
        delta = T.scale(T.matmul(from_temporal_sequences(mixed, bsz, p), self.b), self.alpha / self.r)
        y = T.mul(T.add(T.matmul(x, base.w0), delta), col_scale)
        if base.bias is not None:
            y = T.add(y, base.bias)
        return y

    def named_params(self):
        out = [("a", self.a), ("b", self.b), ("m_full", self.m_full)]
        out.extend((f"op.{n}", p) for n, p in self.temporal_op.named_params())
        return out


class AdaptedLinear:
    """Frozen base projection with at most one attached trainable adapter."""

    def __init__(self, base: FrozenLinear, adapter=None, name: str = "layer"):
        self.base = base
        self.adapter = adapter
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        if self.adapter is None:
            return self.base(x)
        try:
            return self.adapter.forward(self.base, x)
        except AdapterNumericError as err:
            raise AdapterNumericError(f"{self.name}: {err}") from None

    def named_params(self):
        if self.adapter is None:
            return []
        return [(f"adapter.{n}", p) for n, p in self.adapter.named_params()]

    def named_tensors(self):
        out = [(n, p, False) for n, p, _ in self.base.named_tensors()]
        out.extend((n, p, True) for n, p in self.named_params())
        return out


def make_adapter(kind: str, base: FrozenLinear, rng: SplitMix64, r: int = 8,
                 alpha: float | None = None, operator: str = "mha", heads: int = 4,
                 pos_embed: bool = True, t_max: int = 8, d_st: int | None = None,
                 k_t: int = 3, epsilon: float = 1e-8):
    """Build an adapter for `base` by kind name; None for kind 'none'.

    alpha defaults to 2r; d_st defaults to C_in/2.  Temporal variants share
    the operator menu (mha | self_attention | lstm | temporal_conv | identity).
    """
    kind = kind.lower().replace("+", "_").replace("-", "_")
    if kind == "none":
        return None
    if alpha is None:
        alpha = 2.0 * r
    c_in, c_out = base.c_in, base.c_out
    if kind == "lora":
        return LoRAAdapter(c_in, c_out, r, alpha, rng)
    if kind == "dora":
        return DoRAAdapter(base, r, alpha, rng)
    if kind == "st_adapter":
        width = d_st if d_st is not None else max(1, c_in // 2)
        return STAdapter(c_in, c_out, width, k_t, rng)
    op_rng = rng.split("operator")
    if kind == "temporal_dora":
        op = make_operator(operator, r, op_rng, heads=heads, pos_embed=pos_embed,
                           t_max=t_max, k_t=k_t)
        return TemporalDoRAAdapter(c_in, c_out, r, alpha, op, rng, epsilon=epsilon)
    if kind == "lora_mha":
        op = make_operator(operator, r, op_rng, heads=heads, pos_embed=pos_embed,
                           t_max=t_max, k_t=k_t)
        return LoRAMHAAdapter(c_in, c_out, r, alpha, op, rng)
    if kind == "dora_mha":
        op = make_operator(operator, r, op_rng, heads=heads, pos_embed=pos_embed,
                           t_max=t_max, k_t=k_t)
        return DoRAMHAAdapter(base, r, alpha, op, rng)
    raise ConfigError(f"unknown adapter kind {kind!r}, expected one of {ADAPTER_KINDS}")


def param_count(obj) -> dict:
    """Count trainable vs frozen scalars for anything exposing named_tensors()."""
    trainable = 0
    frozen = 0
    for _, tensor, is_trainable in obj.named_tensors():
        if is_trainable:
            trainable += tensor.size
        else:
            frozen += tensor.size
    total = trainable + frozen
    return {
        "trainable": trainable,
        "frozen": frozen,
        "ratio": trainable / total if total else 0.0,
    }


def weight_fingerprint(tensors) -> str:
    """sha256 over the named arrays, order-sensitive; used to prove frozen
    weights never move during training."""
    digest = hashlib.sha256()
    for name, tensor in tensors:
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(tensor.data).tobytes())
    return digest.hexdigest()
