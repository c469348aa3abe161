import math

import numpy as np
import pytest

import peftlab.tensor as T
from peftlab.gradcheck import check_gradients
from peftlab.operators import (
    ConfigError,
    IdentityOp,
    LSTMOp,
    MHAOp,
    SelfAttentionOp,
    TemporalConvOp,
    make_operator,
)
from peftlab.rng import SplitMix64


def _randn(rng, shape, std=1.0):
    flat = rng.normals(int(np.prod(shape)), std=std)
    return np.asarray(flat, dtype=np.float64).reshape(shape)


def test_identity_is_exact():
    rng = SplitMix64(1)
    z = T.Tensor(_randn(rng, (3, 4, 6)))
    out = IdentityOp()(z)
    assert out is z


def test_make_operator_kinds():
    rng = SplitMix64(2)
    for kind in ("mha", "self_attention", "lstm", "temporal_conv", "identity"):
        op = make_operator(kind, 8, rng.split(kind))
        assert op.kind == kind
    with pytest.raises(ConfigError):
        make_operator("mamba", 8, rng)


def test_mha_head_divisibility():
    with pytest.raises(ConfigError):
        MHAOp(6, 4, SplitMix64(3))


def test_mha_sequence_length_cap():
    op = MHAOp(4, 2, SplitMix64(4), pos_embed=True, t_max=4)
    z = T.Tensor(np.zeros((2, 6, 4)))
    with pytest.raises(ConfigError):
        op(z)
    # without the positional table there is no cap
    free = MHAOp(4, 2, SplitMix64(4), pos_embed=False)
    assert free(z).shape == (2, 6, 4)


def test_shapes_preserved_all_operators():
    rng = SplitMix64(5)
    z = T.Tensor(_randn(rng, (3, 5, 8)))
    for kind in ("mha", "self_attention", "lstm", "temporal_conv"):
        op = make_operator(kind, 8, rng.split(kind), t_max=5)
        assert op(z).shape == (3, 5, 8)


def test_mha_single_frame_closed_form():
    # T=1: the softmax over one key is 1, so out = (z W_V) W_O exactly
    rng = SplitMix64(6)
    op = MHAOp(8, 4, rng, pos_embed=False)
    z = _randn(rng, (5, 1, 8))
    out = op(T.Tensor(z))
    expect = (z @ op.w_v.data) @ op.w_o.data
    assert np.allclose(out.data, expect, atol=1e-14)


def test_self_attention_single_frame():
    rng = SplitMix64(7)
    op = SelfAttentionOp(6, rng)
    z = _randn(rng, (4, 1, 6))
    out = op(T.Tensor(z))
    assert np.allclose(out.data, z @ op.w_v.data, atol=1e-14)


def _scalar_attention_oracle(z, wq, wk, wv, wo, scale):
    """Single-head attention computed with python loops and math.exp only."""
    t, r = len(z), len(z[0])

    def matvec(mat, vec):
        return [sum(mat[i][j] * vec[i] for i in range(len(vec))) for j in range(len(mat[0]))]

    q = [matvec(wq, z[i]) for i in range(t)]
    k = [matvec(wk, z[i]) for i in range(t)]
    v = [matvec(wv, z[i]) for i in range(t)]
    out = []
    for i in range(t):
        scores = [scale * sum(q[i][c] * k[j][c] for c in range(r)) for j in range(t)]
        mx = max(scores)
        ex = [math.exp(s - mx) for s in scores]
        tot = sum(ex)
        weights = [e / tot for e in ex]
        ctx = [sum(weights[j] * v[j][c] for j in range(t)) for c in range(r)]
        out.append(matvec(wo, ctx))
    return out


def test_mha_matches_scalar_oracle():
    # T=3, H=1, r=2 with hand-set weights against loop arithmetic
    op = MHAOp(2, 1, SplitMix64(8), pos_embed=False)
    wq = [[0.5, -0.2], [0.1, 0.3]]
    wk = [[0.2, 0.4], [-0.3, 0.6]]
    wv = [[1.0, 0.0], [0.5, -1.0]]
    wo = [[0.7, 0.2], [-0.4, 0.9]]
    op.w_q.data[:] = wq
    op.w_k.data[:] = wk
    op.w_v.data[:] = wv
    op.w_o.data[:] = wo
    z = [[0.3, -0.8], [1.1, 0.4], [-0.5, 0.9]]
    out = op(T.Tensor(np.array(z).reshape(1, 3, 2)))
    oracle = _scalar_attention_oracle(z, wq, wk, wv, wo, 1.0 / math.sqrt(2))
    assert np.allclose(out.data[0], np.array(oracle), atol=1e-12)


def test_mha_permutation_equivariant_without_positions():
    rng = SplitMix64(9)
    op = MHAOp(8, 4, rng, pos_embed=False)
    z = _randn(rng, (2, 6, 8))
    perm = [3, 0, 5, 1, 4, 2]
    out = op(T.Tensor(z)).data
    out_perm = op(T.Tensor(z[:, perm, :])).data
    assert np.allclose(out_perm, out[:, perm, :], atol=1e-12)


def test_mha_positions_break_equivariance():
    rng = SplitMix64(10)
    op = MHAOp(8, 4, rng, pos_embed=True, t_max=6)
    op.pos_embed.data[:] = _randn(rng, (6, 8))  # table is zero at init; give it content
    z = _randn(rng, (2, 6, 8))
    perm = [5, 4, 3, 2, 1, 0]
    out = op(T.Tensor(z)).data
    out_perm = op(T.Tensor(z[:, perm, :])).data
    assert np.abs(out_perm - out[:, perm, :]).max() > 1e-4


def test_lstm_zero_input_zero_output():
    op = LSTMOp(4, SplitMix64(11))
    out = op(T.Tensor(np.zeros((3, 5, 4))))
    assert np.array_equal(out.data, np.zeros((3, 5, 4)))


def test_lstm_is_causal():
    rng = SplitMix64(12)
    op = LSTMOp(4, rng)
    z = _randn(rng, (1, 6, 4))
    out = op(T.Tensor(z)).data
    z2 = z.copy()
    z2[0, 4, :] += 1.0  # perturb a late frame
    out2 = op(T.Tensor(z2)).data
    assert np.array_equal(out2[0, :4], out[0, :4])
    assert np.abs(out2[0, 4:] - out[0, 4:]).max() > 0


def test_temporal_conv_matches_primitive():
    rng = SplitMix64(13)
    op = TemporalConvOp(6, rng, k_t=3)
    z = T.Tensor(_randn(rng, (2, 5, 6)))
    expect = T.depthwise_conv_time(z, op.kernel)
    assert np.array_equal(op(z).data, expect.data)


@pytest.mark.parametrize("kind", ["mha", "self_attention", "lstm", "temporal_conv"])
@pytest.mark.parametrize("seed", [21, 22])
def test_operator_gradients(kind, seed):
    rng = SplitMix64(seed)
    op = make_operator(kind, 4, rng.split(kind), heads=2, t_max=4)
    if kind == "mha":
        op.pos_embed.data[:] = _randn(rng, (4, 4), std=0.3)
    z = T.Tensor(_randn(rng, (2, 3, 4), std=0.5), requires_grad=True)
    probe = T.Tensor(_randn(rng, (2, 3, 4)))

    def build():
        return T.reduce_sum(T.mul(T.tanh(op(z)), probe))

    params = [("z", z)] + list(op.named_params())
    res = check_gradients(build, params)
    assert res.ok, f"{kind}: {res}"
