import math

import numpy as np
import pytest

from fusionformer import tensor as tn
from fusionformer.blocks import (AttentionParams, BlockParams, attention, block_param_count, embed,
                                 encoder_block, init_block, multi_head_attention)
from fusionformer.tensor import ShapeError, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def make_block(width, n_heads, rng, mlp_ratio=2):
    params = {}
    init_block(params, "b", width, mlp_ratio, rng)
    for name, t in params.items():  # non-trivial norms so the affine terms are exercised
        if name.endswith(("gamma", "beta")):
            t.data[:] = rng.normal(size=width)
    return params, BlockParams.from_params(params, "b", n_heads)


def test_attention_identical_keys_give_uniform_weights(rng):
    q = Tensor(rng.normal(size=(3, 4)))
    k = Tensor(np.tile(rng.normal(size=(1, 4)), (5, 1)))
    v = Tensor(rng.normal(size=(5, 2)))
    out, w = attention(q, k, v, 4)
    assert np.allclose(w.data, 0.2, atol=1e-15)
    assert np.allclose(out.data, v.data.mean(axis=0), atol=1e-14)


def test_attention_single_token(rng):
    v = Tensor(rng.normal(size=(1, 3)))
    out, w = attention(Tensor(rng.normal(size=(1, 2))), Tensor(rng.normal(size=(1, 2))), v, 2)
    assert w.data.tolist() == [[1.0]]
    assert np.array_equal(out.data, v.data)


def test_attention_two_by_two_values():
    out, w = attention(Tensor(np.eye(2)), Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]), 2)
    # straight-line oracle for row 0: softmax([1/sqrt(2), 0])
    e = math.exp(1 / math.sqrt(2))
    w0 = [e / (e + 1), 1 / (e + 1)]
    assert w.data[0] == pytest.approx(w0, abs=1e-15)
    assert out.data[0] == pytest.approx([w0[0] * 1 + w0[1] * 3, w0[0] * 2 + w0[1] * 4], abs=1e-14)
    assert w.data[0] == pytest.approx([0.6698, 0.3302], abs=1e-4)
    assert out.data[0] == pytest.approx([1.6604, 2.6604], abs=1e-4)


def test_attention_width_mismatch():
    with pytest.raises(ShapeError):
        attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))))


def test_attention_rows_are_stochastic(rng):
    _, w = attention(Tensor(rng.normal(size=(2, 6, 4)) * 30), Tensor(rng.normal(size=(2, 5, 4)) * 30),
                     Tensor(rng.normal(size=(2, 5, 3))))
    assert np.max(np.abs(w.data.sum(-1) - 1)) < 1e-12


def _identity_attention(width, n_heads):
    eye, zero = Tensor(np.eye(width)), Tensor(np.zeros(width))
    return AttentionParams(eye, zero, eye, zero, eye, zero, eye, zero, n_heads=n_heads)


def test_mha_single_head_identity_reduces_to_attention(rng):
    x = Tensor(rng.normal(size=(5, 4)))
    out, _ = multi_head_attention(x, _identity_attention(4, 1))
    ref, _ = attention(x, x, x, 4)
    assert np.allclose(out.data, ref.data, atol=1e-15)


def test_mha_zero_output_projection(rng):
    p = _identity_attention(4, 2)
    p.w_o = Tensor(np.zeros((4, 4)))
    p.b_o = Tensor([1.0, 2.0, 3.0, 4.0])
    out, _ = multi_head_attention(Tensor(rng.normal(size=(3, 4))), p)
    assert np.array_equal(out.data, np.tile([1.0, 2.0, 3.0, 4.0], (3, 1)))


def _mha_oracle(x, w, n_heads):
    """Per-head loops with explicit column slices and a hand-written softmax."""
    n, width = x.shape
    dh = width // n_heads
    q = x @ w["q.w"] + w["q.b"]
    k = x @ w["k.w"] + w["k.b"]
    v = x @ w["v.w"] + w["v.b"]
    heads = []
    for h in range(n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        out = np.zeros((n, dh))
        for i in range(n):
            scores = [float(np.dot(q[i, cols], k[j, cols])) / math.sqrt(dh) for j in range(n)]
            top = max(scores)
            ex = [math.exp(s - top) for s in scores]
            for j in range(n):
                out[i] += ex[j] / sum(ex) * v[j, cols]
        heads.append(out)
    return np.concatenate(heads, axis=1) @ w["o.w"] + w["o.b"]


def test_mha_two_heads_matches_oracle(rng):
    params = {}
    init_block(params, "b", 6, 2, rng)
    for name in params:
        if name.endswith(".b") and ".attn." in name:
            params[name].data[:] = rng.normal(size=6)
    p = AttentionParams.from_params(params, "b.attn", 2)
    x = rng.normal(size=(5, 6))
    out, w = multi_head_attention(Tensor(x), p)
    raw = {k.split("attn.")[1]: v.data for k, v in params.items() if ".attn." in k}
    assert np.allclose(out.data, _mha_oracle(x, raw, 2), atol=1e-13)
    assert w.shape == (2, 5, 5)


def test_head_count_must_divide_width():
    with pytest.raises(ShapeError):
        _identity_attention(6, 4)


def test_block_with_zero_branches_is_final_norm(rng):
    params, p = make_block(4, 2, rng)
    p.attention.w_o = Tensor(np.zeros((4, 4)))
    p.fc2_w = Tensor(np.zeros((8, 4)))
    x = Tensor(rng.normal(size=(3, 4)))
    out, _ = encoder_block(x, p)
    ref = tn.layer_norm(x, *p.ln_final)
    assert np.allclose(out.data, ref.data, atol=1e-15)


def _ln(v, g, b, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((a - mu) ** 2 for a in v) / len(v)
    return [(a - mu) / math.sqrt(var + eps) * gi + bi for a, gi, bi in zip(v, g, b)]


def _gelu(a):
    return 0.5 * a * (1 + math.erf(a / math.sqrt(2)))


def test_block_single_token_hand_computation(rng):
    params, p = make_block(2, 1, rng)
    raw = {k[2:]: v.data.tolist() for k, v in params.items()}
    x = [0.3, -1.1]

    def lin(v, name):
        w, b = raw[f"{name}.w"], raw[f"{name}.b"]
        return [sum(v[i] * w[i][o] for i in range(len(v))) + b[o] for o in range(len(b))]

    # one token: attention weight is 1, so MSA(h) = o(v(h))
    h = _ln(x, raw["ln1.gamma"], raw["ln1.beta"])
    x1 = [a + b for a, b in zip(lin(lin(h, "attn.v"), "attn.o"), x)]
    h2 = [_gelu(a) for a in lin(_ln(x1, raw["ln2.gamma"], raw["ln2.beta"]), "mlp.fc1")]
    x2 = [a + b for a, b in zip(lin(h2, "mlp.fc2"), x1)]
    expected = _ln(x2, raw["ln_final.gamma"], raw["ln_final.beta"])
    out, _ = encoder_block(Tensor([x]), p)
    assert out.data[0] == pytest.approx(expected, abs=1e-12)


def test_block_gradient(rng):
    params, p = make_block(4, 2, rng)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 3, 4)))

    def f():
        return tn.sum(encoder_block(x, BlockParams.from_params(params, "b", 2))[0] * w)

    assert tn.finite_diff_check(f, [x] + list(params.values())) < 1e-5


def test_block_permutation_equivariance(rng):
    _, p = make_block(4, 2, rng)
    x = rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    out, _ = encoder_block(Tensor(x), p)
    out_p, _ = encoder_block(Tensor(x[perm]), p)
    assert np.allclose(out_p.data, out.data[perm], atol=1e-13)


def test_block_param_count_matches_initialised_block(rng):
    params, _ = make_block(6, 2, rng, mlp_ratio=3)
    assert sum(t.size for t in params.values()) == block_param_count(6, 3)


def test_embed_zero_weights_gives_pe_plus_bias(rng):
    pe = Tensor(rng.normal(size=(5, 3)))
    b = Tensor([1.0, 2.0, 3.0])
    out = embed(Tensor(rng.normal(size=(4, 2))), Tensor(np.zeros((2, 3))), b, pe)
    assert np.allclose(out.data, pe.data[:4] + b.data, atol=0)
    assert out.shape == (4, 3)


def test_embed_gradient_reaches_table(rng):
    pe = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 2)))
    v = Tensor(rng.normal(size=(4, 3)))
    assert tn.finite_diff_check(lambda: tn.sum(tn.gelu(embed(x, w, b, pe)) * v), [pe, w, b]) < 1e-6
    assert np.any(pe.grad != 0)


def test_embed_rejects_too_many_tokens(rng):
    with pytest.raises(ShapeError):
        embed(Tensor(np.ones((6, 2))), Tensor(np.ones((2, 3))), Tensor(np.zeros(3)), Tensor(np.zeros((5, 3))))
