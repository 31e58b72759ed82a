import math

import numpy as np
import pytest

from c3m import numerics as nx
from c3m.gradcheck import run_gradcheck
from c3m.manifold import (
    LASM_KINDS,
    common_dim,
    distribution_shift,
    embed_pair,
    gate,
    init_lasm,
    init_manifold,
    init_perceptron,
    lasm,
    lasm_variant,
    xproj,
)
from c3m.synthgen import ConfigError


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def elu(x):
    return x if x > 0 else math.expm1(x)


def mv(W, x, b=None):
    return [sum(W[i][j] * x[j] for j in range(len(x))) + (b[i] if b is not None else 0.0) for i in range(len(W))]


def ds_oracle(s, r):
    n = len(s)
    ms, mr = sum(s) / n, sum(r) / n
    ss = math.sqrt(sum((v - ms) ** 2 for v in s) / n)
    sr = math.sqrt(sum((v - mr) ** 2 for v in r) / n)
    return [(v - ms) / max(ss, 1e-8) * sr + mr for v in s]


def zero_out(group):
    for t in group.named().values():
        t.data[...] = 0.0
    return group


def lists(t):
    return t.data.tolist()


# -- distribution shift ------------------------------------------------------


def test_ds_identity_transfer():
    s = np.random.default_rng(0).normal(size=7)
    assert np.allclose(distribution_shift(s, s).data, s, atol=1e-15)


def test_ds_affine_equivalence():
    assert np.allclose(distribution_shift([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]).data, [2.0, 4.0, 6.0], atol=1e-14)


def test_ds_constant_target_collapses():
    s = np.random.default_rng(1).normal(size=5)
    assert np.array_equal(distribution_shift(s, np.full(5, 2.5)).data, np.full(5, 2.5))


def test_ds_matches_oracle_and_transfers_statistics():
    rng = np.random.default_rng(2)
    for _ in range(20):
        s, r = rng.normal(size=9) * 3, rng.normal(size=9) * 0.5 + 4
        out = distribution_shift(s, r).data
        assert np.allclose(out, ds_oracle(s.tolist(), r.tolist()), atol=1e-12)
        mo, mr = nx.moments(out), nx.moments(r)
        assert abs(mo.mean.item() - mr.mean.item()) <= 1e-9
        assert abs(mo.std.item() - mr.std.item()) <= 1e-9
        assert np.allclose(distribution_shift(out, r).data, out, atol=1e-9)


def test_ds_guard_counts_constant_source():
    nx.reset_diagnostics()
    distribution_shift(np.ones(4), [1.0, 2.0, 3.0, 4.0])
    assert nx.diagnostics().get("distribution_shift", 0) == 1


# -- xproj -------------------------------------------------------------------


def test_zero_perceptron_outputs_zero():
    mlp = zero_out(init_perceptron(np.random.default_rng(3), 5))
    assert not xproj(np.arange(5.0), np.ones(5) * [1, 2, 3, 4, 5], mlp).data.any()


def test_xproj_bounded():
    rng = np.random.default_rng(4)
    mlp = init_perceptron(rng, 6)
    mlp.fc1.W.data[...] = np.eye(6) * 50
    out = xproj(rng.normal(size=(20, 6)) * 100, rng.normal(size=(20, 6)), mlp).data
    assert (np.abs(out) <= 1).all()


def test_xproj_matches_oracle():
    rng = np.random.default_rng(5)
    p = 8
    mlp = init_perceptron(rng, p)
    for t in mlp.named().values():
        t.data[...] = rng.normal(size=t.shape)
    s, r = rng.normal(size=p), rng.normal(size=p) + 2
    h = ds_oracle(s.tolist(), r.tolist())
    h = [elu(v) for v in mv(lists(mlp.fc1.W), h, lists(mlp.fc1.b))]
    want = [math.tanh(v) for v in mv(lists(mlp.fc2.W), h, lists(mlp.fc2.b))]
    assert np.allclose(xproj(s, r, mlp).data, want, atol=1e-12)
    raw = [math.tanh(v) for v in mv(lists(mlp.fc2.W), [elu(v) for v in mv(lists(mlp.fc1.W), s.tolist(), lists(mlp.fc1.b))], lists(mlp.fc2.b))]
    assert np.allclose(xproj(s, r, mlp, shift=False).data, raw, atol=1e-12)


# -- lasm --------------------------------------------------------------------


@pytest.mark.parametrize("combine", ["concat", "add"])
def test_lasm_equal_inputs_pass_through(combine):
    rng = np.random.default_rng(6)
    params = init_lasm(rng, 5, f"vector_gate_{combine}")
    x = rng.normal(size=5)
    assert np.allclose(lasm(x, x, params, combine).data, x, atol=1e-15)


def test_lasm_zero_gate_is_midpoint():
    rng = np.random.default_rng(7)
    params = zero_out(init_lasm(rng, 4))
    a, b = rng.normal(size=4), rng.normal(size=4)
    assert np.allclose(gate(a, b, params).data, 0.5)
    assert np.allclose(lasm(a, b, params).data, (a + b) / 2, atol=1e-15)


def randomised(kind, p, rng):
    params = init_lasm(rng, p, kind)
    for t in params.tensors.values():
        t.data[...] = rng.normal(size=t.shape)
    return params


def lasm_oracle(kind, u, x, T):
    T = {k: v.data.tolist() for k, v in T.items()}
    if kind == "add":
        return [a + b for a, b in zip(u, x)]
    if kind == "concat":
        return u + x
    if kind == "add_mlp":
        return [math.tanh(v) for v in mv(T["W"], [a + b for a, b in zip(u, x)], T["b"])]
    if kind == "concat_mlp":
        return [math.tanh(v) for v in mv(T["W"], u + x, T["b"])]
    if kind == "scalar_gate":
        a = sigmoid(mv(T["w"], u + x, T["b"])[0])
        return [a * p + (1 - a) * q for p, q in zip(u, x)]
    joined = u + x if kind == "vector_gate_concat" else [a + b for a, b in zip(u, x)]
    g = [sigmoid(v) for v in mv(T["W2"], [elu(v) for v in mv(T["W1"], joined)])]
    return [gi * p + (1 - gi) * q for gi, p, q in zip(g, u, x)]


@pytest.mark.parametrize("kind", LASM_KINDS)
def test_lasm_variants_match_oracle(kind):
    rng = np.random.default_rng(8)
    p = 8
    params = randomised(kind, p, rng)
    u, x = rng.normal(size=p), rng.normal(size=p)
    got = lasm_variant(u, x, params).data
    assert got.shape == (common_dim(kind, p),)
    assert np.allclose(got, lasm_oracle(kind, u.tolist(), x.tolist(), params.tensors), atol=1e-12)


def test_add_variant_cancels():
    x = np.random.default_rng(9).normal(size=4)
    assert not lasm_variant(x, -x, init_lasm(np.random.default_rng(0), 4, "add")).data.any()


def test_scalar_gate_zero_params_midpoint():
    rng = np.random.default_rng(10)
    params = zero_out(init_lasm(rng, 4, "scalar_gate"))
    a, b = rng.normal(size=4), rng.normal(size=4)
    assert np.allclose(lasm_variant(a, b, params).data, (a + b) / 2, atol=1e-15)


def test_lasm_convex_and_gate_open_interval():
    rng = np.random.default_rng(11)
    params = randomised("vector_gate_concat", 6, rng)
    u, x = rng.normal(size=(50, 6)), rng.normal(size=(50, 6))
    g = gate(u, x, params).data
    assert ((g > 0) & (g < 1)).all()
    c = lasm(u, x, params).data
    assert (c >= np.minimum(u, x) - 1e-15).all() and (c <= np.maximum(u, x) + 1e-15).all()


def test_lasm_kind_mismatch_rejected():
    params = init_lasm(np.random.default_rng(0), 4, "vector_gate_add")
    with pytest.raises(ConfigError):
        lasm(np.ones(4), np.ones(4), params, "concat")
    with pytest.raises(ConfigError):
        init_lasm(np.random.default_rng(0), 4, "mystery")


# -- embed_pair --------------------------------------------------------------


def test_embed_pair_zero_params_halves():
    rng = np.random.default_rng(12)
    params = zero_out(init_manifold(rng, 5))
    v, t = rng.normal(size=5), rng.normal(size=5) + 1
    e = embed_pair(v, t, params)
    assert np.allclose(e.v_c.data, v / 2, atol=1e-15)
    assert np.allclose(e.t_c.data, t / 2, atol=1e-15)


def test_embed_pair_symmetry():
    rng = np.random.default_rng(13)
    params = init_manifold(rng, 6)
    for a, b in zip(params.xproj.to_textual.named().values(), params.xproj.to_visual.named().values()):
        b.data[...] = a.data
    x = rng.normal(size=6)
    e = embed_pair(x, x, params)
    assert np.array_equal(e.v_c.data, e.t_c.data)


def test_embed_pair_matches_composed_oracle():
    rng = np.random.default_rng(14)
    p = 6
    params = init_manifold(rng, p, shared_lasm=False)
    v, t = rng.normal(size=p), rng.normal(size=p) * 2 + 1

    def proj(s, r, mlp):
        h = [elu(x) for x in mv(lists(mlp.fc1.W), ds_oracle(s, r), lists(mlp.fc1.b))]
        return [math.tanh(x) for x in mv(lists(mlp.fc2.W), h, lists(mlp.fc2.b))]

    vp = proj(v.tolist(), t.tolist(), params.xproj.to_textual)
    tp = proj(t.tolist(), v.tolist(), params.xproj.to_visual)
    e = embed_pair(v, t, params)
    assert np.allclose(e.v_p.data, vp, atol=1e-12)
    assert np.allclose(e.v_c.data, lasm_oracle("vector_gate_concat", v.tolist(), vp, params.lasm["visual"].tensors), atol=1e-12)
    assert np.allclose(e.t_c.data, lasm_oracle("vector_gate_concat", t.tolist(), tp, params.lasm["textual"].tensors), atol=1e-12)


def test_embed_pair_broadcasts_query_by_gallery():
    rng = np.random.default_rng(15)
    params = init_manifold(rng, 4)
    V, T = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    e = embed_pair(V[:, None, :], T[None, :, :], params)
    assert e.v_c.shape == (3, 5, 4)
    single = embed_pair(V[1], T[3], params)
    assert np.allclose(e.t_c.data[1, 3], single.t_c.data, atol=1e-14)


def test_manifold_gradients():
    report = run_gradcheck(modules=("manifold",), seeds=3)
    assert report.passed, report.format()
