import math

import numpy as np
import pytest

from c3m import numerics as nx
from c3m.gradcheck import run_gradcheck
from c3m.representation import (
    FeatureMatrix,
    GroupNorm,
    Linear,
    ModalityHead,
    HeadParams,
    encode,
    encode_raw,
    init_heads,
    usem,
    usem_variant,
    usem_weights,
)
from c3m.synthgen import ConfigError, SampleRecord


def elu(x):
    return x if x > 0 else math.expm1(x)


def gn_oracle(x, gain, bias):
    n = len(x)
    mu = sum(x) / n
    sd = math.sqrt(sum((v - mu) ** 2 for v in x) / n)
    return [(v - mu) / max(sd, 1e-8) * g + b for v, g, b in zip(x, gain, bias)]


def fc_oracle(W, x, b):
    return [sum(W[i][j] * x[j] for j in range(len(x))) + b[i] for i in range(len(W))]


def head_from_arrays(a):
    return ModalityHead(
        GroupNorm(nx.parameter(a["gg"]), nx.parameter(a["gb"])),
        Linear(nx.parameter(a["W"]), nx.parameter(a["b"])),
        GroupNorm(nx.parameter(a["lg"]), nx.parameter(a["lb"])),
        Linear(nx.parameter(a["W1"]), nx.parameter(a["b1"])),
        Linear(nx.parameter(a["W2"]), nx.parameter(a["b2"])),
    )


def random_arrays(rng, d_raw, p):
    return {
        "gg": rng.normal(size=d_raw), "gb": rng.normal(size=d_raw),
        "W": rng.normal(size=(p, d_raw)), "b": rng.normal(size=p),
        "lg": rng.normal(size=d_raw), "lb": rng.normal(size=d_raw),
        "W1": rng.normal(size=(p, d_raw)), "b1": rng.normal(size=p),
        "W2": rng.normal(size=(p, p)), "b2": rng.normal(size=p),
    }


def fm(columns, mask=None):
    columns = np.asarray(columns, dtype=float)
    if mask is None:
        mask = np.ones(columns.shape[-2] - 1, dtype=bool)
    return FeatureMatrix(nx.Tensor(columns), np.asarray(mask), 0)


def test_identity_heads_pass_normalised_columns_through():
    p = 6
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(p, 4))
    raw = (raw - raw.mean(axis=0)) / raw.std(axis=0)  # already normalised so GN is the identity
    eye = {"gg": np.ones(p), "gb": np.zeros(p), "W": np.eye(p), "b": np.zeros(p), "lg": np.ones(p),
           "lb": np.zeros(p), "W1": np.eye(p), "b1": np.zeros(p), "W2": np.eye(p), "b2": np.zeros(p)}
    head = head_from_arrays(eye)
    rec = SampleRecord(0, 0, raw.astype(np.float32))
    out = encode(rec, HeadParams(head, head)).columns.data
    x = rec.raw.astype(float)
    assert np.allclose(out[0], x[:, 0], atol=1e-6)
    for j in range(1, 4):
        assert np.allclose(out[j], [elu(v) for v in x[:, j]], atol=1e-6)


def test_zero_maps_give_zero_columns():
    d_raw, p = 8, 4
    rng = np.random.default_rng(1)
    a = random_arrays(rng, d_raw, p)
    for key in ("W", "b", "W1", "b1", "W2", "b2"):
        a[key] = np.zeros_like(a[key])
    head = head_from_arrays(a)
    rec = SampleRecord(0, 1, rng.normal(size=(d_raw, 3)).astype(np.float32))
    assert not encode(rec, HeadParams(head, head)).columns.data.any()


def test_encode_matches_scalar_oracle():
    d_raw, p, m = 8, 4, 2
    rng = np.random.default_rng(2)
    a = random_arrays(rng, d_raw, p)
    head = head_from_arrays(a)
    raw = rng.normal(size=(d_raw, m + 1)).astype(np.float32)
    out = encode(SampleRecord(3, 0, raw), HeadParams(head, head)).columns.data
    x = [[float(raw[i, j]) for i in range(d_raw)] for j in range(m + 1)]
    A = {k: v.tolist() for k, v in a.items()}
    g = fc_oracle(A["W"], gn_oracle(x[0], A["gg"], A["gb"]), A["b"])
    assert np.allclose(out[0], g, rtol=0, atol=1e-12)
    for j in range(1, m + 1):
        h = [elu(v) for v in fc_oracle(A["W1"], gn_oracle(x[j], A["lg"], A["lb"]), A["b1"])]
        assert np.allclose(out[j], fc_oracle(A["W2"], h, A["b2"]), rtol=0, atol=1e-12)


def test_batch_encode_pads_and_masks():
    rng = np.random.default_rng(3)
    heads = init_heads(rng, 8, 4)
    recs = [SampleRecord(0, 1, rng.normal(size=(8, m + 1)).astype(np.float32)) for m in (2, 4, 3)]
    batch = encode(recs, heads)
    assert batch.columns.shape == (3, 5, 4)
    assert batch.mask.tolist() == [[1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 0]]
    for i, r in enumerate(recs):
        single = encode(r, heads).columns.data
        assert np.allclose(batch.columns.data[i, : r.m + 1], single, atol=1e-12)


def test_encode_rejects_mixed_modalities():
    rng = np.random.default_rng(4)
    heads = init_heads(rng, 8, 4)
    recs = [SampleRecord(0, m, np.ones((8, 3), dtype=np.float32)) for m in (0, 1)]
    with pytest.raises(ValueError):
        encode(recs, heads)


def test_encode_rejects_wrong_height():
    heads = init_heads(np.random.default_rng(5), 8, 4)
    with pytest.raises(nx.DimensionError):
        encode(SampleRecord(0, 0, np.ones((7, 3), dtype=np.float32)), heads)


# -- usem --------------------------------------------------------------------


def test_zero_locals_give_global():
    g = [1.0, -2.0, 0.5]
    assert np.array_equal(usem(fm([g, [0, 0, 0], [0, 0, 0]])).data, g)


def test_single_local_has_weight_one():
    g, l1 = [1.0, 2.0], [0.3, -0.7]
    assert np.allclose(usem(fm([g, l1])).data, [1.3, 1.3], atol=1e-15)


def test_usem_matches_scalar_oracle():
    rng = np.random.default_rng(6)
    cols = rng.normal(size=(4, 4))
    g, locs = cols[0].tolist(), cols[1:].tolist()
    scores = [sum(a * b for a, b in zip(l, g)) for l in locs]
    mx = max(scores)
    e = [math.exp(s - mx) for s in scores]
    w = [v / sum(e) for v in e]
    want = [g[i] + sum(w[j] * locs[j][i] for j in range(3)) for i in range(4)]
    assert np.allclose(usem(fm(cols)).data, want, rtol=0, atol=1e-12)


def test_usem_weights_are_a_distribution():
    rng = np.random.default_rng(7)
    for _ in range(20):
        w = usem_weights(fm(rng.normal(size=(6, 5)) * 3)).data
        assert (w > 0).all()
        assert abs(w.sum() - 1.0) <= 1e-12


def test_usem_is_permutation_equivariant():
    rng = np.random.default_rng(8)
    cols = rng.normal(size=(5, 4))
    perm = np.array([0, 3, 1, 4, 2])
    w, wp = usem_weights(fm(cols)).data, usem_weights(fm(cols[perm])).data
    assert np.allclose(wp, w[perm[1:] - 1], atol=1e-15)
    assert np.allclose(usem(fm(cols)).data, usem(fm(cols[perm])).data, atol=1e-14)


def test_usem_residual_lies_in_local_span():
    rng = np.random.default_rng(9)
    cols = rng.normal(size=(3, 6))  # p=6, m=2: span is a proper subspace
    resid = usem(fm(cols)).data - cols[0]
    L = cols[1:].T
    coef, *_ = np.linalg.lstsq(L, resid, rcond=None)
    assert np.linalg.norm(L @ coef - resid) <= 1e-9


def test_usem_respects_mask():
    rng = np.random.default_rng(10)
    cols = rng.normal(size=(4, 3))
    padded = np.vstack([cols, rng.normal(size=(2, 3))])
    got = usem(fm(padded, [True, True, True, False, False])).data
    assert np.allclose(got, usem(fm(cols)).data, atol=1e-14)


def test_variant_glo_and_avg():
    rng = np.random.default_rng(11)
    cols = rng.normal(size=(4, 3))
    assert np.array_equal(usem_variant(fm(cols), "glo").data, cols[0])
    c = np.array([0.5, -1.0, 2.0])
    assert np.allclose(usem_variant(fm(np.tile(c, (5, 1))), "avg").data, c, atol=1e-15)


def test_variant_avgloc_glo_oracle():
    rng = np.random.default_rng(12)
    cols = rng.normal(size=(5, 3))
    want = [cols[0, i] + sum(cols[j, i] for j in range(1, 5)) / 4 for i in range(3)]
    assert np.allclose(usem_variant(fm(cols), "avgloc_glo").data, want, atol=1e-14)


def test_unknown_variant():
    with pytest.raises(ConfigError):
        usem_variant(fm(np.ones((3, 2))), "max")


def test_encode_and_usem_gradients():
    report = run_gradcheck(modules=("representation",), seeds=3)
    assert report.passed, report.format()
