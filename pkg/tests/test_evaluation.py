import csv
import dataclasses
import io
import json

import numpy as np
import pytest

from c3m import numerics as nx
from c3m.evaluation import (
    AblationGrid,
    Cell,
    ProtocolError,
    evaluate,
    format_table,
    grid_csv,
    grid_report,
    rank_k_accuracy,
    result_csv,
    run_ablation,
    suite,
)
from c3m.manifold import embed_pair
from c3m.model import Variant
from c3m.representation import encode, usem_variant
from c3m.similarity import sim_fine
from c3m.synthgen import TEXTUAL, VISUAL, GeneratorConfig, SampleRecord, generate_dataset, split_dataset
from c3m.training import HyperParams, train

GEN = GeneratorConfig(identities=10, images_per_id=2, captions_per_id=2, d_raw=16, d_latent=12, k=3, n_max=4, seed=1)
HP = HyperParams(p=8, batch_size=8, epochs=3, stage2_start=1)


@pytest.fixture(scope="module")
def split():
    parts = split_dataset(generate_dataset(GEN), (0.5, 0.0, 0.5))
    return parts["train"], parts["test"]


@pytest.fixture(scope="module")
def trained(split):
    return train(split[0], HP)[0]


def oracle_ranks(sim, ql, gl, ks):
    """Sort-and-scan with the documented tie rule, written out longhand."""
    nq, ng = len(sim), len(sim[0])
    canon = sorted(range(ng), key=lambda j: (tuple(sim[q][j] for q in range(nq)), j))
    pos = {j: i for i, j in enumerate(canon)}
    hits = {k: 0 for k in ks}
    for q in range(nq):
        order = sorted(range(ng), key=lambda j: (-sim[q][j], pos[j]))
        for k in ks:
            if any(gl[j] == ql[q] for j in order[:k]):
                hits[k] += 1
    return {k: 100.0 * hits[k] / nq for k in ks}


def test_diagonal_dominant_is_perfect():
    sim = np.eye(3) + 0.1
    assert rank_k_accuracy(sim, [0, 1, 2], [0, 1, 2], ks=(1,)).ranks == {1: 100.0}


def test_sixth_place_counts_at_ten_only():
    sim = np.linspace(1.0, 0.1, 10)[None, :]
    labels = np.array([1, 2, 3, 4, 5, 0, 6, 7, 8, 9])
    r = rank_k_accuracy(sim, [0], labels)
    assert r.ranks == {1: 0.0, 5: 0.0, 10: 100.0}
    assert r.first_hit.tolist() == [6]


def test_matches_brute_force_on_random_matrices_with_ties():
    rng = np.random.default_rng(0)
    for trial in range(100):
        nq, ng = int(rng.integers(1, 51)), int(rng.integers(1, 81))
        sim = rng.normal(size=(nq, ng)).round(1)  # coarse rounding injects ties
        if trial % 3 == 0:
            sim[:, rng.integers(0, ng, size=ng // 2)] = 0.0
        ql, gl = rng.integers(0, 8, size=nq), rng.integers(0, 8, size=ng)
        ks = (1, 5, 10)
        got = rank_k_accuracy(sim, ql, gl, ks)
        assert got.ranks == oracle_ranks(sim.tolist(), ql.tolist(), gl.tolist(), ks)
        assert got.ranks[1] <= got.ranks[5] <= got.ranks[10] <= 100.0


def test_gallery_permutation_does_not_change_accuracy():
    rng = np.random.default_rng(1)
    for _ in range(30):
        sim = rng.integers(0, 3, size=(12, 20)).astype(float)
        ql, gl = rng.integers(0, 5, size=12), rng.integers(0, 5, size=20)
        perm = rng.permutation(20)
        a = rank_k_accuracy(sim, ql, gl)
        b = rank_k_accuracy(sim[:, perm], ql, gl[perm])
        assert a.ranks == b.ranks
        assert np.array_equal(a.first_hit, b.first_hit)


def test_rank_k_rejects_bad_input():
    with pytest.raises(ValueError):
        rank_k_accuracy(np.zeros((2, 0)), [0, 1], [])
    with pytest.raises(ValueError):
        rank_k_accuracy(np.array([[np.nan]]), [0], [0])


def test_evaluate_is_deterministic(trained, split):
    a, b = evaluate(trained, split[1]), evaluate(trained, split[1])
    assert a.ranks == b.ranks and np.array_equal(a.first_hit, b.first_hit)
    assert a.query_count == len(split[1].by_modality(TEXTUAL))
    assert a.gallery_size == len(split[1].by_modality(VISUAL))


def test_evaluate_refuses_training_identities(trained, split):
    with pytest.raises(ProtocolError):
        evaluate(trained, split[0])


def test_rescaled_raw_gallery_keeps_ranks(trained, split):
    data = split[1]
    scaled = dataclasses.replace(
        data,
        records=[SampleRecord(r.identity, r.modality, r.raw * (4.0 if r.modality == VISUAL else 1.0)) for r in data.records],
    )
    a, b = evaluate(trained, data), evaluate(trained, scaled)
    assert np.array_equal(a.first_hit, b.first_hit)


def test_evaluate_matches_per_pair_pipeline(trained, split):
    data = split[1]
    params, hp = trained.params, trained.hp
    queries, gallery = data.by_modality(TEXTUAL), data.by_modality(VISUAL)
    sim = np.empty((len(queries), len(gallery)))
    for i, q in enumerate(queries):
        t = encode(q, params.heads)
        t_u = usem_variant(t, "usem")
        for j, g in enumerate(gallery):
            v = encode(g, params.heads)
            v_u = usem_variant(v, "usem")
            e = embed_pair(v_u, t_u, params.manifold)
            s_c = nx.cosine(e.v_c, e.t_c).item()
            s_g = nx.cosine(v.global_, t.global_).item()
            s_f = sim_fine(v.global_, t.global_, v.locals_, t.locals_).item()
            sim[i, j] = s_c + hp.lambda1 * s_g + hp.lambda2 * s_f
    want = rank_k_accuracy(sim, [r.identity for r in queries], [r.identity for r in gallery])
    got = evaluate(trained, data)
    assert got.ranks == want.ranks
    assert np.array_equal(got.first_hit, want.first_hit)


# -- ablation ----------------------------------------------------------------


def test_single_cell_grid(split):
    res = run_ablation(AblationGrid([Cell(Variant())], [0]), split, HP)
    report = grid_report(res, HP)
    assert len(report["cells"]) == 1
    assert format_table(report).count("\n") == 2


def test_cell_rerun_is_bit_exact(split):
    grid = AblationGrid([Cell(Variant()), Cell(Variant("cdcp_sha", "usem"), 0)], [0, 1])
    a = run_ablation(grid, split, HP)
    b = run_ablation(grid, split, HP)
    for x, y in zip(a, b):
        for s in (0, 1):
            assert x.per_seed[s].ranks == y.per_seed[s].ranks
            assert np.array_equal(x.per_seed[s].first_hit, y.per_seed[s].first_hit)


def test_parallel_matches_serial(split):
    grid = AblationGrid([Cell(Variant("cdcp_sep", "glo")), Cell(Variant())], [0, 1])
    a = grid_report(run_ablation(grid, split, HP), HP)
    b = grid_report(run_ablation(grid, split, HP, jobs=2), HP)
    for x, y in zip(a["cells"], b["cells"]):
        assert x["per_seed"] == y["per_seed"] and x["mean"] == y["mean"]


def test_failing_cell_does_not_sink_grid(split):
    hp = dataclasses.replace(HP, epochs=3)
    grid = AblationGrid([Cell(Variant(), 7), Cell(Variant())], [0])  # start epoch beyond the run
    res = run_ablation(grid, split, hp)
    assert res[0].errors and not res[0].per_seed
    assert res[1].per_seed and not res[1].errors
    assert "(1 failed)" in format_table(grid_report(res, hp))


@pytest.mark.parametrize("name,rows", [("paradigm", 6), ("usem", 4), ("lasm", 7), ("ds", 2), ("stage-sweep", 4)])
def test_suite_sizes(name, rows):
    assert len(suite(name, [0]).cells) == rows


def test_reports_carry_fields(split, trained):
    res = run_ablation(AblationGrid([Cell(Variant())], [0, 1]), split, HP)
    report = grid_report(res, HP)
    report.update(version="0.1.0", config_hash="abc")
    rows = list(csv.DictReader(io.StringIO(grid_csv(report))))
    assert [r["seed"] for r in rows] == ["0", "1", "mean"]
    assert rows[0]["config_hash"] == "abc" and rows[0]["hyperparams_hash"] == report["hyperparams_hash"]
    one = evaluate(trained, split[1]).to_dict(HP)
    assert set(one) == {"variant", "seed", "ranks", "query_count", "gallery_size", "hyperparams_hash"}
    assert set(one["ranks"]) == {"r1", "r5", "r10"}
    row = next(csv.DictReader(io.StringIO(result_csv(one))))
    assert float(row["r10"]) == one["ranks"]["r10"]
    json.dumps(one)
