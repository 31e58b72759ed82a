"""Rank-k retrieval metrics, model evaluation and the ablation harness."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import Variant, encode_frozen, freeze_params, similarity_matrix
from .synthgen import TEXTUAL, VISUAL, Dataset, GeneratorConfig, generate_dataset, split_dataset
from .training import HyperParams, ModelState, train

log = logging.getLogger(__name__)

DEFAULT_RANKS = (1, 5, 10)


class ProtocolError(RuntimeError):
    """Evaluation identities overlap the training identities."""


@dataclass
class RetrievalResult:
    ranks: dict[int, float]
    query_count: int
    gallery_size: int
    first_hit: np.ndarray  # 1-based rank of the first correct item per query (0: none)
    variant: str = ""
    seed: int | None = None

    @property
    def r1(self) -> float:
        return self.ranks[1]

    def to_dict(self, hp: HyperParams | None = None) -> dict:
        out = {
            "variant": self.variant,
            "seed": self.seed,
            "ranks": {f"r{k}": v for k, v in sorted(self.ranks.items())},
            "query_count": self.query_count,
            "gallery_size": self.gallery_size,
        }
        if hp is not None:
            out["hyperparams_hash"] = hyperparams_hash(hp)
        return out


def hyperparams_hash(hp: HyperParams) -> str:
    return hashlib.sha256(hp.to_json().encode()).hexdigest()[:16]


def canonical_gallery_order(sim: np.ndarray) -> np.ndarray:
    """Gallery permutation that depends only on the similarity columns.

    Columns are sorted lexicographically by their values over all queries,
    so relabelling or reordering the input gallery yields the same
    canonical positions.
    """
    if sim.shape[0] == 0:
        return np.arange(sim.shape[1])
    return np.lexsort(sim[::-1])


def rank_k_accuracy(sim, query_labels, gallery_labels, ks: Iterable[int] = DEFAULT_RANKS) -> RetrievalResult:
    """Percentage of queries with a same-identity gallery item in the top k.

    Ties in similarity are broken by ascending canonical gallery position
    (see :func:`canonical_gallery_order`).
    """
    sim = np.asarray(sim, dtype=np.float64)
    q_labels = np.asarray(query_labels)
    g_labels = np.asarray(gallery_labels)
    if sim.ndim != 2 or sim.shape[1] == 0:
        raise ValueError("rank_k_accuracy needs a non-empty gallery")
    if sim.shape != (len(q_labels), len(g_labels)):
        raise ValueError(f"similarity {sim.shape} does not match labels ({len(q_labels)}, {len(g_labels)})")
    if not np.all(np.isfinite(sim)):
        raise ValueError("similarity matrix has non-finite entries")
    ks = sorted(set(int(k) for k in ks))
    canon = canonical_gallery_order(sim)
    position = np.empty_like(canon)
    position[canon] = np.arange(len(canon))
    first_hit = np.zeros(len(q_labels), dtype=np.int64)
    for q in range(sim.shape[0]):
        order = np.lexsort((position, -sim[q]))
        hits = np.flatnonzero(g_labels[order] == q_labels[q])
        first_hit[q] = hits[0] + 1 if hits.size else 0
    n = max(len(q_labels), 1)
    ranks = {k: 100.0 * float(np.sum((first_hit > 0) & (first_hit <= k))) / n for k in ks}
    return RetrievalResult(ranks, len(q_labels), len(g_labels), first_hit)


def evaluate(state: ModelState, dataset: Dataset, ks: Iterable[int] = DEFAULT_RANKS) -> RetrievalResult:
    """Textual queries against the visual gallery of ``dataset``."""
    overlap = set(state.train_ids) & set(dataset.identities())
    if overlap:
        raise ProtocolError(f"{len(overlap)} evaluation identities were seen in training")
    queries = dataset.by_modality(TEXTUAL)
    gallery = dataset.by_modality(VISUAL)
    if not gallery:
        raise ValueError("evaluation dataset has no visual records")
    params = freeze_params(state.params)
    variant = state.variant
    q = encode_frozen(queries, params, variant, TEXTUAL)
    g = encode_frozen(gallery, params, variant, VISUAL)
    sim = similarity_matrix(q, g, params, variant, state.hp.lambda1, state.hp.lambda2)
    result = rank_k_accuracy(sim, q.labels, g.labels, ks)
    result.variant = variant.tag
    result.seed = state.hp.seed
    return result


# ---------------------------------------------------------------------------
# ablation grid


@dataclass(frozen=True)
class Cell:
    variant: Variant
    stage2_start: int | None = None

    @property
    def label(self) -> str:
        if self.stage2_start is None:
            return self.variant.tag
        return f"{self.variant.tag}@start={self.stage2_start}"


@dataclass
class AblationGrid:
    cells: list[Cell]
    seeds: list[int]

    def __post_init__(self):
        if not self.cells:
            raise ValueError("ablation grid needs at least one cell")
        if not self.seeds:
            raise ValueError("ablation grid needs at least one seed")


PARADIGM_CELLS = [
    Variant("cdcp_sep", "glo"),
    Variant("cdcp_sha", "glo"),
    Variant("lbul", "glo"),
    Variant("cdcp_sep", "usem"),
    Variant("cdcp_sha", "usem"),
    Variant("lbul", "usem"),
]


def suite(name: str, seeds: Sequence[int], start_epochs: Sequence[int] = (0, 5, 15, 30)) -> AblationGrid:
    full = Variant()
    if name == "paradigm":
        cells = [Cell(v) for v in PARADIGM_CELLS]
    elif name == "usem":
        cells = [Cell(dataclasses.replace(full, usem=k)) for k in ("glo", "avg", "avgloc_glo", "usem")]
    elif name == "lasm":
        kinds = ("add", "add_mlp", "concat", "concat_mlp", "scalar_gate", "vector_gate_add", "vector_gate_concat")
        cells = [Cell(dataclasses.replace(full, lasm=k)) for k in kinds]
    elif name == "ds":
        cells = [Cell(dataclasses.replace(full, ds=False)), Cell(full)]
    elif name == "stage-sweep":
        cells = [Cell(full, s) for s in start_epochs]
    elif name == "all":
        cells = []
        for part in ("paradigm", "usem", "lasm", "ds", "stage-sweep"):
            for c in suite(part, seeds, start_epochs).cells:
                if c not in cells:
                    cells.append(c)
    else:
        raise ValueError(f"unknown suite {name!r}")
    return AblationGrid(cells, list(seeds))


@dataclass
class CellResult:
    cell: Cell
    per_seed: dict[int, RetrievalResult] = field(default_factory=dict)
    errors: dict[int, str] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, k: int) -> float:
        if not self.per_seed:
            return float("nan")
        return float(np.mean([r.ranks[k] for r in self.per_seed.values()]))


@dataclass
class DataSpec:
    """How each seed's benchmark data is produced."""

    gen: GeneratorConfig = GeneratorConfig()
    fractions: tuple[float, float, float] = (0.6, 0.0, 0.4)
    eval_split: str = "test"

    def build(self, seed: int) -> tuple[Dataset, Dataset]:
        data = generate_dataset(dataclasses.replace(self.gen, seed=seed))
        parts = split_dataset(data, self.fractions)
        return parts["train"], parts[self.eval_split]


def run_cell(cell: Cell, seed: int, data: tuple[Dataset, Dataset], hp: HyperParams,
             ks: Iterable[int] = DEFAULT_RANKS) -> RetrievalResult:
    train_set, eval_set = data
    cell_hp = dataclasses.replace(hp, seed=seed)
    if cell.stage2_start is not None:
        cell_hp = dataclasses.replace(cell_hp, stage2_start=cell.stage2_start)
    state, _ = train(train_set, cell_hp, cell.variant)
    return evaluate(state, eval_set, ks)


def _run_task(cell: Cell, seed: int, data, hp: HyperParams, ks) -> tuple[RetrievalResult | None, str | None, float]:
    start = time.perf_counter()
    try:
        if isinstance(data, DataSpec):
            data = data.build(seed)
        return run_cell(cell, seed, data, hp, ks), None, time.perf_counter() - start
    except Exception as exc:  # one failing cell must not sink the grid
        log.error("cell %s seed %s failed: %s", cell.label, seed, exc)
        msg = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        return None, msg, time.perf_counter() - start


def run_ablation(grid: AblationGrid, data, hp: HyperParams, ks: Iterable[int] = DEFAULT_RANKS,
                 progress=None, jobs: int = 1) -> list[CellResult]:
    """Train and evaluate each cell for each seed; failures stay local to their cell.

    ``data`` is a :class:`DataSpec` (fresh data per seed) or a fixed
    ``(train, eval)`` pair shared by all seeds. With ``jobs > 1`` the
    (cell, seed) runs go to a process pool; results are gathered in grid
    order, so the outcome does not depend on scheduling.
    """
    ks = tuple(ks)
    tasks = [(cell, seed) for cell in grid.cells for seed in grid.seeds]
    results = {cell: CellResult(cell) for cell in grid.cells}

    def record(cell, seed, outcome):
        res = results[cell]
        value, error, seconds = outcome
        if error is None:
            res.per_seed[seed] = value
        else:
            res.errors[seed] = error
        res.seconds += seconds
        if progress is not None:
            progress(cell, seed, res)

    if jobs <= 1:
        cache: dict[int, tuple[Dataset, Dataset]] = {}
        for cell, seed in tasks:
            seed_data = data
            if isinstance(data, DataSpec):
                try:
                    if seed not in cache:
                        cache[seed] = data.build(seed)
                    seed_data = cache[seed]
                except Exception as exc:
                    record(cell, seed, (None, f"{type(exc).__name__}: {exc}", 0.0))
                    continue
            record(cell, seed, _run_task(cell, seed, seed_data, hp, ks))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_task, cell, seed, data, hp, ks) for cell, seed in tasks]
            for (cell, seed), fut in zip(tasks, futures):
                record(cell, seed, fut.result())
    return [results[cell] for cell in grid.cells]


# ---------------------------------------------------------------------------
# reports


def grid_report(results: list[CellResult], hp: HyperParams, ks: Iterable[int] = DEFAULT_RANKS,
                config: dict | None = None) -> dict:
    ks = sorted(ks)
    cells = []
    for res in results:
        cells.append(
            {
                "variant": res.cell.variant.tag,
                "stage2_start": res.cell.stage2_start if res.cell.stage2_start is not None else hp.stage2_start,
                "label": res.cell.label,
                "seeds": sorted(res.per_seed),
                "per_seed": {f"r{k}": [res.per_seed[s].ranks[k] for s in sorted(res.per_seed)] for k in ks},
                "mean": {f"r{k}": res.mean(k) for k in ks},
                "errors": {str(s): e for s, e in res.errors.items()},
                "seconds": res.seconds,
            }
        )
    out = {"hyperparams_hash": hyperparams_hash(hp), "cells": cells}
    if config is not None:
        out["config"] = config
    return out


PROVENANCE = ("version", "config_hash")


def _rank_keys(keys) -> list[str]:
    return sorted(keys, key=lambda s: int(s[1:]))


def grid_csv(report: dict) -> str:
    buf = io.StringIO()
    cells = report["cells"]
    keys = _rank_keys(cells[0]["mean"]) if cells else []
    tail = [report["hyperparams_hash"]] + [report.get(k, "") for k in PROVENANCE]
    w = csv.writer(buf)
    w.writerow(["variant", "stage2_start", "seed"] + keys + ["hyperparams_hash", *PROVENANCE])
    for c in cells:
        for i, s in enumerate(c["seeds"]):
            w.writerow([c["variant"], c["stage2_start"], s] + [c["per_seed"][k][i] for k in keys] + tail)
        w.writerow([c["variant"], c["stage2_start"], "mean"] + [c["mean"][k] for k in keys] + tail)
    return buf.getvalue()


def result_csv(result: dict) -> str:
    buf = io.StringIO()
    keys = _rank_keys(result["ranks"])
    w = csv.writer(buf)
    w.writerow(["variant", "seed"] + keys + ["query_count", "gallery_size", "hyperparams_hash", *PROVENANCE])
    w.writerow([result["variant"], result["seed"]] + [result["ranks"][k] for k in keys]
               + [result["query_count"], result["gallery_size"], result.get("hyperparams_hash", "")]
               + [result.get(k, "") for k in PROVENANCE])
    return buf.getvalue()


def format_table(report: dict) -> str:
    """Plain-text table in the layout of the paradigm/ablation tables."""
    cells = report["cells"]
    keys = sorted(cells[0]["mean"], key=lambda s: int(s[1:])) if cells else []
    width = max([len(c["label"]) for c in cells] + [7])
    lines = [f"{'Variant':<{width}} | " + " | ".join(f"Rank-{k[1:]:>3}" for k in keys)]
    lines.append("-" * len(lines[0]))
    for c in cells:
        vals = " | ".join(f"{c['mean'][k]:8.2f}" for k in keys)
        note = f"  ({len(c['errors'])} failed)" if c["errors"] else ""
        lines.append(f"{c['label']:<{width}} | {vals}{note}")
    return "\n".join(lines)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
