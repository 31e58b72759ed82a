"""Finite-difference verification of every differentiable operation.

Each check builds random inputs at p=16, Q=5 and a batch of 6, then
compares reverse-mode gradients against central differences for every
input and parameter it touches.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .manifold import LASM_KINDS, distribution_shift, embed_pair, init_lasm, init_manifold, init_perceptron, lasm_variant, xproj
from .model import Variant, batch_features, init_model
from .objectives import BatchFeatures, id_loss, init_classifier, ranking_loss, stage1_loss, stage2_loss
from .representation import FeatureMatrix, encode_raw, init_head, usem, usem_variant
from .similarity import cross_modal_attention, fine_grained
from .synthgen import SampleRecord, TEXTUAL, VISUAL

P, Q, BATCH, D_RAW = 16, 5, 6, 12
MODULES = ("numerics", "representation", "manifold", "similarity", "objectives", "pipeline")
KINK_MARGIN = 1e-4
MAX_ATTEMPTS = 25
COORDS = 12
PIPELINE_COORDS = 3


@dataclass
class CheckResult:
    module: str
    name: str
    max_rel_error: float = 0.0
    worst: str = ""
    seeds: int = 0
    seconds: float = 0.0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def absorb(self, error: float, where: str) -> None:
        if error > self.max_rel_error or not self.worst:
            self.max_rel_error = max(error, self.max_rel_error)
            self.worst = where


@dataclass
class OpCheck:
    module: str
    name: str
    run: Callable[[int, float, float, CheckResult], None]


def _project(out: nx.Tensor, weights: dict) -> nx.Tensor:
    """Reduce to a scalar with fixed random weights (drawn on first use)."""
    if out.data.size == 1:
        return nx.reshape(out, ())
    if "C" not in weights:
        weights["C"] = np.random.default_rng([weights["seed"], 0xC0DE]).normal(size=out.shape)
    return nx.total(out * weights["C"])


def _settle(make: Callable[[np.random.Generator], dict], fn: Callable[..., nx.Tensor], seed: int) -> dict:
    """Draw arguments away from hinge, threshold and ELU break points."""
    args = None
    for attempt in range(MAX_ATTEMPTS):
        args = make(np.random.default_rng([seed, attempt]))
        with nx.kink_monitor() as log:
            fn(**args)
        if not log or min(log) >= KINK_MARGIN:
            break
    return args


def functional(module: str, name: str, fn: Callable[..., nx.Tensor], make, wrt: tuple[str, ...]) -> OpCheck:
    def run(seed: int, h: float, tol: float, result: CheckResult) -> None:
        args = _settle(make, fn, seed)
        weights = {"seed": seed}
        for arg in wrt:
            x = np.asarray(args[arg], dtype=np.float64)

            def f(leaf, arg=arg):
                return _project(fn(**{**args, arg: leaf}), weights)

            coords = list(np.ndindex(x.shape))
            if len(coords) > 4 * COORDS:
                pick = np.random.default_rng([seed, 7]).choice(len(coords), 4 * COORDS, replace=False)
                coords = [coords[i] for i in sorted(pick)]
            rep = nx.finite_difference_check(f, x, h=h, tol=tol, coords=coords)
            result.absorb(rep.max_rel_error, f"seed {seed}, input {arg}{list(rep.worst_index or ())}")

    return OpCheck(module, name, run)


def parametric(module: str, name: str, build: Callable[[np.random.Generator], tuple[Callable[[], nx.Tensor], dict]],
               coords: int = COORDS) -> OpCheck:
    def run(seed: int, h: float, tol: float, result: CheckResult) -> None:
        loss_fn = params = None
        for attempt in range(MAX_ATTEMPTS):
            loss_fn, params = build(np.random.default_rng([seed, attempt]))
            with nx.kink_monitor() as log:
                loss_fn()
            if not log or min(log) >= KINK_MARGIN:
                break
        reports = nx.finite_difference_check_params(
            loss_fn, params, h=h, tol=tol, coords_per_param=coords, rng=np.random.default_rng([seed, 11])
        )
        for pname, rep in reports.items():
            result.absorb(rep.max_rel_error, f"seed {seed}, parameter {pname}{list(rep.worst_index or ())}")

    return OpCheck(module, name, run)


# ---------------------------------------------------------------------------
# random inputs


def _n(rng, *shape, scale=1.0):
    return rng.normal(scale=scale, size=shape)


def _fm(rng, m=4, batch=None, pad=False) -> tuple[np.ndarray, np.ndarray]:
    shape = (m + 1, P) if batch is None else (batch, m + 1, P)
    cols = _n(rng, *shape, scale=0.5)
    mask = np.ones(shape[:-2] + (m,), dtype=bool)
    if pad and batch is not None:
        for i in range(batch):
            mask[i, rng.integers(1, m + 1):] = False
    return cols, mask


def _records(rng, modality, batch, m_range):
    out = []
    for _ in range(batch):
        m = int(rng.integers(m_range[0], m_range[1] + 1))
        out.append(SampleRecord(0, modality, rng.normal(size=(D_RAW, m + 1)).astype(np.float32)))
    return out


def _params_of(obj, prefix="") -> dict:
    return obj.named(prefix)


# ---------------------------------------------------------------------------
# the catalogue


def _numerics_checks() -> list[OpCheck]:
    mod = "numerics"
    return [
        functional(mod, "affine", lambda x, W, b: nx.affine(x, W, b),
                   lambda r: {"x": _n(r, BATCH, 5), "W": _n(r, 4, 5), "b": _n(r, 4)}, ("x", "W", "b")),
        *[
            functional(mod, f"activation[{k}]", lambda x, k=k: nx.activation(x, k),
                       lambda r: {"x": _n(r, BATCH, P)}, ("x",))
            for k in ("sigmoid", "tanh", "elu")
        ],
        functional(mod, "softmax_weights", lambda s: nx.softmax_weights(s),
                   lambda r: {"s": _n(r, BATCH, 7)}, ("s",)),
        functional(mod, "log_softmax", lambda s: nx.log_softmax(s), lambda r: {"s": _n(r, BATCH, Q)}, ("s",)),
        functional(mod, "moments", lambda x: nx.moments(x).mean * 0.7 + nx.moments(x).std * 1.3,
                   lambda r: {"x": _n(r, BATCH, P)}, ("x",)),
        functional(mod, "cosine", lambda x, y: nx.cosine(x, y),
                   lambda r: {"x": _n(r, BATCH, P), "y": _n(r, BATCH, P)}, ("x", "y")),
        functional(mod, "cosine_matrix", lambda x, y: nx.cosine_matrix(x, y),
                   lambda r: {"x": _n(r, BATCH, P), "y": _n(r, BATCH, P)}, ("x", "y")),
        functional(mod, "weighted_sum", lambda w, X: nx.weighted_sum(w, X),
                   lambda r: {"w": _n(r, BATCH, 4), "X": _n(r, BATCH, 4, P)}, ("w", "X")),
        functional(mod, "concat", lambda a, b: nx.concat([a, b]),
                   lambda r: {"a": _n(r, BATCH, 3), "b": _n(r, BATCH, P)}, ("a", "b")),
        functional(mod, "hinge", lambda x: nx.hinge(x), lambda r: {"x": _n(r, BATCH, P)}, ("x",)),
    ]


def _representation_checks() -> list[OpCheck]:
    mod = "representation"

    def encode_build(rng):
        head = init_head(rng, D_RAW, P)
        raw = nx.Tensor(_n(rng, BATCH, 5, D_RAW))
        mask = np.ones((BATCH, 4), dtype=bool)
        return (lambda: _project(encode_raw(raw, mask, head, VISUAL).columns, {"seed": 3})), _params_of(head)

    def encode_raw_fn(raw):
        head = init_head(np.random.default_rng(5), D_RAW, P)
        return encode_raw(raw, np.ones((BATCH, 3), dtype=bool), head, VISUAL).columns

    checks = [
        parametric(mod, "encode[params]", encode_build),
        functional(mod, "encode[raw]", encode_raw_fn, lambda r: {"raw": _n(r, BATCH, 4, D_RAW)}, ("raw",)),
        functional(mod, "usem", lambda cols, mask: usem(FeatureMatrix(nx.as_tensor(cols), mask, VISUAL)),
                   lambda r: dict(zip(("cols", "mask"), _fm(r, 5, BATCH, pad=True))), ("cols",)),
    ]
    for kind in ("glo", "avg", "avgloc_glo"):
        checks.append(
            functional(mod, f"usem_variant[{kind}]",
                       lambda cols, mask, kind=kind: usem_variant(FeatureMatrix(nx.as_tensor(cols), mask, TEXTUAL), kind),
                       lambda r: dict(zip(("cols", "mask"), _fm(r, 5, BATCH, pad=True))), ("cols",))
        )
    return checks


def _manifold_checks() -> list[OpCheck]:
    mod = "manifold"
    pair = lambda r: {"s": _n(r, BATCH, P), "t": _n(r, BATCH, P, scale=2.0) + 0.5}

    def xproj_params(rng):
        mlp = init_perceptron(rng, P)
        s, t = nx.Tensor(_n(rng, BATCH, P)), nx.Tensor(_n(rng, BATCH, P))
        return (lambda: _project(xproj(s, t, mlp), {"seed": 4})), _params_of(mlp)

    checks = [
        functional(mod, "distribution_shift", lambda s, t: distribution_shift(s, t), pair, ("s", "t")),
        functional(mod, "xproj[inputs]",
                   lambda s, t: xproj(s, t, init_perceptron(np.random.default_rng(9), P)), pair, ("s", "t")),
        functional(mod, "xproj[no shift]",
                   lambda s, t: xproj(s, t, init_perceptron(np.random.default_rng(9), P), shift=False), pair, ("s",)),
        parametric(mod, "xproj[params]", xproj_params),
    ]
    for kind in LASM_KINDS:
        def lasm_inputs(s, t, kind=kind):
            return lasm_variant(s, t, init_lasm(np.random.default_rng(13), P, kind))

        def lasm_params(rng, kind=kind):
            params = init_lasm(rng, P, kind)
            s, t = nx.Tensor(_n(rng, BATCH, P)), nx.Tensor(_n(rng, BATCH, P))
            return (lambda: _project(lasm_variant(s, t, params), {"seed": 5})), _params_of(params)

        checks.append(functional(mod, f"lasm[{kind}][inputs]", lasm_inputs, pair, ("s", "t")))
        if kind not in ("add", "concat"):
            checks.append(parametric(mod, f"lasm[{kind}][params]", lasm_params))

    def embed_build(rng):
        params = init_manifold(rng, P)
        v, t = nx.Tensor(_n(rng, BATCH, P)), nx.Tensor(_n(rng, BATCH, P))

        def loss():
            e = embed_pair(v, t, params)
            return nx.total(nx.cosine(e.v_c, e.t_c)) + _project(e.v_p, {"seed": 6})

        return loss, _params_of(params)

    checks.append(parametric(mod, "embed_pair[params]", embed_build))
    checks.append(functional(mod, "embed_pair[inputs]",
                             lambda v, t: nx.cosine(*_vt(embed_pair(v, t, init_manifold(np.random.default_rng(17), P)))),
                             lambda r: {"v": _n(r, BATCH, P), "t": _n(r, BATCH, P)}, ("v", "t")))
    return checks


def _vt(e):
    return e.v_c, e.t_c


def _similarity_checks() -> list[OpCheck]:
    mod = "similarity"

    def ca(y, X, mask):
        return cross_modal_attention(y, X, mask=mask)[0]

    def ca_args(r):
        X, mask = _fm(r, 5, BATCH, pad=True)
        return {"y": _n(r, BATCH, P), "X": X[:, 1:], "mask": mask}

    def fine(vg, tg, V, T, vm, tm):
        return fine_grained(vg, tg, V, T, vm, tm).sim_f

    def fine_args(r):
        V, vm = _fm(r, 6, BATCH)
        T, tm = _fm(r, 5, BATCH, pad=True)
        return {"vg": _n(r, BATCH, P), "tg": _n(r, BATCH, P), "V": V[:, 1:], "T": T[:, 1:], "vm": vm, "tm": tm}

    return [
        functional(mod, "sim_common", lambda x, y: nx.cosine(x, y),
                   lambda r: {"x": _n(r, BATCH, P), "y": _n(r, BATCH, P)}, ("x", "y")),
        functional(mod, "cross_modal_attention", ca, ca_args, ("y", "X")),
        functional(mod, "sim_fine", fine, fine_args, ("vg", "tg", "V", "T")),
    ]


def _labels(rng) -> np.ndarray:
    labels = rng.integers(0, Q, size=BATCH)
    labels[:2] = [0, 1]  # at least two identities
    return labels


def _objective_checks() -> list[OpCheck]:
    mod = "objectives"

    def rk_args(r):
        return {"a": _n(r, BATCH, P), "b": _n(r, BATCH, P), "labels": _labels(r)}

    def id_build(rng):
        cls = init_classifier(rng, Q, P, scale=1.0)
        x = nx.Tensor(_n(rng, BATCH, P))
        labels = _labels(rng)
        return (lambda: id_loss(x, labels, cls)), _params_of(cls)

    def features(rng, stage2: bool) -> tuple[BatchFeatures, dict]:
        names = ["v_g", "t_g", "v_f", "t_f"] + (["v_u", "t_u", "v_p", "t_p", "v_c", "t_c"] if stage2 else [])
        leaves = {n: nx.parameter(_n(rng, BATCH, P)) for n in names}
        return BatchFeatures(labels=_labels(rng), **leaves), leaves

    def stage_build(rng, stage2: bool):
        f, leaves = features(rng, stage2)
        cls = init_classifier(rng, Q, P, scale=1.0)
        leaves.update(_params_of(cls, "classifier."))
        if stage2:
            return (lambda: stage2_loss(f, cls, 0.2, 1.0, 1.0, 1.0).total), leaves
        return (lambda: stage1_loss(f, cls, 0.2, 1.0).total), leaves

    return [
        functional(mod, "ranking_loss", lambda a, b, labels: ranking_loss(a, b, labels, 0.2), rk_args, ("a", "b")),
        functional(mod, "id_loss[features]",
                   lambda x, labels: id_loss(x, labels, init_classifier(np.random.default_rng(2), Q, P, scale=1.0)),
                   lambda r: {"x": _n(r, BATCH, P), "labels": _labels(r)}, ("x",)),
        parametric(mod, "id_loss[classifier]", id_build),
        parametric(mod, "stage1_loss", lambda r: stage_build(r, False)),
        parametric(mod, "stage2_loss", lambda r: stage_build(r, True)),
    ]


def _pipeline_checks() -> list[OpCheck]:
    def build(rng, variant: Variant, stage: int):
        params = init_model(rng, variant, D_RAW, P, Q)
        visual = _records(rng, VISUAL, BATCH, (6, 6))
        textual = _records(rng, TEXTUAL, BATCH, (3, 8))
        labels = _labels(rng)

        def loss():
            f = batch_features(visual, textual, labels, params, variant, stage)
            cls = params.classifier
            if stage == 1:
                return stage1_loss(f, cls, 0.2, 1.0).total
            return stage2_loss(f, cls, 0.2, 1.0, 1.0, 1.0, params.common_classifier).total

        return loss, params.named()

    out = []
    # the whole model has ~30 tensors; a few coordinates each keeps this fast
    for variant, stage in ((Variant(), 2), (Variant("cdcp_sha", "usem"), 2), (Variant(ds=False), 2)):
        out.append(parametric("pipeline", f"{variant.tag}[stage{stage}]",
                              lambda r, v=variant, s=stage: build(r, v, s), coords=PIPELINE_COORDS))
    return out


def catalogue() -> list[OpCheck]:
    return (
        _numerics_checks()
        + _representation_checks()
        + _manifold_checks()
        + _similarity_checks()
        + _objective_checks()
        + _pipeline_checks()
    )


@dataclass
class GradcheckReport:
    results: list[CheckResult] = field(default_factory=list)
    tol: float = 1e-4
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def by_module(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.results:
            out[r.module] = max(out.get(r.module, 0.0), r.max_rel_error)
        return out

    def format(self) -> str:
        width = max(len(f"{r.module}.{r.name}") for r in self.results) if self.results else 10
        lines = [f"{'operation':<{width}}  max rel err  status"]
        for r in self.results:
            status = "ok" if r.passed else f"FAIL ({r.worst})"
            lines.append(f"{r.module + '.' + r.name:<{width}}  {r.max_rel_error:11.3e}  {status}")
        lines.append("")
        lines.append("per module:")
        for mod, err in self.by_module().items():
            ok = all(r.passed for r in self.results if r.module == mod)
            lines.append(f"  {mod:<16} {err:11.3e}  {'pass' if ok else 'FAIL'}")
        return "\n".join(lines)


def run_gradcheck(modules=MODULES, seeds: int = 10, tol: float = 1e-4, h: float = 1e-5) -> GradcheckReport:
    unknown = set(modules) - set(MODULES)
    if unknown:
        raise ValueError(f"unknown module(s) {sorted(unknown)}; choose from {MODULES}")
    start = time.perf_counter()
    report = GradcheckReport(tol=tol)
    for check in catalogue():
        if check.module not in modules:
            continue
        result = CheckResult(check.module, check.name, tol=tol)
        t0 = time.perf_counter()
        for seed in range(seeds):
            check.run(seed, h, tol, result)
            result.seeds += 1
        result.seconds = time.perf_counter() - t0
        report.results.append(result)
    report.seconds = time.perf_counter() - start
    return report
