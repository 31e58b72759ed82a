"""Bidirectional ranking loss, identity loss and the staged composites."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor
from .params import ParamGroup, zeros

log = logging.getLogger(__name__)


@dataclass
class ClassifierParams(ParamGroup):
    W_id: Tensor

    @property
    def Q(self) -> int:
        return self.W_id.shape[0]


def init_classifier(rng: np.random.Generator, Q: int, p: int, scale: float | None = None) -> ClassifierParams:
    bound = np.sqrt(1.0 / p) if scale is None else scale
    return ClassifierParams(nx.parameter(rng.uniform(-bound, bound, size=(Q, p))))


def zero_classifier(Q: int, p: int) -> ClassifierParams:
    return ClassifierParams(zeros(Q, p))


def ranking_loss(x1, x2, labels, beta: float = 0.2, reduction: str = "mean") -> Tensor:
    """Hinge ranking loss over every mismatched counterpart, both directions.

    Row ``i`` of ``x1`` and ``x2`` is a matched pair with identity
    ``labels[i]``; any row with another identity is a negative. Per pair,
    the loss sums ``max(beta - cos(x1_i, x2_i) + cos(x1_i, x2_j), 0)`` and
    ``max(beta - cos(x1_i, x2_i) + cos(x1_j, x2_i), 0)`` over negatives
    ``j``; ``reduction`` averages or sums over pairs.
    """
    labels = np.asarray(labels)
    x1, x2 = nx.as_tensor(x1), nx.as_tensor(x2)
    n = x1.shape[0]
    negatives = labels[:, None] != labels[None, :]
    if not negatives.any():
        log.warning("ranking loss on a batch with a single identity: no negatives, loss is 0")
        return Tensor(0.0)
    C = nx.cosine_matrix(x1, x2)
    pos = nx.take(nx.reshape(C, (n * n,)), np.arange(n) * (n + 1), axis=0)
    # anchor x1_i against x2_j and anchor x2_i against x1_j
    a = nx.hinge(beta - nx.reshape(pos, (n, 1)) + C)
    b = nx.hinge(beta - nx.reshape(pos, (1, n)) + C)
    weights = negatives.astype(np.float64)
    out = nx.total(a * weights) + nx.total(b * weights)
    if reduction == "mean":
        return out * (1.0 / n)
    if reduction == "sum":
        return out
    raise ValueError(f"unknown reduction {reduction!r}")


def id_loss(x, labels, params: ClassifierParams, reduction: str = "mean") -> Tensor:
    """Cross-entropy of a bias-free linear classifier at the true identity."""
    x = nx.as_tensor(x)
    single = x.data.ndim == 1
    labels = np.atleast_1d(np.asarray(labels))
    if labels.size and (labels.min() < 0 or labels.max() >= params.Q):
        raise ContractError(f"identity label out of range [0, {params.Q})")
    if single:
        x = nx.reshape(x, (1, x.shape[0]))
    logp = nx.log_softmax(nx.affine(x, params.W_id))
    onehot = np.zeros(logp.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    nll = -nx.total(logp * onehot)
    if reduction == "mean":
        return nll * (1.0 / len(labels))
    if reduction == "sum":
        return nll
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class LossReport:
    total: Tensor
    parts: dict[str, float] = field(default_factory=dict)

    def value(self) -> float:
        return self.total.item()

    def __getitem__(self, key: str) -> float:
        return self.parts[key]


@dataclass
class BatchFeatures:
    """Everything the staged losses may need for one mini-batch of pairs.

    Only ``v_g``, ``t_g`` and ``labels`` are mandatory; the rest is filled
    in as the variant provides it.
    """

    labels: np.ndarray
    v_g: Tensor
    t_g: Tensor
    v_f: Tensor | None = None
    t_f: Tensor | None = None
    v_u: Tensor | None = None
    t_u: Tensor | None = None
    v_p: Tensor | None = None
    t_p: Tensor | None = None
    v_c: Tensor | None = None
    t_c: Tensor | None = None


def _group(terms: list[tuple[str, Tensor]], parts: dict[str, float], prefix: str) -> Tensor:
    acc = None
    for name, t in terms:
        parts[f"{prefix}.{name}"] = t.item()
        acc = t if acc is None else acc + t
    parts[prefix] = acc.item()
    return acc


def global_loss(f: BatchFeatures, cls: ClassifierParams, beta: float, parts: dict) -> Tensor:
    return _group(
        [
            ("id_v", id_loss(f.v_g, f.labels, cls)),
            ("id_t", id_loss(f.t_g, f.labels, cls)),
            ("rk", ranking_loss(f.v_g, f.t_g, f.labels, beta)),
        ],
        parts,
        "L_g",
    )


def fine_loss(f: BatchFeatures, cls: ClassifierParams, beta: float, parts: dict) -> Tensor:
    return _group(
        [
            ("id_v", id_loss(f.v_f, f.labels, cls)),
            ("id_t", id_loss(f.t_f, f.labels, cls)),
            ("rk_vg_tf", ranking_loss(f.v_g, f.t_f, f.labels, beta)),
            ("rk_vf_tg", ranking_loss(f.v_f, f.t_g, f.labels, beta)),
        ],
        parts,
        "L_f",
    )


def projection_loss(f: BatchFeatures, cls: ClassifierParams, beta: float, parts: dict) -> Tensor:
    return _group(
        [
            ("id_vu", id_loss(f.v_u, f.labels, cls)),
            ("id_tu", id_loss(f.t_u, f.labels, cls)),
            ("id_vp", id_loss(f.v_p, f.labels, cls)),
            ("id_tp", id_loss(f.t_p, f.labels, cls)),
            ("rk_vp_tu", ranking_loss(f.v_p, f.t_u, f.labels, beta)),
            ("rk_vu_tp", ranking_loss(f.v_u, f.t_p, f.labels, beta)),
        ],
        parts,
        "L_p",
    )


def common_loss(f: BatchFeatures, cls: ClassifierParams, beta: float, parts: dict) -> Tensor:
    return _group(
        [
            ("id_v", id_loss(f.v_c, f.labels, cls)),
            ("id_t", id_loss(f.t_c, f.labels, cls)),
            ("rk", ranking_loss(f.v_c, f.t_c, f.labels, beta)),
        ],
        parts,
        "L_c",
    )


def stage1_loss(f: BatchFeatures, cls: ClassifierParams, beta: float = 0.2, lambda3: float = 1.0) -> LossReport:
    parts: dict[str, float] = {}
    total = global_loss(f, cls, beta, parts)
    if lambda3 != 0.0 and f.v_f is not None:
        total = total + lambda3 * fine_loss(f, cls, beta, parts)
    parts["stage1"] = total.item()
    return LossReport(total, parts)


def stage2_loss(
    f: BatchFeatures,
    cls: ClassifierParams,
    beta: float = 0.2,
    lambda3: float = 1.0,
    lambda4: float = 1.0,
    lambda5: float = 1.0,
    common_cls: ClassifierParams | None = None,
) -> LossReport:
    """Stage-one loss plus the projection and common-embedding terms.

    ``common_cls`` classifies common features when they are wider than
    ``p`` (the plain concatenation variant).
    """
    report = stage1_loss(f, cls, beta, lambda3)
    parts = report.parts
    total = report.total
    if lambda4 != 0.0 and f.v_p is not None:
        total = total + lambda4 * projection_loss(f, cls, beta, parts)
    if lambda5 != 0.0 and f.v_c is not None:
        total = total + lambda5 * common_loss(f, common_cls or cls, beta, parts)
    parts["stage2"] = total.item()
    return LossReport(total, parts)
