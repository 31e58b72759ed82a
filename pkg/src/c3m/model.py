"""Variant-aware composition of heads, pooling, mapping and scoring.

The six mapping paradigms and the component ablations all share one
forward pass; :class:`Variant` says which pieces are switched on.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .manifold import LASM_KINDS, ManifoldParams, Perceptron, embed_pair, init_manifold, init_perceptron
from .numerics import Tensor
from .objectives import BatchFeatures, ClassifierParams, init_classifier
from .params import ParamGroup
from .representation import USEM_KINDS, FeatureMatrix, HeadParams, encode_raw, init_heads, pack_raw, usem_variant
from .similarity import cross_modal_attention
from .synthgen import TEXTUAL, VISUAL, ConfigError, SampleRecord

PARADIGMS = ("cdcp_sep", "cdcp_sha", "lbul")
FAMILIES = ("glo", "usem")


@dataclass(frozen=True)
class Variant:
    """One cell of the ablation grid.

    ``family="glo"`` reproduces the single-similarity global-feature rows;
    ``family="usem"`` scores with common + global + fine-grained terms.
    """

    paradigm: str = "lbul"
    family: str = "usem"
    usem: str = "usem"
    lasm: str = "vector_gate_concat"
    ds: bool = True
    shared_lasm: bool = True

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"unknown paradigm {self.paradigm!r}; expected one of {PARADIGMS}", "variant")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}", "variant")
        if self.usem not in USEM_KINDS:
            raise ConfigError(f"unknown usem kind {self.usem!r}; expected one of {USEM_KINDS}", "variant")
        if self.lasm not in LASM_KINDS:
            raise ConfigError(f"unknown lasm kind {self.lasm!r}; expected one of {LASM_KINDS}", "variant")

    @property
    def pooling(self) -> str:
        return "glo" if self.family == "glo" else self.usem

    @property
    def tag(self) -> str:
        base = f"{self.paradigm}_{self.family}"
        mods = []
        default = Variant()
        if self.usem != default.usem:
            mods.append(f"usem={self.usem}")
        if self.lasm != default.lasm:
            mods.append(f"lasm={self.lasm}")
        if not self.ds:
            mods.append("ds=off")
        if not self.shared_lasm:
            mods.append("lasm_shared=off")
        return "+".join([base] + mods)

    @classmethod
    def parse(cls, tag: str) -> "Variant":
        head, *mods = tag.strip().split("+")
        for family in FAMILIES:
            if head.endswith("_" + family):
                paradigm = head[: -len(family) - 1]
                break
        else:
            raise ConfigError(f"variant {tag!r}: expected <paradigm>_<glo|usem>[+mod=value...]", "variant")
        kwargs: dict = {"paradigm": paradigm, "family": family}
        for mod in mods:
            key, _, value = mod.partition("=")
            if key == "usem":
                kwargs["usem"] = value
            elif key == "lasm":
                kwargs["lasm"] = value
            elif key == "ds":
                kwargs["ds"] = _flag(value, tag)
            elif key == "lasm_shared":
                kwargs["shared_lasm"] = _flag(value, tag)
            else:
                raise ConfigError(f"variant {tag!r}: unknown modifier {key!r}", "variant")
        return cls(**kwargs)


def _flag(value: str, tag: str) -> bool:
    if value in ("on", "true", "1"):
        return True
    if value in ("off", "false", "0"):
        return False
    raise ConfigError(f"variant {tag!r}: flag value {value!r} is not on/off", "variant")


@dataclass
class ModelParams(ParamGroup):
    heads: HeadParams
    classifier: ClassifierParams
    mapper: Perceptron | None = None
    manifold: ManifoldParams | None = None
    common_classifier: ClassifierParams | None = None


def init_model(rng: np.random.Generator, variant: Variant, d_raw: int, p: int, Q: int) -> ModelParams:
    heads = init_heads(rng, d_raw, p)
    classifier = init_classifier(rng, Q, p)
    mapper = manifold = common = None
    if variant.paradigm == "cdcp_sha":
        mapper = init_perceptron(rng, p)
    elif variant.paradigm == "lbul":
        manifold = init_manifold(rng, p, variant.lasm, variant.shared_lasm, variant.ds)
        if variant.lasm == "concat":
            common = init_classifier(rng, Q, 2 * p)
    return ModelParams(heads, classifier, mapper, manifold, common)


def stage1_param_names(params: ModelParams) -> set[str]:
    """Parameters trained before the second stage starts."""
    return set(params.heads.named("heads.")) | set(params.classifier.named("classifier."))


# ---------------------------------------------------------------------------
# batch forward (training)


def encode_records(records: Sequence[SampleRecord], params: ModelParams, modality: int) -> FeatureMatrix:
    raw, mask = pack_raw(records)
    return encode_raw(raw, mask, params.heads.for_modality(modality), modality)


def batch_features(
    visual: Sequence[SampleRecord],
    textual: Sequence[SampleRecord],
    labels: np.ndarray,
    params: ModelParams,
    variant: Variant,
    stage: int,
) -> BatchFeatures:
    """Features for matched pairs ``(visual[i], textual[i])``."""
    Fv = encode_records(visual, params, VISUAL)
    Ft = encode_records(textual, params, TEXTUAL)
    return features_from_matrices(Fv, Ft, labels, params, variant, stage)


def features_from_matrices(
    Fv: FeatureMatrix, Ft: FeatureMatrix, labels, params: ModelParams, variant: Variant, stage: int
) -> BatchFeatures:
    v_g, t_g = Fv.global_, Ft.global_
    f = BatchFeatures(labels=np.asarray(labels), v_g=v_g, t_g=t_g)
    if variant.family == "usem":
        f.v_f, _ = cross_modal_attention(t_g, Fv.locals_, mask=Fv.mask)
        f.t_f, _ = cross_modal_attention(v_g, Ft.locals_, mask=Ft.mask)
    if stage < 2:
        return f
    v_u = usem_variant(Fv, variant.pooling)
    t_u = usem_variant(Ft, variant.pooling)
    if variant.paradigm == "lbul":
        emb = embed_pair(v_u, t_u, params.manifold)
        f.v_u, f.t_u, f.v_p, f.t_p, f.v_c, f.t_c = v_u, t_u, emb.v_p, emb.t_p, emb.v_c, emb.t_c
    elif variant.paradigm == "cdcp_sha":
        f.v_c, f.t_c = params.mapper(v_u), params.mapper(t_u)
    elif variant.family == "usem":
        f.v_c, f.t_c = v_u, t_u
    return f


# ---------------------------------------------------------------------------
# retrieval scoring (no gradients)


@dataclass
class Encoded:
    """Frozen per-record features for one modality."""

    fm: FeatureMatrix
    unified: np.ndarray
    labels: np.ndarray


def freeze_params(params: ModelParams) -> ModelParams:
    """Copy of ``params`` whose tensors do not track gradients."""
    import copy

    frozen = copy.deepcopy(params)
    for t in frozen.named().values():
        t.requires_grad = False
        t.grad = None
    return frozen


def encode_frozen(records: Sequence[SampleRecord], params: ModelParams, variant: Variant, modality: int) -> Encoded:
    fm = encode_records(records, params, modality)
    unified = usem_variant(fm, variant.pooling).data
    labels = np.array([r.identity for r in records])
    return Encoded(fm, unified, labels)


def similarity_matrix(
    queries: Encoded,
    gallery: Encoded,
    params: ModelParams,
    variant: Variant,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    block: int = 16,
) -> np.ndarray:
    """Query (textual) x gallery (visual) overall similarity for a variant."""
    nq = queries.unified.shape[0]
    out = np.empty((nq, gallery.unified.shape[0]))
    for start in range(0, nq, block):
        sl = slice(start, min(nq, start + block))
        out[sl] = _score_block(queries, gallery, sl, params, variant, lambda1, lambda2)
    return out


def _score_block(q: Encoded, g: Encoded, sl: slice, params, variant, lambda1, lambda2) -> np.ndarray:
    t_g = q.fm.global_.data[sl]
    v_g = g.fm.global_.data
    t_u = q.unified[sl][:, None, :]
    v_u = g.unified[None, :, :]
    mapped = _mapped_similarity(v_u, t_u, params, variant)
    if variant.family == "glo":
        return mapped
    sim_g = nx.cosine(v_g[None, :, :], t_g[:, None, :]).data
    # v_f[q, g]: query global attends over gallery locals; t_f the reverse
    v_f, _ = cross_modal_attention(t_g[:, None, :], g.fm.locals_.data[None], mask=g.fm.mask[None])
    t_f, _ = cross_modal_attention(v_g[None, :, :], q.fm.locals_.data[sl][:, None], mask=q.fm.mask[sl][:, None])
    sim_f = 0.5 * (nx.cosine(v_g[None, :, :], t_f).data + nx.cosine(v_f, t_g[:, None, :]).data)
    return mapped + lambda1 * sim_g + lambda2 * sim_f


def _mapped_similarity(v_u: np.ndarray, t_u: np.ndarray, params: ModelParams, variant: Variant) -> np.ndarray:
    if variant.paradigm == "lbul":
        emb = embed_pair(v_u, t_u, params.manifold)
        return nx.cosine(emb.v_c, emb.t_c).data
    if variant.paradigm == "cdcp_sha":
        return nx.cosine(params.mapper(v_u), params.mapper(t_u)).data
    return nx.cosine(v_u, t_u).data


def with_variant(variant: Variant, **changes) -> Variant:
    return replace(variant, **changes)
