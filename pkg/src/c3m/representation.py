"""Trainable heads over backbone outputs, and unified-feature pooling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .params import ParamGroup, linear_init, ones, zeros
from .synthgen import ConfigError, SampleRecord

USEM_KINDS = ("glo", "avg", "avgloc_glo", "usem")


@dataclass
class FeatureMatrix:
    """Global column plus local columns, stored row-per-column.

    ``columns`` has shape (..., m + 1, p); row 0 is the global feature.
    ``mask`` (..., m) flags real local columns when a batch pads captions
    with different phrase counts.
    """

    columns: Tensor
    mask: np.ndarray
    modality: int

    @property
    def p(self) -> int:
        return self.columns.shape[-1]

    @property
    def m(self) -> int:
        return self.columns.shape[-2] - 1

    @property
    def local_counts(self) -> np.ndarray:
        return self.mask.sum(axis=-1)

    @property
    def global_(self) -> Tensor:
        return nx.take(self.columns, 0, axis=-2)

    @property
    def locals_(self) -> Tensor:
        return nx.take(self.columns, np.arange(1, self.m + 1), axis=-2)


@dataclass
class GroupNorm(ParamGroup):
    gain: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        # one group: moments over the whole feature vector
        mom = nx.moments(x)
        centered = x - nx.unsqueeze(mom.mean)
        return centered / nx.unsqueeze(nx.guard(mom.std, site="group_norm")) * self.gain + self.bias


@dataclass
class Linear(ParamGroup):
    W: Tensor
    b: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.affine(x, self.W, self.b)


@dataclass
class ModalityHead(ParamGroup):
    global_norm: GroupNorm
    global_fc: Linear
    local_norm: GroupNorm
    local_fc1: Linear
    local_fc2: Linear

    @property
    def d_raw(self) -> int:
        return self.global_fc.W.shape[1]

    @property
    def p(self) -> int:
        return self.global_fc.W.shape[0]


@dataclass
class HeadParams(ParamGroup):
    visual: ModalityHead
    textual: ModalityHead

    def for_modality(self, modality: int) -> ModalityHead:
        return self.visual if modality == 0 else self.textual


def _as_row(x: Tensor) -> Tensor:
    """(..., p) -> (..., 1, p)"""
    return nx.reshape(x, x.shape[:-1] + (1, x.shape[-1]))


def init_head(rng: np.random.Generator, d_raw: int, p: int) -> ModalityHead:
    return ModalityHead(
        global_norm=GroupNorm(ones(d_raw), zeros(d_raw)),
        global_fc=Linear(linear_init(rng, p, d_raw), zeros(p)),
        local_norm=GroupNorm(ones(d_raw), zeros(d_raw)),
        local_fc1=Linear(linear_init(rng, p, d_raw), zeros(p)),
        local_fc2=Linear(linear_init(rng, p, p), zeros(p)),
    )


def init_heads(rng: np.random.Generator, d_raw: int, p: int) -> HeadParams:
    return HeadParams(init_head(rng, d_raw, p), init_head(rng, d_raw, p))


def pack_raw(samples: Sequence[SampleRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stack raw matrices as (B, m_max + 1, d_raw) with zero padding and a local mask."""
    m_max = max(s.m for s in samples)
    d_raw = samples[0].d_raw
    raw = np.zeros((len(samples), m_max + 1, d_raw))
    mask = np.zeros((len(samples), m_max), dtype=bool)
    for i, s in enumerate(samples):
        if s.d_raw != d_raw:
            raise nx.DimensionError(f"sample {i} has d_raw {s.d_raw}, expected {d_raw}")
        raw[i, : s.m + 1] = s.raw.T
        mask[i, : s.m] = True
    return raw, mask


def encode_raw(raw: np.ndarray | Tensor, mask: np.ndarray, head: ModalityHead, modality: int) -> FeatureMatrix:
    """Run the heads on packed raw columns of shape (..., m + 1, d_raw)."""
    raw = nx.as_tensor(raw)
    if raw.shape[-1] != head.d_raw:
        raise nx.DimensionError(f"raw feature height {raw.shape[-1]} does not match head input {head.d_raw}")
    m = raw.shape[-2] - 1
    g = head.global_fc(head.global_norm(nx.take(raw, 0, axis=-2)))
    loc = nx.take(raw, np.arange(1, m + 1), axis=-2)
    loc = head.local_fc2(nx.activation(head.local_fc1(head.local_norm(loc)), "elu"))
    cols = nx.concat([_as_row(g), loc], axis=-2)
    return FeatureMatrix(cols, mask, modality)


def encode(sample: SampleRecord | Sequence[SampleRecord], params: HeadParams) -> FeatureMatrix:
    """Encode one record, or a same-modality batch of records."""
    batch = [sample] if isinstance(sample, SampleRecord) else list(sample)
    modalities = {s.modality for s in batch}
    if len(modalities) != 1:
        raise ValueError("encode needs records of a single modality")
    modality = modalities.pop()
    raw, mask = pack_raw(batch)
    fm = encode_raw(raw, mask, params.for_modality(modality), modality)
    if isinstance(sample, SampleRecord):
        return FeatureMatrix(nx.take(fm.columns, 0, axis=0), fm.mask[0], modality)
    return fm


def usem_weights(F: FeatureMatrix) -> Tensor:
    scores = nx.dot(F.locals_, _as_row(F.global_))
    return nx.softmax_weights(scores, F.mask)


def usem(F: FeatureMatrix) -> Tensor:
    """Global feature plus the global-attended average of the locals."""
    if F.m < 1:
        raise nx.DimensionError("usem needs at least one local column")
    return nx.weighted_sum(usem_weights(F), F.locals_) + F.global_


def _masked_mean(F: FeatureMatrix) -> Tensor:
    counts = F.mask.sum(axis=-1, keepdims=True).astype(np.float64)
    return nx.weighted_sum(F.mask / counts, F.locals_)


def usem_variant(F: FeatureMatrix, kind: str) -> Tensor:
    if kind == "usem":
        return usem(F)
    if kind == "glo":
        return F.global_
    if kind == "avg":
        counts = F.mask.sum(axis=-1, keepdims=True) + 1.0
        w = np.concatenate([np.ones(F.mask.shape[:-1] + (1,)), F.mask], axis=-1) / counts
        return nx.weighted_sum(w, F.columns)
    if kind == "avgloc_glo":
        return F.global_ + _masked_mean(F)
    raise ConfigError(f"unknown usem kind {kind!r}; expected one of {USEM_KINDS}", "usem")
