"""Two-stage training with Adam, deterministic batching and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .model import ModelParams, Variant, batch_features, init_model, stage1_param_names
from .objectives import LossReport, stage1_loss, stage2_loss
from .synthgen import TEXTUAL, VISUAL, ConfigError, Dataset, FormatError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"C3MC"
CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """A loss or gradient went non-finite."""


@dataclass(frozen=True)
class HyperParams:
    p: int = 64
    beta: float = 0.2
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    batch_size: int = 64
    epochs: int = 100
    stage2_start: int = 15
    lr: float = 1e-3
    lr_decay_epoch: int = 50
    lr_decay: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.p < 1:
            raise ConfigError("p: must be positive", "p")
        if self.beta <= 0:
            raise ConfigError("beta: margin must be positive", "beta")
        if self.batch_size < 2:
            raise ConfigError("batch_size: need at least 2 pairs per batch", "batch_size")
        if self.epochs < 0:
            raise ConfigError("epochs: must be non-negative", "epochs")
        if not 0 <= self.stage2_start <= self.epochs:
            raise ConfigError(f"stage2_start: {self.stage2_start} outside [0, {self.epochs}]", "stage2_start")
        if self.lr <= 0:
            raise ConfigError("lr: must be positive", "lr")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_epoch > 0 and epoch >= self.lr_decay_epoch:
            return self.lr * self.lr_decay
        return self.lr

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown hyperparameter(s): {sorted(unknown)}", sorted(unknown)[0])
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; ``t`` is the 1-based step count.

    Returns ``(param, m, v)`` as new arrays.
    """
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise nx.ContractError(f"adam_step shape mismatch: {param.shape}, {grad.shape}, {m.shape}, {v.shape}")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)

    def update(self, params: dict[str, nx.Tensor], names, lr: float, hp: HyperParams) -> None:
        """Step every parameter in ``names``; each keeps its own step count."""
        for name in sorted(names):
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            self.t[name] += 1
            p.data, self.m[name], self.v[name] = adam_step(
                p.data, p.grad, self.m[name], self.v[name], self.t[name], lr, hp.adam_beta1, hp.adam_beta2, hp.adam_eps
            )


# ---------------------------------------------------------------------------
# batching


@dataclass
class PairIndex:
    """Matched (visual, textual) record index pairs of a dataset."""

    visual: list[int]
    textual: list[int]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.visual)


def build_pairs(dataset: Dataset) -> PairIndex:
    """Every caption with every image of the same identity, in record order."""
    images: dict[int, list[int]] = {}
    for i, r in enumerate(dataset.records):
        if r.modality == VISUAL:
            images.setdefault(r.identity, []).append(i)
    vis, txt, lab = [], [], []
    for j, r in enumerate(dataset.records):
        if r.modality == TEXTUAL:
            for i in images.get(r.identity, []):
                vis.append(i)
                txt.append(j)
                lab.append(r.identity)
    return PairIndex(vis, txt, np.array(lab, dtype=np.int64))


@dataclass
class Batch:
    visual: list[int]
    textual: list[int]
    labels: np.ndarray
    single_identity: bool = False


def _make_batch(pairs: PairIndex, idx) -> Batch:
    labels = pairs.labels[idx]
    single = len(np.unique(labels)) < 2
    if single:
        log.warning("batch holds a single identity; ranking losses have no negatives")
    return Batch([pairs.visual[i] for i in idx], [pairs.textual[i] for i in idx], labels, single)


def _mix(order: np.ndarray, size: int, labels: np.ndarray) -> np.ndarray:
    """Swap a different identity into ``order[:size]`` if it holds only one."""
    head = order[:size]
    if size < 2 or len(np.unique(labels[head])) > 1:
        return order
    other = np.flatnonzero(labels[order[size:]] != labels[head[0]])
    if other.size:
        order = order.copy()
        j = size + other[0]
        order[size - 1], order[j] = order[j], order[size - 1]
    return order


def sample_batch(pairs: PairIndex, batch_size: int, rng: np.random.Generator) -> Batch:
    """Draw ``batch_size`` pairs without replacement (all pairs, shuffled, if fewer).

    When the draw holds a single identity and the dataset has another, its
    last pair is swapped for the first pair of a different identity in the
    shuffled order.
    """
    if len(pairs) == 0:
        raise ConfigError("cannot sample from an empty dataset", "dataset")
    order = _mix(rng.permutation(len(pairs)), batch_size, pairs.labels)
    return _make_batch(pairs, order[:batch_size])


def epoch_batches(pairs: PairIndex, batch_size: int, epoch_rng: np.random.Generator) -> list[Batch]:
    """Shuffle all pairs and cut them into consecutive batches.

    A trailing remainder smaller than two pairs is merged into the previous
    batch so ranking losses always see a partner.
    """
    order = epoch_rng.permutation(len(pairs))
    cuts = list(range(0, len(order), batch_size))
    chunks = [order[c : c + batch_size] for c in cuts]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    _mix_chunks(chunks, pairs.labels)
    return [_make_batch(pairs, c) for c in chunks]


def _mix_chunks(chunks: list[np.ndarray], labels: np.ndarray) -> None:
    """Give every single-identity chunk a partner from a chunk that can spare one."""
    for c, chunk in enumerate(chunks):
        if len(chunk) < 2 or len(np.unique(labels[chunk])) > 1:
            continue
        for d, donor in enumerate(chunks):
            if d == c:
                continue
            for j in np.flatnonzero(labels[donor] != labels[chunk[0]]):
                rest = np.delete(donor, j)
                if len(np.unique(np.append(labels[rest], labels[chunk[-1]]))) > 1:
                    chunk[-1], donor[j] = donor[j], chunk[-1]
                    break
            else:
                continue
            break


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, 0xBA7C])


# ---------------------------------------------------------------------------
# state


@dataclass
class ModelState:
    params: ModelParams
    variant: Variant
    hp: HyperParams
    train_ids: list[int]
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0

    @property
    def label_map(self) -> dict[int, int]:
        return {y: i for i, y in enumerate(self.train_ids)}

    def named(self) -> dict[str, nx.Tensor]:
        return self.params.named()


def init_state(dataset: Dataset, hp: HyperParams, variant: Variant) -> ModelState:
    hp.validate()
    train_ids = dataset.identities()
    if not train_ids:
        raise ConfigError("training dataset is empty", "dataset")
    rng = np.random.default_rng([hp.seed, 0x1417])
    params = init_model(rng, variant, dataset.meta.d_raw, hp.p, len(train_ids))
    return ModelState(params, variant, hp, train_ids)


@dataclass
class EpochLog:
    epoch: int
    stage: int
    lr: float
    batches: int
    parts: dict[str, float]
    val_rank1: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def compute_loss(state: ModelState, dataset: Dataset, batch: Batch, stage: int) -> LossReport:
    hp, variant = state.hp, state.variant
    recs = dataset.records
    labels = np.array([state.label_map[y] for y in batch.labels])
    f = batch_features(
        [recs[i] for i in batch.visual], [recs[j] for j in batch.textual], labels, state.params, variant, stage
    )
    lambda3 = hp.lambda3 if variant.family == "usem" else 0.0
    if stage < 2:
        return stage1_loss(f, state.params.classifier, hp.beta, lambda3)
    return stage2_loss(
        f, state.params.classifier, hp.beta, lambda3, hp.lambda4, hp.lambda5, state.params.common_classifier
    )


def train_epoch(state: ModelState, dataset: Dataset, pairs: PairIndex) -> EpochLog:
    hp = state.hp
    epoch = state.epoch
    stage = 1 if epoch < hp.stage2_start else 2
    lr = hp.lr_at(epoch)
    named = state.named()
    trainable = stage1_param_names(state.params) if stage == 1 else set(named)
    sums: dict[str, float] = {}
    batches = epoch_batches(pairs, hp.batch_size, epoch_rng(hp.seed, epoch))
    for batch in batches:
        nx.zero_grads(named.values())
        report = compute_loss(state, dataset, batch, stage)
        if not math.isfinite(report.value()):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        nx.backward(report.total)
        state.adam.update(named, trainable, lr, hp)
        for k, val in report.parts.items():
            sums[k] = sums.get(k, 0.0) + val
    state.epoch += 1
    parts = {k: v / len(batches) for k, v in sums.items()}
    return EpochLog(epoch, stage, lr, len(batches), parts)


def train(
    dataset: Dataset,
    hp: HyperParams,
    variant: Variant | str = Variant(),
    state: ModelState | None = None,
    until: int | None = None,
    on_epoch: Callable[[ModelState, EpochLog], None] | None = None,
) -> tuple[ModelState, list[EpochLog]]:
    """Train from scratch, or continue ``state`` up to ``until`` epochs (default ``hp.epochs``)."""
    if isinstance(variant, str):
        variant = Variant.parse(variant)
    hp.validate()
    if state is None:
        state = init_state(dataset, hp, variant)
    pairs = build_pairs(dataset)
    stop = hp.epochs if until is None else min(until, hp.epochs)
    history: list[EpochLog] = []
    while state.epoch < stop:
        entry = train_epoch(state, dataset, pairs)
        if on_epoch is not None:
            on_epoch(state, entry)
        history.append(entry)
    return state, history


# ---------------------------------------------------------------------------
# checkpoints
#
# magic "C3MC" | u32 version | u32 len + JSON header (hyperparameters,
# variant, train identities) | u32 block count | blocks | u32 epoch
# block: u16 name length, name (utf-8), u8 ndim, u32 dims, float64 LE data
# Adam moments are blocks named "adam.m.<param>" / "adam.v.<param>"; step
# counts live in the JSON header.


def _pack_block(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def checkpoint_bytes(state: ModelState) -> bytes:
    header = {
        "hyperparams": dataclasses.asdict(state.hp),
        "variant": state.variant.tag,
        "train_ids": state.train_ids,
        "adam_t": state.adam.t,
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    blocks = []
    for name, t in sorted(state.named().items()):
        blocks.append(_pack_block(name, t.data))
    for name in sorted(state.adam.m):
        blocks.append(_pack_block("adam.m." + name, state.adam.m[name]))
        blocks.append(_pack_block("adam.v." + name, state.adam.v[name]))
    return b"".join(
        [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(hjson)), hjson,
         struct.pack("<I", len(blocks)), *blocks, struct.pack("<I", state.epoch)]
    )


def save_checkpoint(state: ModelState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def _need(buf: bytes, offset: int, n: int, what: str) -> None:
    if offset + n > len(buf):
        raise FormatError(f"truncated checkpoint while reading {what}", offset)


def checkpoint_from_bytes(buf: bytes) -> ModelState:
    _need(buf, 0, 12, "header")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (hlen,) = struct.unpack_from("<I", buf, 8)
    offset = 12
    _need(buf, offset, hlen, "JSON header")
    try:
        header = json.loads(buf[offset : offset + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt JSON header: {exc}", offset) from exc
    offset += hlen
    _need(buf, offset, 4, "block count")
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        _need(buf, offset, 2, "block name length")
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        _need(buf, offset, nlen + 1, "block name")
        name = buf[offset : offset + nlen].decode("utf-8")
        offset += nlen
        (ndim,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        _need(buf, offset, 4 * ndim, "block shape")
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        _need(buf, offset, 8 * size, f"block {name!r}")
        blocks[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * size
    _need(buf, offset, 4, "epoch counter")
    (epoch,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if offset != len(buf):
        raise FormatError("trailing bytes after epoch counter", offset)

    hp = HyperParams.from_dict(header["hyperparams"])
    variant = Variant.parse(header["variant"])
    train_ids = [int(y) for y in header["train_ids"]]
    d_raw = _infer_d_raw(blocks)
    params = init_model(np.random.default_rng(0), variant, d_raw, hp.p, len(train_ids))
    named = params.named()
    if set(named) != {k for k in blocks if not k.startswith("adam.")}:
        raise FormatError("parameter blocks do not match the variant's parameter set", None)
    for name, t in named.items():
        if blocks[name].shape != t.shape:
            raise FormatError(f"shape mismatch for {name}: {blocks[name].shape} vs {t.shape}", None)
        t.data = blocks[name]
        t.grad = np.zeros_like(t.data)
    adam = AdamState()
    for name, steps in header.get("adam_t", {}).items():
        adam.m[name] = blocks["adam.m." + name]
        adam.v[name] = blocks["adam.v." + name]
        adam.t[name] = int(steps)
    return ModelState(params, variant, hp, train_ids, adam, epoch)


def _infer_d_raw(blocks: dict[str, np.ndarray]) -> int:
    try:
        return blocks["heads.visual.global_fc.W"].shape[1]
    except KeyError as exc:
        raise FormatError("checkpoint lacks the visual head", None) from exc


def load_checkpoint(path) -> ModelState:
    return checkpoint_from_bytes(Path(path).read_bytes())
