"""Synthetic stand-in for visual and textual backbone outputs.

Each identity owns a latent vector. Images see it through one set of random
linear maps, captions through another, and each modality then gets its own
fixed per-coordinate affine distortion. Local columns only see a slice of
the latent vector (a "body part"), so fine-grained matching has something
to find.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .rng import Xoshiro256

VISUAL = 0
TEXTUAL = 1
MODALITY_NAMES = {VISUAL: "visual", TEXTUAL: "textual"}

SPLITS = {"train": 0, "val": 1, "test": 2, "all": 3}
SPLIT_NAMES = {v: k for k, v in SPLITS.items()}

MAGIC = b"C3MD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIB")
_RECORD_HEAD = struct.Struct("<IBH")


class ConfigError(ValueError):
    """Invalid generator, split or run configuration."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class FormatError(ValueError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class GeneratorConfig:
    identities: int = 100
    images_per_id: int = 5
    captions_per_id: int = 2
    d_raw: int = 96
    k: int = 6
    n_min: int = 3
    n_max: int = 8
    d_latent: int = 32
    noise: float = 1.0
    latent_jitter: float = 0.5
    visual_scale: tuple[float, float] = (0.5, 1.5)
    visual_shift: tuple[float, float] = (-0.5, 0.5)
    textual_scale: tuple[float, float] = (1.5, 3.0)
    textual_shift: tuple[float, float] = (1.0, 2.0)
    seed: int = 0

    def validate(self) -> None:
        checks = [
            ("identities", self.identities >= 2, "need at least 2 identities"),
            ("images_per_id", self.images_per_id >= 1, "need at least 1 image per identity"),
            ("captions_per_id", self.captions_per_id >= 1, "need at least 1 caption per identity"),
            ("d_raw", self.d_raw >= 1, "d_raw must be positive"),
            ("k", self.k >= 1, "k must be at least 1"),
            ("n_min", self.n_min >= 1, "n_min must be at least 1"),
            ("n_max", self.n_max >= self.n_min, "n_max must be >= n_min"),
            ("d_latent", self.d_latent >= self.k, "d_latent must be >= k so every part owns a coordinate"),
            ("noise", self.noise >= 0, "noise must be non-negative"),
            ("latent_jitter", self.latent_jitter >= 0, "latent_jitter must be non-negative"),
            ("n_max", self.n_max < 2**16 - 1 and self.k < 2**16 - 1, "local count must fit in u16"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}", key)
        for name in ("visual_scale", "visual_shift", "textual_scale", "textual_shift"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: range low {lo} exceeds high {hi}", name)


@dataclass
class SampleRecord:
    identity: int
    modality: int
    raw: np.ndarray  # float32, shape (d_raw, m + 1); column 0 is the global feature

    @property
    def m(self) -> int:
        return self.raw.shape[1] - 1

    @property
    def d_raw(self) -> int:
        return self.raw.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (
            self.identity == other.identity
            and self.modality == other.modality
            and self.raw.dtype == other.raw.dtype
            and self.raw.shape == other.raw.shape
            and self.raw.tobytes() == other.raw.tobytes()
        )


@dataclass
class DatasetMeta:
    N: int
    Q: int
    split: str
    d_raw: int


@dataclass
class Dataset:
    records: list[SampleRecord]
    meta: DatasetMeta
    extras: dict = field(default_factory=dict, compare=False)

    def identities(self) -> list[int]:
        return sorted({r.identity for r in self.records})

    def by_modality(self, modality: int) -> list[SampleRecord]:
        return [r for r in self.records if r.modality == modality]


def count_pairs(records: list[SampleRecord]) -> int:
    """Matched (image, caption) pairs: every caption with every image of its identity."""
    images: dict[int, int] = {}
    captions: dict[int, int] = {}
    for r in records:
        bucket = images if r.modality == VISUAL else captions
        bucket[r.identity] = bucket.get(r.identity, 0) + 1
    return sum(n * captions.get(y, 0) for y, n in images.items())


def part_slices(d_latent: int, k: int) -> list[slice]:
    """Contiguous partition of latent coordinates; earlier parts take the remainder."""
    base, extra = divmod(d_latent, k)
    out, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        out.append(slice(start, start + size))
        start += size
    return out


@dataclass
class _Modality:
    scale: np.ndarray
    shift: np.ndarray
    global_map: np.ndarray
    part_maps: list[np.ndarray]

    def distort(self, x: np.ndarray) -> np.ndarray:
        return self.scale * x + self.shift


def _draw_modality(rng: Xoshiro256, cfg: GeneratorConfig, scale_range, shift_range, parts) -> _Modality:
    scale = rng.uniforms((cfg.d_raw,), *scale_range)
    shift = rng.uniforms((cfg.d_raw,), *shift_range)
    global_map = rng.normals((cfg.d_raw, cfg.d_latent)) / np.sqrt(cfg.d_latent)
    part_maps = []
    for sl in parts:
        width = sl.stop - sl.start
        part_maps.append(rng.normals((cfg.d_raw, width)) / np.sqrt(width))
    return _Modality(scale, shift, global_map, part_maps)


def generate_dataset(cfg: GeneratorConfig) -> Dataset:
    """Draw a full dataset; a pure function of ``cfg``.

    Draw order (all from one xoshiro256** stream seeded with ``cfg.seed``):
    visual distortion scale, shift, global map, part maps; the same for the
    textual modality; one latent per identity; then per identity, its images
    followed by its captions. A record first draws its latent jitter, then
    for each column the noise vector; captions draw their local count and the
    part index of each phrase before anything else.
    """
    cfg.validate()
    rng = Xoshiro256(cfg.seed)
    parts = part_slices(cfg.d_latent, cfg.k)
    vis = _draw_modality(rng, cfg, cfg.visual_scale, cfg.visual_shift, parts)
    txt = _draw_modality(rng, cfg, cfg.textual_scale, cfg.textual_shift, parts)
    latents = rng.normals((cfg.identities, cfg.d_latent))

    def column(mod: _Modality, z: np.ndarray, part: int | None) -> np.ndarray:
        clean = mod.global_map @ z if part is None else mod.part_maps[part] @ z[parts[part]]
        noise = rng.normals((cfg.d_raw,)) if cfg.noise > 0 else 0.0
        return mod.distort(clean) + cfg.noise * noise

    records: list[SampleRecord] = []
    for y in range(cfg.identities):
        for _ in range(cfg.images_per_id):
            z = latents[y] + cfg.latent_jitter * rng.normals((cfg.d_latent,)) if cfg.latent_jitter > 0 else latents[y]
            cols = [column(vis, z, None)] + [column(vis, z, i) for i in range(cfg.k)]
            records.append(SampleRecord(y, VISUAL, np.stack(cols, axis=1).astype(np.float32)))
        for _ in range(cfg.captions_per_id):
            n = cfg.n_min + rng.below(cfg.n_max - cfg.n_min + 1)
            phrase_parts = [rng.below(cfg.k) for _ in range(n)]
            z = latents[y] + cfg.latent_jitter * rng.normals((cfg.d_latent,)) if cfg.latent_jitter > 0 else latents[y]
            cols = [column(txt, z, None)] + [column(txt, z, j) for j in phrase_parts]
            records.append(SampleRecord(y, TEXTUAL, np.stack(cols, axis=1).astype(np.float32)))

    meta = DatasetMeta(N=count_pairs(records), Q=cfg.identities, split="all", d_raw=cfg.d_raw)
    extras = {"latents": latents, "visual": vis, "textual": txt, "parts": parts}
    return Dataset(records, meta, extras)


def split_dataset(dataset: Dataset, fractions=(0.8, 0.1, 0.1)) -> dict[str, Dataset]:
    """Identity-disjoint train/val/test split over ascending identity ids.

    Validation and test get ``floor(fraction * Q)`` identities each, train
    takes the rest; identities are assigned in ascending order.
    """
    if len(fractions) != 3:
        raise ConfigError("fractions: need exactly three values", "fractions")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions: {tuple(fractions)} must be non-negative and sum to 1", "fractions")
    ids = dataset.identities()
    q = len(ids)
    n_val = int(np.floor(fractions[1] * q + 1e-9))
    n_test = int(np.floor(fractions[2] * q + 1e-9))
    n_train = q - n_val - n_test
    assignment = {}
    for pos, y in enumerate(ids):
        assignment[y] = "train" if pos < n_train else ("val" if pos < n_train + n_val else "test")
    out = {}
    for name in ("train", "val", "test"):
        recs = [r for r in dataset.records if assignment[r.identity] == name]
        out[name] = Dataset(recs, replace(dataset.meta, N=count_pairs(recs), split=name))
    return out


# ---------------------------------------------------------------------------
# file format


def dataset_to_bytes(dataset: Dataset) -> bytes:
    meta = dataset.meta
    chunks = [_HEADER.pack(MAGIC, VERSION, meta.d_raw, meta.Q, len(dataset.records), SPLITS[meta.split])]
    for r in dataset.records:
        if r.d_raw != meta.d_raw:
            raise ValueError(f"record d_raw {r.d_raw} does not match dataset d_raw {meta.d_raw}")
        chunks.append(_RECORD_HEAD.pack(r.identity, r.modality, r.m))
        chunks.append(np.asarray(r.raw, dtype="<f4").tobytes(order="F"))
    return b"".join(chunks)


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, d_raw, q, count, split = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if split not in SPLIT_NAMES:
        raise FormatError(f"unknown split tag {split}", 20)
    offset = _HEADER.size
    records = []
    for _ in range(count):
        if offset + _RECORD_HEAD.size > len(buf):
            raise FormatError("truncated record header", offset)
        identity, modality, m = _RECORD_HEAD.unpack_from(buf, offset)
        if modality not in MODALITY_NAMES:
            raise FormatError(f"unknown modality tag {modality}", offset + 4)
        offset += _RECORD_HEAD.size
        nbytes = 4 * d_raw * (m + 1)
        if offset + nbytes > len(buf):
            raise FormatError("truncated record payload", offset)
        flat = np.frombuffer(buf, dtype="<f4", count=d_raw * (m + 1), offset=offset)
        raw = flat.reshape((d_raw, m + 1), order="F").astype(np.float32)
        records.append(SampleRecord(identity, modality, raw))
        offset += nbytes
    if offset != len(buf):
        raise FormatError("trailing bytes after last record", offset)
    meta = DatasetMeta(N=count_pairs(records), Q=q, split=SPLIT_NAMES[split], d_raw=d_raw)
    return Dataset(records, meta)


def write_dataset(path, dataset: Dataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


def read_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def config_fields() -> list[str]:
    return [f.name for f in fields(GeneratorConfig)]
