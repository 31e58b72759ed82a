"""Looking and leaping: cross-modal projection then gated fusion.

A unified feature from one modality is first re-targeted to the other
modality's statistics and pushed through a small perceptron (the
projection); the projection and the original are then fused by a learned
element-wise gate into the common embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .params import ParamGroup, linear_init, zeros
from .representation import Linear
from .synthgen import ConfigError

LASM_KINDS = (
    "add",
    "add_mlp",
    "concat",
    "concat_mlp",
    "scalar_gate",
    "vector_gate_add",
    "vector_gate_concat",
)


def distribution_shift(s, r, eps: float = nx.EPS) -> Tensor:
    """Give ``s`` the mean and standard deviation of ``r`` (per vector).

    ``(s - mean(s)) / max(std(s), eps) * std(r) + mean(r)`` over the
    trailing axis.
    """
    s, r = nx.as_tensor(s), nx.as_tensor(r)
    ms, mr = nx.moments(s), nx.moments(r)
    z = (s - nx.unsqueeze(ms.mean)) / nx.unsqueeze(nx.guard(ms.std, eps, "distribution_shift"))
    return z * nx.unsqueeze(mr.std) + nx.unsqueeze(mr.mean)


@dataclass
class Perceptron(ParamGroup):
    """p -> p -> p with ELU in between and tanh on the output."""

    fc1: Linear
    fc2: Linear

    def __call__(self, x: Tensor) -> Tensor:
        return nx.activation(self.fc2(nx.activation(self.fc1(x), "elu")), "tanh")


def init_perceptron(rng: np.random.Generator, p: int) -> Perceptron:
    return Perceptron(Linear(linear_init(rng, p, p), zeros(p)), Linear(linear_init(rng, p, p), zeros(p)))


@dataclass
class XProjParams(ParamGroup):
    to_textual: Perceptron
    to_visual: Perceptron

    def direction(self, source_modality: int) -> Perceptron:
        return self.to_textual if source_modality == 0 else self.to_visual


def init_xproj(rng: np.random.Generator, p: int) -> XProjParams:
    return XProjParams(init_perceptron(rng, p), init_perceptron(rng, p))


def xproj(s, r, mlp: Perceptron, shift: bool = True) -> Tensor:
    """Project ``s`` towards the modality of ``r``; ``shift=False`` skips the statistic transfer."""
    h = distribution_shift(s, r) if shift else nx.as_tensor(s)
    return mlp(h)


@dataclass
class LasmParams(ParamGroup):
    kind: str = field(metadata={"static": True})
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]


def init_lasm(rng: np.random.Generator, p: int, kind: str = "vector_gate_concat") -> LasmParams:
    if kind == "vector_gate_concat":
        t = {"W1": linear_init(rng, 2 * p, 2 * p), "W2": linear_init(rng, p, 2 * p)}
    elif kind == "vector_gate_add":
        t = {"W1": linear_init(rng, 2 * p, p), "W2": linear_init(rng, p, 2 * p)}
    elif kind == "add_mlp":
        t = {"W": linear_init(rng, p, p), "b": zeros(p)}
    elif kind == "concat_mlp":
        t = {"W": linear_init(rng, p, 2 * p), "b": zeros(p)}
    elif kind == "scalar_gate":
        t = {"w": linear_init(rng, 1, 2 * p), "b": zeros(1)}
    elif kind in ("add", "concat"):
        t = {}
    else:
        raise ConfigError(f"unknown lasm kind {kind!r}; expected one of {LASM_KINDS}", "lasm")
    return LasmParams(kind, t)


def common_dim(kind: str, p: int) -> int:
    return 2 * p if kind == "concat" else p


def _broadcast_pair(a, b) -> tuple[Tensor, Tensor]:
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    shape = np.broadcast_shapes(a.shape, b.shape)
    return nx.broadcast_to(a, shape), nx.broadcast_to(b, shape)


def gate(x_u, x_p, params: LasmParams) -> Tensor:
    """Element-wise fusion gate, every entry in (0, 1)."""
    if params.kind == "vector_gate_add":
        joined = nx.add(x_u, x_p)
    else:
        joined = nx.concat([x_u, x_p], axis=-1)
    hidden = nx.activation(nx.affine(joined, params["W1"]), "elu")
    return nx.activation(nx.affine(hidden, params["W2"]), "sigmoid")


def lasm(x_u, x_p, params: LasmParams, combine: str = "concat") -> Tensor:
    """Gated convex combination ``g * x_u + (1 - g) * x_p``."""
    x_u, x_p = _broadcast_pair(x_u, x_p)
    expected = {"concat": "vector_gate_concat", "add": "vector_gate_add"}.get(combine)
    if expected is None:
        raise ConfigError(f"unknown combine {combine!r}; expected 'concat' or 'add'", "combine")
    if params.kind != expected:
        raise ConfigError(f"lasm combine={combine} needs {expected} parameters, got {params.kind}", "lasm")
    g = gate(x_u, x_p, params)
    return g * x_u + (1.0 - g) * x_p


def lasm_variant(x_u, x_p, params: LasmParams, kind: str | None = None) -> Tensor:
    kind = params.kind if kind is None else kind
    if kind != params.kind:
        raise ConfigError(f"lasm variant {kind} given {params.kind} parameters", "lasm")
    x_u, x_p = _broadcast_pair(x_u, x_p)
    if kind == "add":
        return x_u + x_p
    if kind == "add_mlp":
        return nx.activation(nx.affine(x_u + x_p, params["W"], params["b"]), "tanh")
    if kind == "concat":
        return nx.concat([x_u, x_p], axis=-1)
    if kind == "concat_mlp":
        return nx.activation(nx.affine(nx.concat([x_u, x_p], axis=-1), params["W"], params["b"]), "tanh")
    if kind == "scalar_gate":
        a = nx.activation(nx.affine(nx.concat([x_u, x_p], axis=-1), params["w"], params["b"]), "sigmoid")
        return a * x_u + (1.0 - a) * x_p
    if kind == "vector_gate_concat":
        return lasm(x_u, x_p, params, "concat")
    if kind == "vector_gate_add":
        return lasm(x_u, x_p, params, "add")
    raise ConfigError(f"unknown lasm kind {kind!r}; expected one of {LASM_KINDS}", "lasm")


@dataclass
class ManifoldParams(ParamGroup):
    """XProj for both directions and one LASM (or one per modality)."""

    xproj: XProjParams
    lasm: dict[str, LasmParams]
    shift: bool = field(default=True, metadata={"static": True})

    @property
    def shared_lasm(self) -> bool:
        return "shared" in self.lasm

    def lasm_for(self, modality: int) -> LasmParams:
        if self.shared_lasm:
            return self.lasm["shared"]
        return self.lasm["visual" if modality == 0 else "textual"]

    @property
    def kind(self) -> str:
        return next(iter(self.lasm.values())).kind


def init_manifold(
    rng: np.random.Generator,
    p: int,
    lasm_kind: str = "vector_gate_concat",
    shared_lasm: bool = True,
    shift: bool = True,
) -> ManifoldParams:
    xp = init_xproj(rng, p)
    if shared_lasm:
        lasms = {"shared": init_lasm(rng, p, lasm_kind)}
    else:
        lasms = {"visual": init_lasm(rng, p, lasm_kind), "textual": init_lasm(rng, p, lasm_kind)}
    return ManifoldParams(xp, lasms, shift)


@dataclass
class PairEmbedding:
    v_p: Tensor
    t_p: Tensor
    v_c: Tensor
    t_c: Tensor


def embed_pair(v_u, t_u, params: ManifoldParams) -> PairEmbedding:
    """Project each unified feature towards the other modality, then fuse.

    Leading axes of ``v_u`` and ``t_u`` broadcast, so a (Q, 1, p) query
    block against a (1, G, p) gallery block embeds every pair at once.
    """
    v_u, t_u = nx.as_tensor(v_u), nx.as_tensor(t_u)
    v_p = xproj(v_u, t_u, params.xproj.to_textual, params.shift)
    t_p = xproj(t_u, v_u, params.xproj.to_visual, params.shift)
    v_c = lasm_variant(v_u, v_p, params.lasm_for(0))
    t_c = lasm_variant(t_u, t_p, params.lasm_for(1))
    return PairEmbedding(v_p, t_p, v_c, t_c)
