"""Minimal reverse-mode differentiation over dense float64 arrays.

Every op takes and returns :class:`Tensor`. Ops work on the trailing axis
(features) and carry any leading axes along as batch axes, which is enough
for mini-batch training without a general broadcasting system.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-8

_ACTIVATIONS = ("sigmoid", "tanh", "elu")


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def _node(data, parents, backward, op):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, parents, backward, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# kink monitoring: hinge, threshold and ELU report their distance to the
# non-smooth point so finite-difference checks can resample near kinks.

_kink_log: list[float] | None = None


@contextlib.contextmanager
def kink_monitor():
    global _kink_log
    previous = _kink_log
    log: list[float] = []
    _kink_log = log
    try:
        yield log
    finally:
        _kink_log = previous


def _note_kink(distances: np.ndarray) -> None:
    if _kink_log is not None and distances.size:
        _kink_log.append(float(np.min(np.abs(distances))))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    """Plain division; callers guard denominators themselves."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.data, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g * a.data / (b.data * b.data), b.shape)

    return _node(out, (a, b), backward, "div")


def total(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Sum over ``axis`` (all axes by default)."""
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.grad += np.broadcast_to(g, x.shape)

    return _node(out, (x,), backward, "sum")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        x.grad += g.reshape(x.shape)

    return _node(out, (x,), backward, "reshape")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    out = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        x.grad += _unbroadcast(g, x.shape)

    return _node(out, (x,), backward, "broadcast")


def unsqueeze(x: Tensor) -> Tensor:
    """Append a trailing axis of length 1."""
    return reshape(x, x.shape + (1,))


def take(x: Tensor, index, axis: int) -> Tensor:
    """Select entries along ``axis`` with a constant integer index array."""
    index = np.asarray(index)
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0) if index.ndim else g)
        x.grad += full

    return _node(out, (x,), backward, "take")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, sizes, axis=axis)):
            if p.requires_grad:
                p.grad += piece

    return _node(out, parts, backward, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def backward(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p.grad += np.take(g, i, axis=axis)

    return _node(out, parts, backward, "stack")


# ---------------------------------------------------------------------------
# the primitive set


def affine(x, W, b=None) -> Tensor:
    """``y = W x (+ b)`` applied along the trailing axis of ``x``.

    ``W`` has shape (out, in); ``x`` has shape (..., in).
    """
    x, W = as_tensor(x), as_tensor(W)
    if W.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: W{W.shape} cannot act on x{x.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise DimensionError(f"affine: bias {b.shape} does not match output {W.shape[0]}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        if x.requires_grad:
            x.grad += g @ W.data
        if W.requires_grad:
            W.grad += g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        if b is not None and b.requires_grad:
            b.grad += g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _node(out, parents, backward, "affine")


def activation(x, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "sigmoid":
        # split by sign so exp never overflows
        z = np.exp(-np.abs(x.data))
        out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        deriv = out * (1.0 - out)
    elif kind == "tanh":
        out = np.tanh(x.data)
        deriv = 1.0 - out * out
    elif kind == "elu":
        _note_kink(x.data)
        neg = np.expm1(np.minimum(x.data, 0.0))
        out = np.where(x.data >= 0, x.data, neg)
        deriv = np.where(x.data >= 0, 1.0, neg + 1.0)
    else:
        raise ValueError(f"unknown activation {kind!r}; expected one of {_ACTIVATIONS}")

    def backward(g):
        x.grad += g * deriv

    return _node(out, (x,), backward, kind)


def softmax_weights(scores, mask=None) -> Tensor:
    """Softmax over the trailing axis, max-shifted.

    ``mask`` (same shape, bool) marks valid entries; masked entries get
    weight exactly 0. Every row needs at least one valid entry.
    """
    s = as_tensor(scores)
    if s.shape[-1] < 1:
        raise DimensionError("softmax_weights needs at least one score")
    data = s.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        data = np.where(mask, data, -np.inf)
    shifted = data - data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        s.grad += out * (g - (g * out).sum(axis=-1, keepdims=True))

    return _node(out, (s,), backward, "softmax")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        x.grad += g - probs * g.sum(axis=-1, keepdims=True)

    return _node(out, (x,), backward, "log_softmax")


@dataclass(frozen=True)
class Moments:
    mean: Tensor
    std: Tensor


def moments(x) -> Moments:
    """Mean and biased standard deviation over the trailing axis.

    Constant vectors get exactly their value as mean and exactly 0 as std
    (summation rounding would otherwise leave a tiny residue). The std
    gradient is taken as zero where the std itself is zero.
    """
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("moments needs a non-empty vector")
    p = x.shape[-1]
    constant = x.data.max(axis=-1) == x.data.min(axis=-1)
    mu = np.where(constant, x.data[..., 0], x.data.mean(axis=-1))
    centered = x.data - mu[..., None]
    sd = np.sqrt((centered * centered).sum(axis=-1) / p)

    def mean_backward(g):
        x.grad += np.broadcast_to(g[..., None] / p, x.shape)

    def std_backward(g):
        safe = np.where(sd > 0, sd, 1.0)
        coef = np.where(sd > 0, g / (p * safe), 0.0)
        x.grad += coef[..., None] * centered

    return Moments(_node(mu, (x,), mean_backward, "mean"), _node(sd, (x,), std_backward, "std"))


_guard_hits: Counter = Counter()


def diagnostics() -> dict[str, int]:
    """How often each guarded denominator was clamped since the last reset."""
    return dict(_guard_hits)


def reset_diagnostics() -> None:
    _guard_hits.clear()


def guard(x, eps: float = EPS, site: str = "guard") -> Tensor:
    """``max(x, eps)``, used on norm/std denominators.

    Clamped entries are counted under ``site`` (see :func:`diagnostics`).
    """
    x = as_tensor(x)
    out = np.maximum(x.data, eps)
    hits = int(np.count_nonzero(x.data < eps))
    if hits:
        _guard_hits[site] += hits

    def backward(g):
        x.grad += np.where(x.data >= eps, g, 0.0)

    return _node(out, (x,), backward, "guard")


def norm(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=-1))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        x.grad += np.where(out > 0, g / safe, 0.0)[..., None] * x.data

    return _node(out, (x,), backward, "norm")


def dot(x, y) -> Tensor:
    """Inner product over the trailing axis (leading axes broadcast)."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise DimensionError(f"dot: {x.shape} vs {y.shape}")
    out = (x.data * y.data).sum(axis=-1)

    def backward(g):
        if x.requires_grad:
            x.grad += _unbroadcast(g[..., None] * y.data, x.shape)
        if y.requires_grad:
            y.grad += _unbroadcast(g[..., None] * x.data, y.shape)

    return _node(out, (x, y), backward, "dot")


def normalize(x, eps: float = EPS) -> Tensor:
    x = as_tensor(x)
    return x / unsqueeze(guard(norm(x), eps, "normalize"))


def cosine(x, y, eps: float = EPS) -> Tensor:
    """Cosine similarity over the trailing axis.

    The denominator is ``max(|x||y|, eps)`` so the value stays exactly
    scale-invariant away from zero vectors.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise DimensionError(f"cosine: {x.shape} vs {y.shape}")
    return dot(x, y) / guard(norm(x) * norm(y), eps, "cosine")


def cosine_matrix(X, Y, eps: float = EPS) -> Tensor:
    """All-pairs cosine: ``out[i, j] = cosine(X[i], Y[j])``."""
    X, Y = as_tensor(X), as_tensor(Y)
    if X.data.ndim != 2 or Y.data.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise DimensionError(f"cosine_matrix: {X.shape} vs {Y.shape}")
    nx = norm(X)
    ny = norm(Y)
    dots = matmul_t(X, Y)
    denom = guard(reshape(nx, (-1, 1)) * reshape(ny, (1, -1)), eps, "cosine")
    return dots / denom


def matmul_t(X, Y) -> Tensor:
    """``X @ Y.T`` for 2-D operands."""
    X, Y = as_tensor(X), as_tensor(Y)
    out = X.data @ Y.data.T

    def backward(g):
        if X.requires_grad:
            X.grad += g @ Y.data
        if Y.requires_grad:
            Y.grad += g.T @ X.data

    return _node(out, (X, Y), backward, "matmul_t")


def weighted_sum(weights, X) -> Tensor:
    """``sum_i w[..., i] * X[..., i, :]``."""
    w, X = as_tensor(weights), as_tensor(X)
    if w.shape[-1] != X.shape[-2]:
        raise DimensionError(f"weighted_sum: weights {w.shape} vs columns {X.shape}")
    out = np.einsum("...m,...mp->...p", w.data, X.data)

    def backward(g):
        if w.requires_grad:
            w.grad += _unbroadcast(np.einsum("...p,...mp->...m", g, X.data), w.shape)
        if X.requires_grad:
            X.grad += _unbroadcast(w.data[..., :, None] * g[..., None, :], X.shape)

    return _node(out, (w, X), backward, "weighted_sum")


def hinge(x) -> Tensor:
    """``max(x, 0)``."""
    x = as_tensor(x)
    _note_kink(x.data)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        x.grad += np.where(x.data > 0, g, 0.0)

    return _node(out, (x,), backward, "hinge")


def threshold_mask(weights, gamma) -> np.ndarray:
    """Constant mask of ``weights > gamma``; records the distance to the cut."""
    w = as_tensor(weights).data
    gamma = np.asarray(gamma, dtype=np.float64)
    _note_kink(w - gamma)
    return w > gamma


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    """Populate ``.grad`` of every differentiable ancestor of a scalar."""
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    order = _topological(output)
    for node in order:
        if node._parents:
            node.grad = np.zeros_like(node.data)
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst_index: tuple[int, ...] | None
    analytic: np.ndarray
    numeric: np.ndarray
    resamples: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-4,
    coords: Sequence[tuple[int, ...]] | None = None,
    resample: Callable[[], np.ndarray] | None = None,
    kink_margin: float = 1e-4,
    max_resamples: int = 20,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare ``d f / d x`` from :func:`backward` against central differences.

    ``f`` maps a leaf tensor to a scalar tensor. ``coords`` restricts the
    comparison to a subset of coordinates. When ``resample`` is given and
    the evaluation at ``x`` lies within ``kink_margin`` of a hinge,
    threshold or ELU break point, a fresh ``x`` is drawn.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    resamples = 0
    while True:
        leaf = parameter(x)
        with kink_monitor() as log:
            out = f(leaf)
        near_kink = bool(log) and min(log) < kink_margin
        if near_kink and resample is not None and resamples < max_resamples:
            x = np.array(resample(), dtype=np.float64, copy=True)
            resamples += 1
            continue
        break
    backward(out)
    analytic_full = leaf.grad.copy()

    if coords is None:
        coords = list(np.ndindex(x.shape))
    analytic = np.empty(len(coords))
    numeric = np.empty(len(coords))
    for n, idx in enumerate(coords):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(Tensor(x)).item()
        x[idx] = orig - h
        fm = f(Tensor(x)).item()
        x[idx] = orig
        numeric[n] = (fp - fm) / (2.0 * h)
        analytic[n] = analytic_full[idx]

    err = relative_error(analytic, numeric, floor)
    worst = int(np.argmax(err)) if err.size else None
    return GradCheckReport(
        max_rel_error=float(err.max()) if err.size else 0.0,
        tol=tol,
        worst_index=tuple(coords[worst]) if worst is not None else None,
        analytic=analytic,
        numeric=numeric,
        resamples=resamples,
    )


def finite_difference_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-5,
) -> dict[str, GradCheckReport]:
    """Check gradients of a closure w.r.t. tensors it reads in place.

    Each parameter's ``data`` is perturbed directly, so the closure must
    rebuild its graph on every call. ``coords_per_param`` samples that many
    coordinates per tensor (all when ``None``).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    zero_grads(params.values())
    backward(loss_fn())
    reports = {}
    for name, p in params.items():
        analytic_full = p.grad.copy()
        all_coords = list(np.ndindex(p.shape))
        if coords_per_param is not None and len(all_coords) > coords_per_param:
            pick = rng.choice(len(all_coords), size=coords_per_param, replace=False)
            coords = [all_coords[i] for i in sorted(pick)]
        else:
            coords = all_coords
        analytic = np.empty(len(coords))
        numeric = np.empty(len(coords))
        for n, idx in enumerate(coords):
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = loss_fn().item()
            p.data[idx] = orig - h
            fm = loss_fn().item()
            p.data[idx] = orig
            numeric[n] = (fp - fm) / (2.0 * h)
            analytic[n] = analytic_full[idx]
        err = relative_error(analytic, numeric, floor)
        worst = int(np.argmax(err)) if err.size else None
        reports[name] = GradCheckReport(
            max_rel_error=float(err.max()) if err.size else 0.0,
            tol=tol,
            worst_index=tuple(coords[worst]) if worst is not None else None,
            analytic=analytic,
            numeric=numeric,
        )
    return reports
