"""Common, global and fine-grained similarities and their combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class AttentionWeights:
    weights: np.ndarray
    gamma: np.ndarray
    selected: np.ndarray
    fallback: np.ndarray  # rows where nothing passed the threshold

    @property
    def selected_indices(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.selected)]


@dataclass
class SimilarityBundle:
    sim_c: float | np.ndarray
    sim_g: float | np.ndarray
    sim_f: float | np.ndarray
    sim: float | np.ndarray
    lambda1: float
    lambda2: float


def sim_common(v_c, t_c) -> Tensor:
    return nx.cosine(v_c, t_c)


def sim_global(v_g, t_g) -> Tensor:
    return nx.cosine(v_g, t_g)


def gamma_for(mask: np.ndarray) -> np.ndarray:
    """Threshold rule: one over the sample's own local count."""
    return 1.0 / mask.sum(axis=-1)


def cross_modal_attention(y_g, X_locals, gamma=None, mask=None) -> tuple[Tensor, AttentionWeights]:
    """Attend from one modality's global feature over the other's locals.

    Weights are a softmax of cosine scores. Only locals whose weight is
    strictly above ``gamma`` contribute, with their original weights; if
    none qualifies, every (valid) local contributes.

    ``y_g`` is (..., p) and ``X_locals`` is (..., m, p); leading axes
    broadcast. ``gamma`` defaults to 1/m per row.
    """
    y_g, X = nx.as_tensor(y_g), nx.as_tensor(X_locals)
    m = X.shape[-2]
    if m < 1:
        raise nx.DimensionError("cross_modal_attention needs at least one local")
    if mask is None:
        mask = np.ones(X.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if gamma is None:
        gamma = gamma_for(mask)
    scores = nx.cosine(X, nx.reshape(y_g, y_g.shape[:-1] + (1, y_g.shape[-1])))
    full_mask = np.broadcast_to(mask, scores.shape)
    alpha = nx.softmax_weights(scores, full_mask)
    gamma_arr = np.broadcast_to(np.asarray(gamma, dtype=np.float64)[..., None], scores.shape)
    passed = nx.threshold_mask(alpha, gamma_arr) & full_mask
    empty = ~passed.any(axis=-1)
    selected = np.where(empty[..., None], full_mask, passed)
    x_f = nx.weighted_sum(alpha * selected.astype(np.float64), X)
    return x_f, AttentionWeights(alpha.data, np.asarray(gamma), selected, empty)


@dataclass
class FineGrained:
    v_f: Tensor
    t_f: Tensor
    sim_f: Tensor


def fine_grained(v_g, t_g, V_locals, T_locals, v_mask=None, t_mask=None) -> FineGrained:
    """``v_f`` attends over visual locals from ``t_g``, ``t_f`` over textual locals from ``v_g``."""
    v_f, _ = cross_modal_attention(t_g, V_locals, mask=v_mask)
    t_f, _ = cross_modal_attention(v_g, T_locals, mask=t_mask)
    sim_f = (nx.cosine(v_g, t_f) + nx.cosine(v_f, t_g)) * 0.5
    return FineGrained(v_f, t_f, sim_f)


def sim_fine(v_g, t_g, V_locals, T_locals, v_mask=None, t_mask=None) -> Tensor:
    return fine_grained(v_g, t_g, V_locals, T_locals, v_mask, t_mask).sim_f


def overall_similarity(sim_c, sim_g, sim_f, lambda1: float = 1.0, lambda2: float = 1.0) -> SimilarityBundle:
    def val(x):
        return x.data if isinstance(x, Tensor) else x

    c, g, f = val(sim_c), val(sim_g), val(sim_f)
    return SimilarityBundle(c, g, f, c + lambda1 * g + lambda2 * f, lambda1, lambda2)
