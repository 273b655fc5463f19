"""Cosine similarity and the cross-modal NT-Xent loss with its analytic gradient.

Batch layout: the 2N embeddings are stacked as ``[rgb_0..rgb_{N-1},
dem_0..dem_{N-1}]``; the positive of ``rgb_i`` is ``dem_i`` and vice versa.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np


class NegativeSet(str, Enum):
    ALL_2N = "all_2N"  # every other embedding in the batch
    CROSS_MODAL_ONLY = "cross_modal_only"  # opposite-modality embeddings only


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.5
    negative_set: NegativeSet = NegativeSet.ALL_2N

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        object.__setattr__(self, "negative_set", NegativeSet(self.negative_set))


class LossInputError(ValueError):
    pass


def sim(u, v):
    """Cosine similarity of two nonzero vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise LossInputError(f"shape mismatch {u.shape} vs {v.shape}")
    unit, _ = _unit_rows(np.stack([u, v]))
    return float(np.clip(unit[0] @ unit[1], -1.0, 1.0))


def _unit_rows(z):
    # pre-scale by the row max so squaring cannot overflow or underflow
    scale = np.max(np.abs(z), axis=1, keepdims=True)
    if np.any(scale == 0) or not np.all(np.isfinite(z)):
        raise LossInputError("embeddings must be finite and nonzero")
    y = z / scale
    norms = np.linalg.norm(y, axis=1, keepdims=True)
    return y / norms, norms * scale


def _prepare(rgb, dem):
    rgb = np.asarray(rgb, dtype=np.float64)
    dem = np.asarray(dem, dtype=np.float64)
    if rgb.ndim != 2 or rgb.shape != dem.shape:
        raise LossInputError(f"need two (N, D) arrays of equal shape, got {rgb.shape} and {dem.shape}")
    n = rgb.shape[0]
    if n < 2:
        raise LossInputError("NT-Xent needs at least two pairs")
    u, norms = _unit_rows(np.concatenate([rgb, dem], axis=0))
    return n, u, norms


def _mask(n, negative_set):
    two_n = 2 * n
    if negative_set is NegativeSet.ALL_2N:
        mask = ~np.eye(two_n, dtype=bool)
    else:
        mask = np.zeros((two_n, two_n), dtype=bool)
        mask[:n, n:] = True
        mask[n:, :n] = True
    return mask


def _forward(rgb, dem, cfg):
    n, u, norms = _prepare(rgb, dem)
    logits = (u @ u.T) / cfg.temperature
    mask = _mask(n, cfg.negative_set)
    masked = np.where(mask, logits, -np.inf)
    shift = masked.max(axis=1, keepdims=True)
    expd = np.exp(masked - shift)
    denom = expd.sum(axis=1, keepdims=True)
    pos = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    rows = np.arange(2 * n)
    per_anchor = (np.log(denom[:, 0]) + shift[:, 0]) - logits[rows, pos]
    # the positive sits in its own denominator, so each term is >= 0 up to rounding
    per_anchor = np.maximum(per_anchor, 0.0)
    return n, u, norms, expd / denom, pos, per_anchor


def nt_xent(rgb_embeddings, dem_embeddings, cfg=LossConfig()):
    """Mean NT-Xent over all 2N anchors; returns (loss, per_anchor)."""
    *_, per_anchor = _forward(rgb_embeddings, dem_embeddings, cfg)
    return float(per_anchor.mean()), per_anchor


def nt_xent_grad(rgb_embeddings, dem_embeddings, cfg=LossConfig()):
    """Loss and its gradient w.r.t. both embedding sets.

    Returns ``(loss, d_rgb, d_dem)``.
    """
    n, u, norms, prob, pos, per_anchor = _forward(rgb_embeddings, dem_embeddings, cfg)
    two_n = 2 * n
    # dL/dlogit_ik for anchor row i
    coef = prob.copy()
    coef[np.arange(two_n), pos] -= 1.0
    coef /= two_n * cfg.temperature
    du = (coef + coef.T) @ u
    # through the row normalization z -> z/|z|
    du -= np.sum(du * u, axis=1, keepdims=True) * u
    dz = du / norms
    return float(per_anchor.mean()), dz[:n], dz[n:]
