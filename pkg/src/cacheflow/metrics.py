"""Diversity and accuracy metrics for stochastic sequence prediction.

Predictions and ground truths are sequences shaped (T, ...) where every
trailing axis is flattened into the per-frame pose vector. Distances are
Euclidean.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import DimensionError


def _frames(a):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape[0], a.shape[1], -1)


def apd(preds):
    """Mean L2 distance over all unordered pairs of flattened predictions."""
    preds = np.asarray(preds, dtype=np.float64)
    if len(preds) < 2:
        raise ValueError("APD needs at least two predictions")
    return float(pdist(preds.reshape(len(preds), -1)).mean())


def _per_frame(preds, gt):
    preds, gt = _frames(preds), np.asarray(gt, dtype=np.float64)
    gt = gt.reshape(gt.shape[0], -1)
    if preds.shape[1:] != gt.shape:
        raise DimensionError(f"prediction frames {preds.shape[1:]} do not match ground truth {gt.shape}")
    return np.linalg.norm(preds - gt[None], axis=-1)


def ade(preds, gt):
    """Best-of-n average per-frame displacement."""
    return float(_per_frame(preds, gt).mean(axis=1).min())


def fde(preds, gt):
    """Best-of-n final-frame displacement."""
    return float(_per_frame(preds, gt)[:, -1].min())


def mmade(preds, mmgt):
    if len(mmgt) == 0:
        raise ValueError("multimodal ground truth set is empty")
    return float(np.mean([ade(preds, g) for g in mmgt]))


def mmfde(preds, mmgt):
    if len(mmgt) == 0:
        raise ValueError("multimodal ground truth set is empty")
    return float(np.mean([fde(preds, g) for g in mmgt]))


@dataclass
class MultimodalGT:
    """For each item, indices of items whose pasts lie within ``threshold``."""

    members: list
    threshold: float

    def __len__(self):
        return len(self.members)

    def futures(self, futures, j):
        return np.asarray(futures)[self.members[j]]


def build_mmgt(pasts, futures=None, threshold=None):
    """Group items whose flattened pasts are within ``threshold`` of each other."""
    if threshold is None or not threshold >= 0:
        raise ValueError("threshold must be >= 0")
    flat = np.asarray(pasts, dtype=np.float64).reshape(len(pasts), -1)
    dist = cdist(flat, flat)
    members = [np.flatnonzero(row <= threshold) for row in dist]
    return MultimodalGT(members, float(threshold))


def choose_threshold(pasts, target_size=5):
    """Threshold at which the median group size is about ``target_size``."""
    flat = np.asarray(pasts, dtype=np.float64).reshape(len(pasts), -1)
    dist = np.sort(cdist(flat, flat), axis=1)
    k = min(target_size, len(flat)) - 1
    return float(np.median(dist[:, k]))


def mm_log_prob_per_dim(log_prob_fn, mmgt, latents, dim):
    """Mean over items of the mean log density of their MMGT members, per dimension.

    Args:
        log_prob_fn: callable (item index j, member latents (m, d)) -> (m,) log densities
            under item j's condition.
        mmgt: :class:`MultimodalGT`.
        latents: (N, d) array of the items' futures in the density's space.
        dim: dimensionality used for normalisation.

    Returns:
        (score, n_excluded) where non-finite member densities are excluded.
    """
    per_item, excluded = [], 0
    latents = np.asarray(latents, dtype=np.float64)
    for j, members in enumerate(mmgt.members):
        lp = np.asarray(log_prob_fn(j, latents[members]), dtype=np.float64)
        finite = np.isfinite(lp)
        excluded += int((~finite).sum())
        if finite.any():
            per_item.append(lp[finite].mean() / dim)
    return float(np.mean(per_item)), excluded
