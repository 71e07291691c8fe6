"""Gaussian KDE over per-dimension standardized samples with Scott's factor."""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import DimensionError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class KdeModel:
    samples: np.ndarray  # standardized, (n, d)
    center: np.ndarray
    std: np.ndarray
    bandwidth: float

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]


def scott_factor(n, d):
    return float(n) ** (-1.0 / (d + 4))


def fit_kde(samples):
    """Standardize each dimension by its own std, then set h = n^(-1/(d+4))."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, d = samples.shape
    if n < 2:
        raise ValueError("KDE needs at least two samples")
    center = samples.mean(axis=0)
    std = samples.std(axis=0, ddof=1)
    flat = std <= 0
    if flat.any():
        warnings.warn(f"{int(flat.sum())} zero-variance dimension(s); using unit scale", RuntimeWarning)
        std = np.where(flat, 1.0, std)
    return KdeModel((samples - center) / std, center, std, scott_factor(n, d))


def kde_log_prob(model, x):
    """Log density at x (shape (d,) or (m, d)) in the original coordinates."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1 and model.dim == 1 and x.size != 1:
        x = x[:, None]
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.dim:
        raise DimensionError(f"query dimension {x.shape[1]} != KDE dimension {model.dim}")
    h = model.bandwidth
    q = (x - model.center) / model.std
    norm = model.dim * np.log(h) + 0.5 * model.dim * LOG_2PI + np.log(model.n) + np.log(model.std).sum()
    out = np.empty(len(q))
    step = max(1, 4_000_000 // (model.n * model.dim))
    for start in range(0, len(q), step):
        block = q[start : start + step]
        sq = ((block[:, None, :] - model.samples[None, :, :]) ** 2).sum(-1)
        out[start : start + step] = logsumexp(-0.5 * sq / h**2, axis=1) - norm
    return float(out[0]) if single else out


class ScottKDE(BaseEstimator):
    """Estimator wrapper around :func:`fit_kde` / :func:`kde_log_prob`."""

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        self.model_ = fit_kde(X)
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        return kde_log_prob(self.model_, check_array(X))

    def score(self, X, y=None):
        return float(self.score_samples(X).sum())
