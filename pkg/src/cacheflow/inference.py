"""Fast conditional inference over a triplet cache.

Density estimation evaluates only the mixture head: for every cached
triplet, ``log p(x_k | c) = log q(z_k | c) + log_det_inv_k``. The flow is
never run here.
"""

import time
from dataclasses import dataclass

import numpy as np

from .basedensity import GmmParams, gmm_log_prob, gmm_sample


@dataclass
class DensityReport:
    log_prob: np.ndarray
    argmax: int
    wall_time: float

    def __len__(self):
        return len(self.log_prob)


@dataclass
class PredictionSet:
    """Selected cache indices; futures are decoded only on request."""

    indices: np.ndarray
    log_probs: np.ndarray
    cache: object

    def __len__(self):
        return len(self.indices)

    def latents(self):
        return self.cache.x[self.indices]

    def decode(self, codec, shape=None):
        out = codec.decode(self.latents())
        return out if shape is None else out.reshape((len(self),) + tuple(shape))


def _gmm(head, c):
    return c if isinstance(c, GmmParams) else head.regress(c)


def estimate_density(cache, head, c, fingerprint=None):
    """log p(x_k | c) for every cached triplet.

    ``c`` is a condition or an already-regressed :class:`GmmParams`.
    Passing ``fingerprint`` refuses caches built by a different flow.
    """
    cache.check(fingerprint)
    start = time.perf_counter()
    g = _gmm(head, c)
    log_prob = gmm_log_prob(g, cache.z) + cache.log_det_inv
    argmax = int(np.argmax(log_prob))
    return DensityReport(log_prob, argmax, time.perf_counter() - start)


def sample_nn(cache, head, c, n, rng, fingerprint=None):
    """Draw n points from q(z | c) and snap each to its nearest cached z_k.

    Indices may repeat.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cache.check(fingerprint)
    g = _gmm(head, c)
    z = gmm_sample(g, rng, n)
    idx = np.atleast_1d(cache.index().query(z))
    log_probs = gmm_log_prob(g, cache.z[idx]) + cache.log_det_inv[idx]
    return PredictionSet(idx, np.atleast_1d(log_probs), cache)


def sample_random(cache, n, rng):
    """Uniform draw of n distinct cache indices, ignoring the condition."""
    if n > len(cache):
        raise ValueError(f"cannot draw {n} distinct items from a cache of {len(cache)}")
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = rng.choice(len(cache), size=n, replace=False)
    return PredictionSet(idx, np.full(n, np.nan), cache)


def sample_most_likely(report, n, cache=None):
    """Top-n cache indices by density; ties keep the lower index first."""
    if n > len(report):
        raise ValueError(f"cannot take top {n} of {len(report)} items")
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.argsort(-report.log_prob, kind="stable")[:n]
    return PredictionSet(idx, report.log_prob[idx], cache)
