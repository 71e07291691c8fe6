"""Condition-regressed diagonal Gaussian mixture q(z | c).

A GRU reads the past motion and a linear readout produces, per mode, a
mixture logit, a mean and a scale pre-activation. Weights come from a
softmax and scales from ``softplus + sigma_floor``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .diffcore import GruSpec, ParamStore, init_gru, no_grad, recurrent_encode
from .diffcore import tensor as T
from .errors import DimensionError

LOG_2PI = np.log(2.0 * np.pi)
_SOFTPLUS_INV_ONE = np.log(np.e - 1.0)


@dataclass
class GmmParams:
    """Mixture weights (M,), means (M, d) and per-dimension scales (M, d)."""

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray

    @property
    def n_modes(self):
        return self.weights.shape[-1]

    @property
    def dim(self):
        return self.means.shape[-1]

    def shifted(self, v):
        return GmmParams(self.weights, self.means + np.asarray(v), self.scales)


def gmm_log_prob(g, z):
    """log sum_m w_m N(z; mu_m, diag sigma_m^2) for z of shape (d,) or (K, d)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[-1] != g.dim:
        raise DimensionError(f"point dimension {z.shape[-1]} != mixture dimension {g.dim}")
    with np.errstate(divide="ignore"):
        log_w = np.log(g.weights)
    inv = 1.0 / g.scales
    # (K, M, d) standardized residuals
    r = (z[:, None, :] - g.means[None, :, :]) * inv[None, :, :]
    comp = -0.5 * np.einsum("kmd,kmd->km", r, r) - np.log(g.scales).sum(-1) - 0.5 * g.dim * LOG_2PI
    out = logsumexp(comp + log_w, axis=1)
    return float(out[0]) if single else out


def gmm_sample(g, rng, n):
    """Draw ``n`` points: a mode by its weight, then a diagonal Gaussian draw."""
    if n < 1:
        raise ValueError("n must be >= 1")
    modes = rng.choice(g.n_modes, size=n, p=g.weights / g.weights.sum())
    eps = rng.standard_normal((n, g.dim))
    return g.means[modes] + g.scales[modes] * eps


def condition_matrix(c):
    """Flatten a condition into (T, features): a pose sequence (H, J, C) or a feature vector."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 1:
        return c[None, :]
    return c.reshape(c.shape[0], -1)


class GmmHead:
    """GRU encoder plus linear readout producing :class:`GmmParams`."""

    def __init__(self, input_size, dim, n_modes=50, hidden_size=128, sigma_floor=1e-3, params=None, rng=None):
        self.input_size = int(input_size)
        self.dim = int(dim)
        self.n_modes = int(n_modes)
        self.hidden_size = int(hidden_size)
        self.sigma_floor = float(sigma_floor)
        self.gru = GruSpec(self.input_size, self.hidden_size)
        self.out_width = self.n_modes * (1 + 2 * self.dim)
        if params is None:
            params = ParamStore(self.init_arrays(np.random.default_rng(rng)))
        self.params = params

    def init_arrays(self, rng):
        arrays = init_gru(self.gru, rng)
        m, d = self.n_modes, self.dim
        limit = np.sqrt(6.0 / (self.hidden_size + self.out_width))
        w = rng.uniform(-limit, limit, size=(self.hidden_size, self.out_width))
        b = np.zeros(self.out_width)
        # spread the initial means so modes do not start out identical
        b[m : m + m * d] = rng.standard_normal(m * d)
        b[m + m * d :] = _SOFTPLUS_INV_ONE
        arrays["head/w"] = w
        arrays["head/b"] = b
        return arrays

    @classmethod
    def zeros(cls, input_size, dim, n_modes=50, hidden_size=128, sigma_floor=1e-3):
        head = cls(input_size, dim, n_modes, hidden_size, sigma_floor, rng=0)
        head.params.params[:] = 0.0
        return head

    def _outputs(self, conditions):
        """Tensors (logits (B, M), means (B, M, d), scales (B, M, d))."""
        h = recurrent_encode(self.gru, self.params, conditions)
        out = h @ self.params.tensor("head/w") + self.params.tensor("head/b")
        m, d = self.n_modes, self.dim
        logits = out[:, :m]
        means = out[:, m : m + m * d].reshape((-1, m, d))
        scales = T.softplus(out[:, m + m * d :]).reshape((-1, m, d)) + self.sigma_floor
        return logits, means, scales

    def regress(self, c):
        """GmmParams for one condition (a sequence or a feature vector)."""
        return self.regress_batch(condition_matrix(c)[None])[0]

    def regress_batch(self, conditions):
        """List of GmmParams for conditions shaped (B, T, features)."""
        conditions = np.asarray(conditions, dtype=np.float64)
        with no_grad():
            logits, means, scales = self._outputs(conditions)
        weights = softmax(logits.data, axis=-1)
        return [GmmParams(w, mu, s) for w, mu, s in zip(weights, means.data, scales.data)]

    def log_prob_tensor(self, conditions, z):
        """Differentiable log q(z_b | c_b) for each batch row; returns Tensor (B,)."""
        logits, means, scales = self._outputs(conditions)
        log_w = T.log_softmax(logits, axis=-1)
        diff = (T.Tensor(np.asarray(z)[:, None, :]) - means) / scales
        comp = (
            T.mul(T.square(diff).sum(axis=-1), -0.5)
            - T.log(scales).sum(axis=-1)
            - 0.5 * self.dim * LOG_2PI
        )
        return T.logsumexp(log_w + comp, axis=-1)

    def nll_tensor(self, conditions, z):
        return T.mul(self.log_prob_tensor(conditions, z).mean(), -1.0)


def regress_gmm(head, c):
    return head.regress(c)
