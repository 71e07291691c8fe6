"""MLP and GRU building blocks on top of :mod:`tensor` and :class:`ParamStore`."""

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError
from . import tensor as T
from .tensor import Tensor, as_tensor, no_grad

ACTIVATIONS = ("tanh", "silu")


def _act_numpy(name, x):
    if name == "tanh":
        return np.tanh(x)
    return x * (0.5 * (1.0 + np.tanh(0.5 * x)))


def _act_grad_numpy(name, x):
    if name == "tanh":
        y = np.tanh(x)
        return 1.0 - y * y
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return s + x * s * (1.0 - s)


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input first, output last) and the hidden activation."""

    widths: tuple
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"MLP needs at least two positive widths, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @property
    def in_width(self):
        return self.widths[0]

    @property
    def out_width(self):
        return self.widths[-1]


def init_mlp(spec, rng, prefix="", zero_last=True):
    """Glorot-uniform weights, zero biases; the last layer is zeroed by default."""
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        last = i == spec.n_layers - 1
        if last and zero_last:
            w = np.zeros((fan_in, fan_out))
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        arrays[f"{prefix}w{i}"] = w
        arrays[f"{prefix}b{i}"] = np.zeros(fan_out)
    return arrays


def _check_width(spec, x):
    if x.shape[-1] != spec.in_width:
        raise DimensionError(f"MLP expects input width {spec.in_width}, got {x.shape[-1]}")


def forward_mlp(spec, params, x, prefix=""):
    """Differentiable forward pass; ``x`` is a Tensor or array of shape (..., in_width)."""
    x = as_tensor(x)
    _check_width(spec, x)
    act = T.tanh if spec.activation == "tanh" else T.silu
    h = x
    for i in range(spec.n_layers):
        h = h @ params.tensor(f"{prefix}w{i}") + params.tensor(f"{prefix}b{i}")
        if i < spec.n_layers - 1:
            h = act(h)
    return h


def mlp_numpy(spec, params, x, prefix=""):
    """Same function as :func:`forward_mlp` evaluated on raw arrays, no tape."""
    x = np.asarray(x, dtype=np.float64)
    _check_width(spec, x)
    h = x
    for i in range(spec.n_layers):
        h = h @ params[f"{prefix}w{i}"] + params[f"{prefix}b{i}"]
        if i < spec.n_layers - 1:
            h = _act_numpy(spec.activation, h)
    return h


def mlp_with_input_trace(spec, params, x, n_diag, prefix=""):
    """Output and trace of d(out[:n]) / d(in[:n]) for n = ``n_diag``.

    Uses one forward-mode tangent per input coordinate, all propagated
    together, so the cost is about ``n_diag`` forward passes.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_width(spec, x)
    if n_diag > min(spec.in_width, spec.out_width):
        raise DimensionError("trace size exceeds input or output width")
    w0 = params[f"{prefix}w0"]
    h = x @ w0 + params[f"{prefix}b0"]
    # tangent[b, k, :] = d h / d x_k; the first layer's tangent is batch-independent
    tangent = np.broadcast_to(w0[:n_diag], (x.shape[0], n_diag, w0.shape[1]))
    for i in range(1, spec.n_layers):
        tangent = _act_grad_numpy(spec.activation, h)[:, None, :] * tangent
        h = _act_numpy(spec.activation, h)
        w = params[f"{prefix}w{i}"]
        if i < spec.n_layers - 1:
            tangent = tangent @ w
        else:
            trace = np.einsum("bkj,jk->b", tangent, w[:, :n_diag])
        h = h @ w + params[f"{prefix}b{i}"]
    if spec.n_layers == 1:
        trace = np.full(x.shape[0], np.trace(w0[:n_diag, :n_diag]))
    return h, trace


# ---------------------------------------------------------------- GRU


@dataclass(frozen=True)
class GruSpec:
    input_size: int
    hidden_size: int


def init_gru(spec, rng, prefix="gru/"):
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights and zero biases."""
    k = 1.0 / np.sqrt(spec.hidden_size)
    h3 = 3 * spec.hidden_size
    return {
        f"{prefix}w_in": rng.uniform(-k, k, size=(spec.input_size, h3)),
        f"{prefix}w_hid": rng.uniform(-k, k, size=(spec.hidden_size, h3)),
        f"{prefix}b_in": np.zeros(h3),
        f"{prefix}b_hid": np.zeros(h3),
    }


def gru_step(spec, params, x, h, prefix="gru/"):
    """One gated step: reset/update gates with a tanh candidate.

    ``x`` is (B, input_size), ``h`` is (B, hidden_size).
    """
    n = spec.hidden_size
    gi = x @ params.tensor(f"{prefix}w_in") + params.tensor(f"{prefix}b_in")
    gh = h @ params.tensor(f"{prefix}w_hid") + params.tensor(f"{prefix}b_hid")
    r = T.sigmoid(gi[:, :n] + gh[:, :n])
    z = T.sigmoid(gi[:, n : 2 * n] + gh[:, n : 2 * n])
    cand = T.tanh(gi[:, 2 * n :] + r * gh[:, 2 * n :])
    return (1.0 - z) * cand + z * h


def recurrent_encode(spec, params, sequence, prefix="gru/"):
    """Final hidden state after running the GRU over ``sequence``.

    Args:
        sequence: array or Tensor of shape (T, D_in) or (B, T, D_in).

    Returns:
        Tensor of shape (hidden,) or (B, hidden).
    """
    seq = as_tensor(sequence)
    single = seq.ndim == 2
    if single:
        seq = seq.reshape((1,) + seq.shape)
    if seq.ndim != 3:
        raise DimensionError(f"sequence must be (T, D) or (B, T, D), got {seq.shape}")
    if seq.shape[1] < 1:
        raise ValueError("cannot encode an empty sequence")
    if seq.shape[2] != spec.input_size:
        raise DimensionError(f"GRU expects {spec.input_size} input features, got {seq.shape[2]}")
    h = Tensor(np.zeros((seq.shape[0], spec.hidden_size)))
    for t in range(seq.shape[1]):
        h = gru_step(spec, params, seq[:, t, :], h, prefix=prefix)
    return h[0] if single else h


def recurrent_encode_numpy(spec, params, sequence, prefix="gru/"):
    with no_grad():
        return recurrent_encode(spec, params, sequence, prefix=prefix).data
