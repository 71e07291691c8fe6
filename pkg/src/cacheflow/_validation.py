"""Input checks shared by the estimator and the CLI."""

import numbers

import numpy as np

from .errors import DimensionError


def check_finite(a, name):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


def check_pasts(pasts, n_features=None):
    """Coerce pasts to (N, H, features).

    Accepts (N, H, J, C) pose sequences, (N, H, F) feature sequences or
    (N, F) single-frame feature vectors.
    """
    pasts = check_finite(pasts, "pasts")
    if pasts.ndim < 2:
        raise DimensionError(f"pasts must have at least 2 dimensions, got shape {pasts.shape}")
    if pasts.ndim == 2:
        pasts = pasts[:, None, :]
    else:
        pasts = pasts.reshape(pasts.shape[0], pasts.shape[1], -1)
    if pasts.shape[0] == 0 or pasts.shape[1] == 0:
        raise ValueError(f"pasts must be non-empty, got shape {pasts.shape}")
    if n_features is not None and pasts.shape[2] != n_features:
        raise DimensionError(f"pasts have {pasts.shape[2]} features per frame, model expects {n_features}")
    return pasts


def check_futures(futures, n_items=None):
    futures = check_finite(futures, "futures")
    if futures.ndim < 2:
        raise DimensionError(f"futures must be (N, ...) with N items, got shape {futures.shape}")
    if n_items is not None and len(futures) != n_items:
        raise ValueError(f"{len(futures)} futures for {n_items} pasts")
    return futures


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_choice(value, name, choices):
    if value not in choices:
        raise ValueError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value
