"""Encoders between flattened future motions and the flow's latent space.

CFCODEC1 layout (little-endian)::

    8 bytes  magic b"CFCODEC1"
    u32 D, u32 d
    f64[D]     mean
    f64[d*D]   basis, row-major (rows orthonormal)
"""

import struct

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DimensionError, FormatError, RankError

MAGIC = b"CFCODEC1"


def _flatten(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        return X[None, :], True
    return X.reshape(X.shape[0], -1), False


class LinearCodec(TransformerMixin, BaseEstimator):
    """Orthonormal linear projection onto the top principal directions.

    Parameters
    ----------
    n_components : int
        Latent size d.

    Attributes
    ----------
    mean_ : ndarray of shape (D,)
    components_ : ndarray of shape (d, D)
        Orthonormal rows; the largest-magnitude entry of each row is positive.
    explained_variance_ : ndarray of shape (d,)
    """

    def __init__(self, n_components=8):
        self.n_components = n_components

    def fit(self, X, y=None):
        flat, _ = _flatten(X)
        n, D = flat.shape
        d = int(self.n_components)
        if d > D:
            raise DimensionError(f"n_components={d} exceeds input size {D}")
        if n < d:
            raise RankError(d, min(n, D))
        mean = flat.mean(axis=0)
        centered = flat - mean
        cov = centered.T @ centered / max(n - 1, 1)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        tol = max(evals[0], 0.0) * D * np.finfo(np.float64).eps * 10
        rank = int(np.sum(evals > tol))
        if rank < d:
            raise RankError(d, rank)
        basis = evecs[:, :d].T.copy()
        pivots = np.argmax(np.abs(basis), axis=1)
        signs = np.sign(basis[np.arange(d), pivots])
        basis *= signs[:, None]
        self.mean_ = mean
        self.components_ = basis
        self.explained_variance_ = evals[:d]
        self.total_variance_ = float(evals.clip(min=0).sum())
        self.n_features_in_ = D
        return self

    def _check(self, flat):
        check_is_fitted(self, "components_")
        if flat.shape[1] != self.components_.shape[1]:
            raise DimensionError(f"codec expects {self.components_.shape[1]} features, got {flat.shape[1]}")

    def transform(self, X):
        flat, single = _flatten(X)
        self._check(flat)
        out = (flat - self.mean_) @ self.components_.T
        return out[0] if single else out

    def inverse_transform(self, Z):
        Z = np.asarray(Z, dtype=np.float64)
        check_is_fitted(self, "components_")
        if Z.shape[-1] != self.components_.shape[0]:
            raise DimensionError(f"codec expects latents of size {self.components_.shape[0]}, got {Z.shape[-1]}")
        return Z @ self.components_ + self.mean_

    encode = transform
    decode = inverse_transform

    @property
    def latent_dim(self):
        return self.components_.shape[0]

    def to_bytes(self):
        check_is_fitted(self, "components_")
        d, D = self.components_.shape
        return (
            MAGIC
            + struct.pack("<II", D, d)
            + self.mean_.astype("<f8").tobytes()
            + self.components_.astype("<f8").tobytes()
        )

    @classmethod
    def from_bytes(cls, data):
        if data[:8] != MAGIC:
            raise FormatError("not a CFCODEC1 file", 0)
        if len(data) < 16:
            raise FormatError("truncated header", len(data))
        D, d = struct.unpack("<II", data[8:16])
        expected = 16 + 8 * D * (d + 1)
        if len(data) != expected:
            raise FormatError(f"expected {expected} bytes, found {len(data)}", min(len(data), expected))
        body = np.frombuffer(data[16:], dtype="<f8").astype(np.float64)
        identity = D == d and not body[:D].any() and np.array_equal(body[D:].reshape(d, D), np.eye(D))
        codec = IdentityCodec() if identity else LinearCodec(n_components=d)
        codec.mean_ = body[:D].copy()
        codec.components_ = body[D:].reshape(d, D).copy()
        codec.n_features_in_ = D
        if identity:
            codec.n_components_ = D
        return codec

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


class IdentityCodec(LinearCodec):
    """Flattens futures unchanged; latent size equals the flattened size."""

    def __init__(self):
        pass

    def fit(self, X, y=None):
        flat, _ = _flatten(X)
        D = flat.shape[1]
        self.mean_ = np.zeros(D)
        self.components_ = np.eye(D)
        self.n_features_in_ = D
        self.n_components_ = D
        return self

    def transform(self, X):
        flat, single = _flatten(X)
        self._check(flat)
        return flat[0].copy() if single else flat.copy()

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        return np.asarray(Z, dtype=np.float64).copy()

    encode = transform
    decode = inverse_transform


def fit_linear(futures, d):
    return LinearCodec(n_components=d).fit(futures)


def load_codec(path):
    return LinearCodec.load(path)
