"""Precomputed (z, log|det J|^-1, x) triplets and nearest-neighbour lookup.

CFCACHE1 layout (little-endian)::

    8 bytes   magic b"CFCACHE1"
    u32       format version (1)
    u32       d
    u64       K
    u8        payload precision: 0 = f32, 1 = f64
    32 bytes  model fingerprint (SHA-256)
    u8        integrator scheme: 0 = euler, 1 = rk4
    u32       integrator steps
    K records of: z[d], log_det_inv, x[d]

At d = 8 and f32 that is 68 bytes per record.
"""

import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cnf import IntegratorConfig, flow_inverse
from .errors import FingerprintMismatch, FormatError, NumericError

MAGIC = b"CFCACHE1"
VERSION = 1
_HEADER = struct.Struct("<8sIIQB32sBI")
HEADER_SIZE = _HEADER.size
_PRECISIONS = {"f32": (0, "<f4"), "f64": (1, "<f8")}
_SCHEMES = ("euler", "rk4")


def bytes_per_record(d, precision="f32"):
    return (2 * d + 1) * np.dtype(_PRECISIONS[precision][1]).itemsize


def predicted_file_size(K, d, precision="f32"):
    """Exact on-disk size of a cache file in bytes."""
    return HEADER_SIZE + K * bytes_per_record(d, precision)


@dataclass(eq=False)
class TripletCache:
    z: np.ndarray
    log_det_inv: np.ndarray
    x: np.ndarray
    fingerprint: bytes
    integrator: IntegratorConfig
    precision: str = "f64"
    n_skipped: int = 0

    def __post_init__(self):
        if len(self.z) < 1:
            raise ValueError("a cache needs at least one triplet")
        if not (len(self.z) == len(self.x) == len(self.log_det_inv)):
            raise ValueError("triplet arrays differ in length")
        if self.precision not in _PRECISIONS:
            raise ValueError(f"precision must be one of {tuple(_PRECISIONS)}")
        if self.precision == "f32":
            # keep memory identical to what the file will hold
            self.z, self.log_det_inv, self.x = (
                np.asarray(a, dtype=np.float32).astype(np.float64) for a in (self.z, self.log_det_inv, self.x)
            )
        self._index = None

    def __len__(self):
        return len(self.z)

    @property
    def dim(self):
        return self.z.shape[1]

    def check(self, fingerprint):
        """Refuse use by a model whose fingerprint differs."""
        if fingerprint is not None and fingerprint != self.fingerprint:
            raise FingerprintMismatch(fingerprint.hex(), self.fingerprint.hex())

    def index(self):
        if self._index is None:
            self._index = NearestIndex(self.z)
        return self._index

    def to_bytes(self):
        flag, dtype = _PRECISIONS[self.precision]
        header = _HEADER.pack(
            MAGIC, VERSION, self.dim, len(self), flag, self.fingerprint,
            _SCHEMES.index(self.integrator.scheme), self.integrator.steps,
        )
        records = np.concatenate([self.z, self.log_det_inv[:, None], self.x], axis=1)
        return header + records.astype(dtype).tobytes()

    @classmethod
    def from_bytes(cls, data):
        if len(data) < HEADER_SIZE:
            raise FormatError("truncated header", len(data))
        magic, version, d, K, flag, fp, scheme, steps = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError("not a CFCACHE1 file", 0)
        if version != VERSION:
            raise FormatError(f"unsupported cache version {version}", 8)
        precision = {v[0]: k for k, v in _PRECISIONS.items()}.get(flag)
        if precision is None:
            raise FormatError(f"unknown precision flag {flag}", 24)
        expected = predicted_file_size(K, d, precision)
        if len(data) != expected:
            raise FormatError(f"expected {expected} bytes for K={K}, d={d}, found {len(data)}", min(len(data), expected))
        dtype = _PRECISIONS[precision][1]
        rec = np.frombuffer(data, dtype=dtype, offset=HEADER_SIZE).reshape(K, 2 * d + 1).astype(np.float64)
        return cls(
            z=rec[:, :d].copy(),
            log_det_inv=rec[:, d].copy(),
            x=rec[:, d + 1 :].copy(),
            fingerprint=fp,
            integrator=IntegratorConfig(_SCHEMES[scheme], steps),
            precision=precision,
        )


def save_cache(cache, path):
    data = cache.to_bytes()
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_cache(path):
    with open(path, "rb") as f:
        return TripletCache.from_bytes(f.read())


def build_cache(flow, codec, futures, cfg=IntegratorConfig(), precision="f64", chunk=1024):
    """Inverse-transform every training future through the frozen flow.

    Triplets with non-finite values are dropped with a warning; the number
    dropped is stored in ``n_skipped``.
    """
    x = codec.encode(futures) if codec is not None else np.asarray(futures, dtype=np.float64)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    zs, lds = [], []
    for start in range(0, len(x), chunk):
        block = x[start : start + chunk]
        try:
            res = flow_inverse(flow, block, cfg)
            zs.append(res.endpoint)
            lds.append(res.log_det_inv)
        except NumericError:
            for row in block:
                try:
                    res = flow_inverse(flow, row[None], cfg)
                    zs.append(res.endpoint)
                    lds.append(res.log_det_inv)
                except NumericError:
                    zs.append(np.full((1, x.shape[1]), np.nan))
                    lds.append(np.array([np.nan]))
    z = np.concatenate(zs)
    ld = np.concatenate(lds)
    ok = np.all(np.isfinite(z), axis=1) & np.isfinite(ld) & np.all(np.isfinite(x), axis=1)
    skipped = int((~ok).sum())
    if skipped:
        warnings.warn(f"skipped {skipped} non-finite triplets while building cache", RuntimeWarning)
    return TripletCache(z[ok], ld[ok], x[ok], flow.fingerprint(), cfg, precision, skipped)


# ---------------------------------------------------------------- nearest neighbour


def _sq_dist(points, q):
    diff = points - q
    return np.einsum("kd,kd->k", diff, diff)


def nearest_bruteforce(points, queries):
    """Linear scan; ties go to the lowest index."""
    queries = np.atleast_2d(queries)
    out = np.empty(len(queries), dtype=np.int64)
    for i, q in enumerate(queries):
        out[i] = np.argmin(_sq_dist(points, q))
    return out


class NearestIndex:
    """Exact Euclidean nearest neighbour with a KD-tree accelerator.

    The tree proposes every point within a hair of the best distance; the
    final choice is made with the same distance arithmetic as the linear
    scan, so both paths return identical indices.
    """

    def __init__(self, points, use_tree=True):
        self.points = np.asarray(points, dtype=np.float64)
        self.tree = cKDTree(self.points) if use_tree else None

    def query(self, queries):
        queries = np.asarray(queries, dtype=np.float64)
        single = queries.ndim == 1
        queries = np.atleast_2d(queries)
        if self.tree is None:
            out = nearest_bruteforce(self.points, queries)
        else:
            best, _ = self.tree.query(queries, k=1)
            radius = best * (1.0 + 1e-9) + 1e-12
            out = np.empty(len(queries), dtype=np.int64)
            for i, cand in enumerate(self.tree.query_ball_point(queries, radius)):
                cand = np.sort(np.asarray(cand, dtype=np.int64))
                out[i] = cand[np.argmin(_sq_dist(self.points[cand], queries[i]))]
        return int(out[0]) if single else out


def nearest(cache, z):
    """Index of the cached z_k closest to ``z``."""
    return cache.index().query(z)
