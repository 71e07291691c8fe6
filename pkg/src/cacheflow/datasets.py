"""Synthetic conditional-motion benchmarks and the CFDATA01 array file.

CFDATA01 layout (little-endian)::

    8 bytes  magic b"CFDATA01"
    u32 H, u32 J_past, u32 C_past      past frames, joints, channels
    u32 F, u32 J_future, u32 C_future  future frames, joints, channels
    u64 N                              number of items
    f64 fps
    f32[N*H*J_past*C_past]             pasts
    f32[N*F*J_future*C_future]         futures

Pose data uses C = 3. The latent benchmark stores its d-dim futures as a
single frame with one joint and d channels.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, logsumexp

from .errors import FormatError

MAGIC = b"CFDATA01"
_HEADER = struct.Struct("<8sIIIIIIQd")
HEADER_SIZE = _HEADER.size
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class BenchmarkSpec:
    generator: str = "bimodal_pendulum"
    past_frames: int = 10
    future_frames: int = 20
    joints: int = 1
    n_train: int = 2000
    n_test: int = 200
    n_modes: int = 2
    noise: float = 0.01
    seed: int = 0
    mode_weights: tuple = (0.7, 0.3)
    weight_modulation: float = 0.5
    speed_jitter: float = 0.25
    latent_dim: int = 2
    fps: float = 25.0

    def __post_init__(self):
        if min(self.past_frames, self.future_frames, self.joints, self.n_train, self.n_modes) < 1 or self.n_test < 0:
            raise ValueError("benchmark sizes must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass
class Dataset:
    pasts: np.ndarray
    futures: np.ndarray
    fps: float
    train_idx: np.ndarray
    test_idx: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pasts)

    def split(self, which):
        idx = self.train_idx if which == "train" else self.test_idx
        return self.pasts[idx], self.futures[idx]


def _split(n_train, n_test):
    return np.arange(n_train), np.arange(n_train, n_train + n_test)


# ---------------------------------------------------------------- pendulum


def pendulum_angle(amplitude, phase, omega, t):
    return amplitude * np.sin(omega * t + phase)


def pendulum_position(theta, length=1.0):
    """Bob position (J=1, C=3) for angle array theta."""
    return np.stack([length * np.sin(theta), -length * np.cos(theta), np.zeros_like(theta)], axis=-1)


def pendulum_branch(amplitude, phase, speed, branch, spec, omega):
    """Analytic future for one item: branch 0 continues, branch 1 retraces its path."""
    t_end = (spec.past_frames - 1) / spec.fps
    dt = np.arange(1, spec.future_frames + 1) / spec.fps
    direction = 1.0 if branch == 0 else -1.0
    theta = pendulum_angle(amplitude, phase, omega, t_end + direction * speed * dt)
    return pendulum_position(theta)[:, None, :]


def pendulum_weights(phase, spec, omega):
    """Probability of the continue branch for an item with the given phase."""
    w0 = spec.mode_weights[0]
    t_end = (spec.past_frames - 1) / spec.fps
    swing = spec.weight_modulation * min(w0, 1.0 - w0)
    return w0 + swing * np.cos(omega * t_end + phase)


def gen_bimodal_pendulum(spec):
    """One-joint pendulum whose future either continues or reverses.

    Per item: amplitude, phase and a future speed factor are drawn; the
    branch is chosen with a phase-dependent probability. Futures are exact
    analytic curves plus optional Gaussian noise.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_test
    omega = 2.0 * np.pi * 0.6
    amplitude = rng.uniform(0.4, 1.0, n)
    phase = rng.uniform(0.0, 2.0 * np.pi, n)
    speed = rng.uniform(1.0 - spec.speed_jitter, 1.0 + spec.speed_jitter, n)
    p_cont = pendulum_weights(phase, spec, omega)
    branch = (rng.uniform(size=n) >= p_cont).astype(np.int64)
    t_past = np.arange(spec.past_frames) / spec.fps
    pasts = pendulum_position(pendulum_angle(amplitude[:, None], phase[:, None], omega, t_past[None]))[:, :, None, :]
    futures = np.stack([pendulum_branch(a, p, s, b, spec, omega) for a, p, s, b in zip(amplitude, phase, speed, branch)])
    if spec.joints > 1:
        # extra joints ride along the bob at fixed offsets
        offsets = np.linspace(0.0, 0.5, spec.joints)[None, None, :, None] * np.array([0.0, 1.0, 0.0])
        pasts = pasts + offsets
        futures = futures + offsets
    if spec.noise > 0:
        pasts = pasts + spec.noise * rng.standard_normal(pasts.shape)
        futures = futures + spec.noise * rng.standard_normal(futures.shape)
    train_idx, test_idx = _split(spec.n_train, spec.n_test)
    meta = {
        "generator": "bimodal_pendulum",
        "amplitude": amplitude,
        "phase": phase,
        "speed": speed,
        "branch": branch,
        "p_continue": p_cont,
        "omega": omega,
        "spec": spec,
    }
    return Dataset(pasts, futures, spec.fps, train_idx, test_idx, meta)


# ---------------------------------------------------------------- latent GMM


@dataclass
class LatentGmmTruth:
    """Closed-form conditional density: weights softmax(W u + b), means c + A u."""

    weight_w: np.ndarray  # (M, 2)
    weight_b: np.ndarray  # (M,)
    mean_c: np.ndarray  # (M, d)
    mean_a: np.ndarray  # (M, d, 2)
    scales: np.ndarray  # (M, d)

    def params(self, u):
        u = np.atleast_2d(u)
        logits = u @ self.weight_w.T + self.weight_b
        means = self.mean_c[None] + np.einsum("mdk,nk->nmd", self.mean_a, np.tanh(1.5 * u))
        return log_softmax(logits, axis=1), means

    def log_prob(self, u, x):
        """log p(x_i | u_i) for paired rows (or one u broadcast over many x)."""
        x = np.atleast_2d(x)
        log_w, means = self.params(u)
        if len(log_w) == 1 and len(x) > 1:
            log_w = np.repeat(log_w, len(x), 0)
            means = np.repeat(means, len(x), 0)
        with np.errstate(divide="ignore"):
            r = (x[:, None, :] - means) / self.scales[None]
            comp = -0.5 * (r**2).sum(-1) - np.log(self.scales).sum(-1)[None] - 0.5 * x.shape[1] * LOG_2PI
        return logsumexp(comp + log_w, axis=1)

    def sample(self, u, rng):
        log_w, means = self.params(u)
        w = np.exp(log_w)
        modes = np.array([rng.choice(len(row), p=row / row.sum()) for row in w])
        eps = rng.standard_normal((len(modes), means.shape[-1]))
        return means[np.arange(len(modes)), modes] + self.scales[modes] * eps

    @staticmethod
    def condition_from_past(past):
        """Recover u from a latent-benchmark past (..., H, 1, 3)."""
        past = np.asarray(past, dtype=np.float64)
        return past[..., -1, 0, :2]


def gen_latent_gmm(spec):
    """Futures drawn in R^d from a known condition-dependent mixture.

    The condition u ~ U(-1, 1)^2 is shown to the model as a constant
    H-frame sequence of (u1, u2, u1 * u2). ``noise`` scales every mode's
    standard deviation; noise 0 makes futures a deterministic function of
    u when there is a single mode.
    """
    rng = np.random.default_rng(spec.seed)
    m, d = spec.n_modes, spec.latent_dim
    angles = 2.0 * np.pi * np.arange(m) / m
    ring = np.zeros((m, d))
    ring[:, 0] = 2.0 * np.cos(angles)
    if d > 1:
        ring[:, 1] = 2.0 * np.sin(angles)
    if m == 1:
        ring[:] = 0.0
    truth = LatentGmmTruth(
        weight_w=rng.normal(0.0, 1.5, (m, 2)),
        weight_b=rng.normal(0.0, 0.3, m),
        mean_c=ring + rng.normal(0.0, 0.2, (m, d)),
        mean_a=rng.normal(0.0, 0.6, (m, d, 2)),
        scales=spec.noise * rng.uniform(0.5, 1.5, (m, d)),
    )
    n = spec.n_train + spec.n_test
    u = rng.uniform(-1.0, 1.0, (n, 2))
    if spec.noise > 0:
        futures = truth.sample(u, rng)
    else:
        log_w, means = truth.params(u)
        futures = means[np.arange(n), np.argmax(log_w, axis=1)]
    frame = np.stack([u[:, 0], u[:, 1], u[:, 0] * u[:, 1]], axis=-1)
    pasts = np.repeat(frame[:, None, None, :], spec.past_frames, axis=1)
    train_idx, test_idx = _split(spec.n_train, spec.n_test)
    meta = {"generator": "latent_gmm", "u": u, "truth": truth, "spec": spec}
    return Dataset(pasts, futures[:, None, None, :], spec.fps, train_idx, test_idx, meta)


GENERATORS = {"bimodal_pendulum": gen_bimodal_pendulum, "latent_gmm": gen_latent_gmm}


def generate(spec):
    try:
        return GENERATORS[spec.generator](spec)
    except KeyError:
        raise ValueError(f"unknown generator {spec.generator!r}; choose from {sorted(GENERATORS)}") from None


# ---------------------------------------------------------------- files


def expected_file_size(n, past_shape, future_shape):
    return HEADER_SIZE + 4 * n * (int(np.prod(past_shape)) + int(np.prod(future_shape)))


def dataset_to_bytes(pasts, futures, fps):
    pasts = np.asarray(pasts)
    futures = np.asarray(futures)
    if pasts.ndim != 4 or futures.ndim != 4 or len(pasts) != len(futures):
        raise ValueError("pasts and futures must be (N, T, J, C) arrays of equal length")
    header = _HEADER.pack(MAGIC, *pasts.shape[1:], *futures.shape[1:], len(pasts), float(fps))
    return header + pasts.astype("<f4").tobytes() + futures.astype("<f4").tobytes()


def dataset_from_bytes(data):
    if len(data) < 8 or data[:8] != MAGIC:
        raise FormatError("bad magic, not a CFDATA01 file", 0)
    if len(data) < HEADER_SIZE:
        raise FormatError(f"header needs {HEADER_SIZE} bytes, file has {len(data)}", len(data))
    _, h, jp, cp, f, jf, cf, n, fps = _HEADER.unpack_from(data)
    if min(h, jp, cp, f, jf, cf) < 1:
        raise FormatError("header has a zero extent", 8)
    if not np.isfinite(fps) or fps <= 0:
        raise FormatError(f"invalid fps {fps}", 40)
    expected = expected_file_size(n, (h, jp, cp), (f, jf, cf))
    if len(data) < expected:
        raise FormatError(f"truncated: header implies {expected} bytes, file has {len(data)}", len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after payload", expected)
    n_past = n * h * jp * cp
    pasts = np.frombuffer(data, dtype="<f4", count=n_past, offset=HEADER_SIZE).reshape(n, h, jp, cp)
    futures = np.frombuffer(data, dtype="<f4", offset=HEADER_SIZE + 4 * n_past).reshape(n, f, jf, cf)
    return pasts.astype(np.float32), futures.astype(np.float32), fps


def save_array_file(path, dataset):
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(dataset.pasts, dataset.futures, dataset.fps))


def load_array_file(path, manifest=None):
    """Load a CFDATA01 file; ``manifest`` optionally supplies the train/test split."""
    with open(path, "rb") as fh:
        pasts, futures, fps = dataset_from_bytes(fh.read())
    if manifest is not None:
        train_idx, test_idx = read_manifest(manifest)
    else:
        train_idx, test_idx = np.arange(len(pasts)), np.arange(0)
    return Dataset(pasts.astype(np.float64), futures.astype(np.float64), fps, train_idx, test_idx)


def write_manifest(path, train_idx, test_idx):
    with open(path, "w") as fh:
        fh.write("train " + " ".join(map(str, train_idx)) + "\n")
        fh.write("test " + " ".join(map(str, test_idx)) + "\n")


def read_manifest(path):
    splits = {"train": np.arange(0), "test": np.arange(0)}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] not in splits:
                raise FormatError(f"line {lineno}: unknown split {parts[0]!r}")
            splits[parts[0]] = np.array([int(p) for p in parts[1:]], dtype=np.int64)
    if np.intersect1d(splits["train"], splits["test"]).size:
        raise FormatError("train and test splits overlap")
    return splits["train"], splits["test"]
