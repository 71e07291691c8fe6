"""Method comparison on a test split: one metrics row per method."""

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import metrics
from .kde import fit_kde, kde_log_prob

METHODS = ("cacheflow", "gmm-only", "kde", "random", "most-likely")
COLUMNS = ("method", "APD", "ADE", "FDE", "MMADE", "MMFDE", "MMLogProb", "time_ms")


@dataclass
class MethodResult:
    method: str
    APD: float
    ADE: float
    FDE: float
    MMADE: float
    MMFDE: float
    MMLogProb: float
    time_ms: float
    n_excluded: int = 0

    def row(self):
        d = asdict(self)
        return {k: d[k] for k in COLUMNS}


def _predict(model, strategy, past, n, rng):
    start = time.perf_counter()
    pred = model.predict_indices(past, n, strategy, rng)
    elapsed = time.perf_counter() - start
    return pred, elapsed


def evaluate(models, pasts, futures, methods, n=50, threshold=None, n_conditions=None, seed=0):
    """Compare methods on held-out items.

    Args:
        models: dict with a fitted ``"cacheflow"`` model and, for the
            ``gmm-only`` method, a fitted ``"gmm-only"`` model.
        pasts, futures: test split.
        methods: subset of :data:`METHODS`.
        n: predictions per condition.
        threshold: MMGT past-distance threshold; chosen from the pasts if None.
        n_conditions: evaluate the first this many items (all if None).

    Returns:
        list of :class:`MethodResult` in the order of ``methods``.
    """
    methods = list(methods)
    if not methods:
        raise ValueError("no methods selected")
    unknown = sorted(set(methods) - set(METHODS))
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")
    pasts = np.asarray(pasts, dtype=np.float64)
    futures = np.asarray(futures, dtype=np.float64)
    if threshold is None:
        threshold = metrics.choose_threshold(pasts)
    mmgt = metrics.build_mmgt(pasts, threshold=threshold)
    items = range(len(pasts) if n_conditions is None else min(n_conditions, len(pasts)))
    out = []
    for method in methods:
        model = models["gmm-only" if method == "gmm-only" else "cacheflow"]
        strategy = {"random": "random", "most-likely": "most_likely"}.get(method, "nn")
        rng = np.random.default_rng(seed)
        latents = model.codec_.encode(futures)
        scores = {k: [] for k in ("APD", "ADE", "FDE", "MMADE", "MMFDE")}
        times, kde_models = [], {}
        for j in items:
            pred, elapsed = _predict(model, strategy, pasts[j], n, rng)
            times.append(elapsed)
            decoded = pred.decode(model.codec_, model.future_shape_)
            group = futures[mmgt.members[j]]
            scores["APD"].append(metrics.apd(decoded))
            scores["ADE"].append(metrics.ade(decoded, futures[j]))
            scores["FDE"].append(metrics.fde(decoded, futures[j]))
            scores["MMADE"].append(metrics.mmade(decoded, group))
            scores["MMFDE"].append(metrics.mmfde(decoded, group))
            if method == "kde":
                kde_models[j] = fit_kde(pred.latents())

        if method == "random":
            mm_lp, excluded = float("nan"), 0
        else:
            sub = metrics.MultimodalGT([mmgt.members[j] for j in items], threshold)
            if method == "kde":
                fn = lambda j, x: kde_log_prob(kde_models[j], x)  # noqa: E731
            else:
                fn = lambda j, x: model.latent_log_prob(pasts[j], x)  # noqa: E731
            mm_lp, excluded = metrics.mm_log_prob_per_dim(fn, sub, latents, latents.shape[1])
        out.append(
            MethodResult(
                method,
                *(float(np.mean(scores[k])) for k in ("APD", "ADE", "FDE", "MMADE", "MMFDE")),
                mm_lp,
                1e3 * float(np.median(times)),
                excluded,
            )
        )
    return out
