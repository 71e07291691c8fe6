"""Command-line pipeline: gen-data, train, cache, predict, eval, bench.

Every command reads one INI config (``--config``), writes its artifacts
under ``--out`` and leaves a ``<command>.json`` sidecar holding the config
hash. Exit codes: 0 success, 1 training diverged, 2 usage or config error,
3 missing or incompatible artifact.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields

import numpy as np

from . import evaluation
from .cache import save_cache
from .cnf import IntegratorConfig, flow_inverse
from .config import ConfigError, config_hash, load_config
from .datasets import BenchmarkSpec, Dataset, generate, load_array_file, save_array_file, write_manifest
from .errors import FingerprintMismatch, FormatError, TrainingDiverged
from .estimator import CacheFlow
from .fmtrain import write_loss_csv
from .inference import estimate_density
from .basedensity import gmm_log_prob

log = logging.getLogger("cacheflow")


class UsageError(Exception):
    pass


class ArtifactError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _write_sidecar(out, command, cfg, **extra):
    meta = {"command": command, "config_hash": config_hash(cfg), "config": cfg, **extra}
    with open(os.path.join(out, f"{command}.json"), "w") as f:
        json.dump(meta, f, indent=2, default=list)


def _require(cfg, section, key):
    value = cfg[section][key]
    if value is None:
        raise UsageError(f"missing required config key '{section}.{key}'")
    return value


def _load_dataset(cfg):
    path = _require(cfg, "data", "path")
    if not os.path.exists(path):
        raise UsageError(f"config key 'data.path' points to a missing file: {path}")
    manifest = cfg["data"]["manifest"]
    if manifest is None:
        sibling = os.path.join(os.path.dirname(path), "split.txt")
        manifest = sibling if os.path.exists(sibling) else None
    elif not os.path.exists(manifest):
        raise UsageError(f"config key 'data.manifest' points to a missing file: {manifest}")
    ds = load_array_file(path, manifest)
    if manifest is None:
        ds.test_idx = ds.train_idx
    return ds


def _model_from_config(cfg, seed, use_flow=None):
    m, t, c = cfg["model"], cfg["train"], cfg["cache"]
    return CacheFlow(
        latent_dim=m["latent_dim"],
        n_modes=m["n_modes"],
        hidden_width=m["hidden_width"],
        n_hidden_layers=m["n_hidden_layers"],
        rnn_hidden=m["rnn_hidden"],
        epochs=t["epochs"],
        steps=t["steps"],
        batch_size=t["batch_size"],
        lr=t["lr"],
        lambda_nll=t["lambda_nll"],
        lambda_cfm=t["lambda_cfm"],
        train_scheme=t["scheme"],
        train_steps=t["integrator_steps"],
        cache_scheme=c["scheme"],
        cache_steps=c["steps"],
        codec=m["codec"],
        use_flow=m["use_flow"] if use_flow is None else use_flow,
        sigma_floor=m["sigma_floor"],
        cache_precision=c["precision"],
        random_state=seed,
    )


def _load_model(out, name="model", with_cache=True):
    directory = os.path.join(out, name)
    if not os.path.exists(os.path.join(directory, "model.json")):
        raise ArtifactError(f"no trained model under {directory}; run 'train' first")
    model = CacheFlow.load(directory, with_cache=with_cache)
    if with_cache and not hasattr(model, "cache_"):
        raise ArtifactError(f"no cache under {directory}; run 'cache' first")
    return model


def _fit_model(cfg, seed, ds, out, name, use_flow=None):
    pasts, futures = ds.split("train")
    model = _model_from_config(cfg, seed, use_flow)
    start = time.perf_counter()
    model.fit(pasts, futures, with_cache=False)
    elapsed = time.perf_counter() - start
    model.save(os.path.join(out, name), with_cache=False)
    return model, elapsed


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg, args):
    data = cfg["data"]
    names = {f.name for f in fields(BenchmarkSpec)}
    spec = BenchmarkSpec(**{k: v for k, v in data.items() if k in names})
    ds = generate(spec)
    path = os.path.join(args.out, "data.cfdata")
    save_array_file(path, ds)
    write_manifest(os.path.join(args.out, "split.txt"), ds.train_idx, ds.test_idx)
    _write_sidecar(args.out, "gen-data", cfg, outputs=["data.cfdata", "split.txt"], n_items=len(ds))
    print(f"wrote {len(ds)} items to {path}")


def cmd_train(cfg, args):
    ds = _load_dataset(cfg)
    model, elapsed = _fit_model(cfg, args.seed, ds, args.out, "model")
    write_loss_csv(os.path.join(args.out, "loss.csv"), model.train_result_.curve)
    _write_sidecar(
        args.out, "train", cfg,
        outputs=["model/", "loss.csv"],
        steps=model.train_result_.steps,
        wall_time_s=elapsed,
        fingerprint=model.fingerprint_.hex(),
    )
    print(f"trained {model.train_result_.steps} steps in {elapsed:.1f}s")


def cmd_cache(cfg, args):
    ds = _load_dataset(cfg)
    model = _load_model(args.out, with_cache=False)
    start = time.perf_counter()
    cache = model.rebuild_cache(ds.split("train")[1])
    elapsed = time.perf_counter() - start
    path = os.path.join(args.out, "model", "cache.cfcache")
    size = save_cache(cache, path)
    _write_sidecar(
        args.out, "cache", cfg,
        outputs=["model/cache.cfcache"],
        n_triplets=len(cache),
        n_skipped=cache.n_skipped,
        bytes=size,
        build_time_s=elapsed,
    )
    print(f"cached {len(cache)} triplets ({size} bytes, {cache.n_skipped} skipped)")


def cmd_predict(cfg, args):
    ds = _load_dataset(cfg)
    model = _load_model(args.out)
    n, strategy = cfg["predict"]["n"], cfg["predict"]["strategy"]
    rng = np.random.default_rng(args.seed)
    pasts, _ = ds.split("test")
    rows, decoded = [], []
    for cid, past in enumerate(pasts):
        pred = model.predict_indices(past, n, strategy, rng)
        for rank, (k, lp) in enumerate(zip(pred.indices, pred.log_probs)):
            rows.append((cid, rank, int(k), float(lp)))
        decoded.append(pred.decode(model.codec_, model.future_shape_))
    with open(os.path.join(args.out, "predictions.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["condition_id", "rank", "cache_index", "log_prob"])
        writer.writerows((c, r, k, repr(lp)) for c, r, k, lp in rows)
    futures = np.concatenate(decoded).reshape(-1, *model.future_shape_)
    repeated = np.repeat(pasts.reshape(len(pasts), *ds.pasts.shape[1:]), n, axis=0)
    save_array_file(
        os.path.join(args.out, "predictions.cfdata"),
        Dataset(repeated, futures, ds.fps, np.arange(len(futures)), np.arange(0)),
    )
    _write_sidecar(args.out, "predict", cfg, outputs=["predictions.csv", "predictions.cfdata"], strategy=strategy, n=n)
    print(f"wrote {len(rows)} predictions for {len(pasts)} conditions")


def cmd_eval(cfg, args):
    methods = list(cfg["eval"]["methods"])
    if args.methods is not None:
        methods = [m for m in args.methods.split(",") if m]
    if not methods:
        raise UsageError("no methods selected; pass --methods or set eval.methods")
    unknown = sorted(set(methods) - set(evaluation.METHODS))
    if unknown:
        raise UsageError(f"unknown methods {unknown}; choose from {', '.join(evaluation.METHODS)}")
    ds = _load_dataset(cfg)
    models = {"cacheflow": _load_model(args.out)}
    if "gmm-only" in methods:
        gmm_dir = os.path.join(args.out, "model_gmm")
        if os.path.exists(os.path.join(gmm_dir, "model.json")):
            models["gmm-only"] = CacheFlow.load(gmm_dir, with_cache=False)
        else:
            models["gmm-only"], _ = _fit_model(cfg, args.seed, ds, args.out, "model_gmm", use_flow=False)
        models["gmm-only"].rebuild_cache(ds.split("train")[1])
    pasts, futures = ds.split("test")
    results = evaluation.evaluate(
        models, pasts, futures, methods,
        n=cfg["eval"]["n_samples"],
        threshold=cfg["eval"]["threshold"],
        n_conditions=cfg["eval"]["n_conditions"],
        seed=args.seed,
    )
    with open(os.path.join(args.out, "metrics.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=evaluation.COLUMNS)
        writer.writeheader()
        for r in results:
            writer.writerow(r.row())
    _write_sidecar(
        args.out, "eval", cfg,
        outputs=["metrics.csv"],
        excluded={r.method: r.n_excluded for r in results},
    )
    for r in results:
        print(f"{r.method:12s} ADE {r.ADE:.4f} FDE {r.FDE:.4f} APD {r.APD:.4f} MMLogProb {r.MMLogProb:.4f}")


def _median_time(fn, repeats, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def cmd_bench(cfg, args):
    b = cfg["bench"]
    ds = _load_dataset(cfg)
    model = _load_model(args.out, with_cache=False)
    train_futures = ds.split("train")[1]
    reps = -(-b["n_triplets"] // len(train_futures))
    futures = np.concatenate([train_futures] * reps)[: b["n_triplets"]]
    model.cache_steps, model.cache_scheme = b["steps"], b["scheme"]
    start = time.perf_counter()
    cache = model.rebuild_cache(futures)
    build_s = time.perf_counter() - start
    past = ds.split("test")[0][0] if len(ds.test_idx) else ds.pasts[0]
    rng = np.random.default_rng(args.seed)

    # both paths include regressing q(z | c) from the past
    def cached():
        report = estimate_density(cache, model.head_, model.regress(past), model.fingerprint_)
        if not args.density_only:
            model.predict_indices(past, cfg["predict"]["n"], "nn", rng).decode(model.codec_)
        return report

    integrator = IntegratorConfig(b["scheme"], b["steps"])

    def uncached():
        res = flow_inverse(model.flow_, cache.x, integrator)
        return gmm_log_prob(model.regress(past), res.endpoint) + res.log_det_inv

    cached_s = _median_time(cached, b["repeats"], b["warmup"])
    uncached_s = _median_time(uncached, b["repeats"], b["warmup"])
    report = {
        "n_triplets": len(cache),
        "integrator": f"{b['scheme']}/{b['steps']}",
        "density_only": bool(args.density_only),
        "repeats": b["repeats"],
        "warmup": b["warmup"],
        "cache_build_s": build_s,
        "cached_ms": 1e3 * cached_s,
        "uncached_ms": 1e3 * uncached_s,
        "speedup": uncached_s / cached_s,
    }
    with open(os.path.join(args.out, "bench.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        writer.writerows(report.items())
    _write_sidecar(args.out, "bench", cfg, outputs=["bench.csv"], report=report)
    print(f"cached {report['cached_ms']:.3f} ms  uncached {report['uncached_ms']:.1f} ms  speedup {report['speedup']:.1f}x")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "cache": cmd_cache,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="cacheflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", help="output directory, overrides run.out")
        if name == "bench":
            p.add_argument("--density-only", action="store_true", help="time density estimation without sampling")
        if name == "eval":
            p.add_argument("--methods", help=f"comma-separated subset of {','.join(evaluation.METHODS)}")
    return parser


def _limit_threads():
    value = os.environ.get("CF_THREADS")
    if not value:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if not hasattr(args, "density_only"):
        args.density_only = False
    if not hasattr(args, "methods"):
        args.methods = None
    try:
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = cfg["run"]["seed"]
        cfg["run"]["seed"] = args.seed
        if args.command == "gen-data":
            cfg["data"]["seed"] = args.seed
        args.out = args.out or cfg["run"]["out"]
        cfg["run"]["out"] = args.out
        os.makedirs(args.out, exist_ok=True)
        _limit_threads()
        COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"cacheflow {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"cacheflow {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ArtifactError, FingerprintMismatch, FormatError, FileNotFoundError) as exc:
        print(f"cacheflow {args.command}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
