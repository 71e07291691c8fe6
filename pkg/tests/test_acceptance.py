"""Acceptance criteria, one test each.

Every test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion with the measured numbers.
"""

import csv
import time
import warnings

import numpy as np
import pytest

import cacheflow.cnf as cnf
import cacheflow.fmtrain as fmtrain
from cacheflow import CacheFlow
from cacheflow.basedensity import GmmHead, gmm_log_prob
from cacheflow.cache import predicted_file_size
from cacheflow.cli import main
from cacheflow.cnf import Flow, IntegratorConfig, LinearField, MlpField, flow_forward, flow_inverse
from cacheflow.datasets import BenchmarkSpec, generate
from cacheflow.diffcore import backward
from cacheflow.fmtrain import TrainConfig, cfm_loss, joint_loss
from cacheflow.kde import fit_kde, kde_log_prob, scott_factor
from cacheflow.metrics import ade, apd, build_mmgt, choose_threshold, fde, mm_log_prob_per_dim, mmade, mmfde

pytestmark = pytest.mark.slow


def _detail(record_property, text):
    record_property("detail", text)


# ---------------------------------------------------------------- shared models


@pytest.fixture(scope="module")
def latent():
    """Latent-GMM benchmark (closed-form truth) with a trained toy model and f64 cache."""
    ds = generate(BenchmarkSpec(generator="latent_gmm", n_train=2000, n_test=200, n_modes=3, noise=0.3,
                                latent_dim=2, past_frames=4))
    P, F = ds.split("train")
    model = CacheFlow(codec="identity", n_modes=8, hidden_width=64, rnn_hidden=32, steps=2000, lr=2e-3,
                      cache_steps=16, cache_precision="f64")
    start = time.perf_counter()
    model.fit(P, F)
    return ds, model, time.perf_counter() - start


@pytest.fixture(scope="module")
def pendulum():
    """Pendulum benchmark with the default architecture, joint model and GMM-only ablation."""
    ds = generate(BenchmarkSpec(n_train=10_000, n_test=100, noise=0.01))
    P, F = ds.split("train")
    kw = dict(latent_dim=8, n_modes=50, hidden_width=256, rnn_hidden=32, steps=4000, lr=5e-4, batch_size=64,
              cache_steps=16)
    joint = CacheFlow(**kw).fit(P, F)
    gmm_only = CacheFlow(use_flow=False, **kw).fit(P, F)
    return ds, joint, gmm_only


# ---------------------------------------------------------------- 1


@pytest.mark.criterion(1, "cached log p(x_k|c) equals on-the-fly recomputation (rel 1e-6, f64)")
def test_c01_cache_correctness(latent, record_property):
    ds, model, fit_s = latent
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    P, _ = ds.split("test")
    worst = 0.0
    for j in rng.choice(len(P), 20, replace=False):
        cached = model.estimate_density(P[j]).log_prob
        direct = model.latent_log_prob(P[j], model.cache_.x)
        worst = max(worst, float(np.max(np.abs(cached - direct) / np.abs(direct))))
    runtime = fit_s + time.perf_counter() - start
    _detail(record_property, f"K={len(model.cache_)}, 20 conditions, max rel err {worst:.2e}, runtime {runtime:.0f}s")
    assert worst < 1e-6
    assert runtime < 60


# ---------------------------------------------------------------- 2


@pytest.mark.criterion(2, "trained 2-D density integrates to 1 +- 0.05 (200x200 grid, +-6 sigma)")
def test_c02_change_of_variables(latent, record_property):
    ds, model, fit_s = latent
    start = time.perf_counter()
    _, F = ds.split("train")
    x = F.reshape(len(F), -1)
    mu, sd = x.mean(0), x.std(0)
    axes = [np.linspace(m - 6 * s, m + 6 * s, 201) for m, s in zip(mu, sd)]
    centers = [0.5 * (a[1:] + a[:-1]) for a in axes]
    cell = np.prod([a[1] - a[0] for a in axes])
    grid = np.stack(np.meshgrid(*centers, indexing="ij"), -1).reshape(-1, 2)
    inv = flow_inverse(model.flow_, grid, model.cache_integrator)
    P, _ = ds.split("test")
    masses = [float(np.exp(gmm_log_prob(model.regress(P[j]), inv.endpoint) + inv.log_det_inv).sum() * cell)
              for j in range(5)]
    runtime = fit_s + time.perf_counter() - start
    _detail(record_property, f"masses {', '.join(f'{m:.4f}' for m in masses)}; runtime {runtime:.0f}s")
    assert all(abs(m - 1.0) <= 0.05 for m in masses)
    assert runtime < 300


# ---------------------------------------------------------------- 3


@pytest.mark.criterion(3, "linear field v=0.5z: endpoint z*e^0.5 and log_det_inv -1.0 (1e-6, rk4/64)")
def test_c03_closed_form_flow(record_property):
    z = np.random.default_rng(0).normal(size=(100, 2))
    res = flow_forward(LinearField(0.5, 2), z, IntegratorConfig("rk4", 64))
    end_err = float(np.max(np.abs(res.endpoint - z * np.exp(0.5))))
    det_err = float(np.max(np.abs(res.log_det_inv + 1.0)))
    _detail(record_property, f"endpoint err {end_err:.1e}, log-det err {det_err:.1e}")
    assert end_err < 1e-6 and det_err < 1e-6


# ---------------------------------------------------------------- 4


def _fd_on_coords(f, params, coords, h=1e-5):
    out = np.empty(len(coords))
    for i, k in enumerate(coords):
        old = params[k]
        params[k] = old + h
        fp = f()
        params[k] = old - h
        fm = f()
        params[k] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def _rel(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.mark.criterion(4, "CFM and joint-loss gradients match central differences (rel 1e-4, >=100 coords)")
def test_c04_gradients(record_property, monkeypatch):
    rng = np.random.default_rng(0)
    field = MlpField.create(3, hidden=(16, 16), rng=rng)
    field.params["w2"] = rng.normal(size=field.params["w2"].shape) * 0.5
    flow = Flow(field, np.array([0.1, -0.2, 0.3]), np.array([1.5, 0.7, 1.0]))
    head = GmmHead(2, 3, n_modes=4, hidden_size=6, rng=rng)
    cond = rng.normal(size=(16, 5, 2))
    x = rng.normal(size=(16, 3))
    t, z0 = rng.uniform(size=(16, 1)), rng.normal(size=(16, 3))

    # CFM
    field.params.zero_grad()
    backward(cfm_loss(field, x, rng, t=t, z0=z0))
    coords = rng.choice(field.params.params.size, 120, replace=False)
    fd = _fd_on_coords(lambda: cfm_loss(field, x, rng, t=t, z0=z0).item(), field.params.params, coords)
    err_cfm = float(np.max(_rel(field.params.grads[coords], fd)))

    # joint: the NLL term sees the inverse transform as a constant, so the
    # finite differences are taken with that output frozen
    cfg = TrainConfig(integrator=IntegratorConfig("rk4", 4))
    frozen = flow_inverse(flow, x, cfg.integrator, with_logdet=False)
    monkeypatch.setattr(fmtrain, "flow_inverse", lambda *a, **k: frozen)

    def value():
        return joint_loss(flow, head, cond, x, cfg, np.random.default_rng(3))[0].item()

    field.params.zero_grad()
    head.params.zero_grad()
    backward(joint_loss(flow, head, cond, x, cfg, np.random.default_rng(3))[0])
    c_head = rng.choice(head.params.params.size, 60, replace=False)
    c_field = rng.choice(field.params.params.size, 60, replace=False)
    fd_head = _fd_on_coords(value, head.params.params, c_head)
    fd_field = _fd_on_coords(value, field.params.params, c_field)
    err_joint = float(max(np.max(_rel(head.params.grads[c_head], fd_head)),
                          np.max(_rel(field.params.grads[c_field], fd_field))))
    _detail(record_property, f"CFM max rel err {err_cfm:.1e} (120 coords), joint {err_joint:.1e} (120 coords)")
    assert err_cfm < 1e-4 and err_joint < 1e-4


# ---------------------------------------------------------------- 5


@pytest.mark.criterion(5, "cached density over K=1e4 >= 20x faster than uncached flow at rk4/32 (median of 30)")
def test_c05_speedup(tmp_path, record_property):
    cfg = tmp_path / "bench.cfg"
    cfg.write_text(
        f"[data]\npath = {tmp_path}/data.cfdata\nn_train = 2000\nn_test = 10\n"
        "[model]\nhidden_width = 32\nrnn_hidden = 32\n[train]\nsteps = 200\nlr = 2e-3\n"
        "[bench]\nn_triplets = 10000\nrepeats = 30\nwarmup = 5\nscheme = rk4\nsteps = 32\n"
    )
    for cmd in ("gen-data", "train", "bench"):
        assert main([cmd, "--config", str(cfg), "--out", str(tmp_path), "--density-only"][: 5 + (cmd == "bench")]) == 0
    with open(tmp_path / "bench.csv") as f:
        report = {r["metric"]: r["value"] for r in csv.DictReader(f)}
    speedup = float(report["speedup"])
    _detail(record_property, f"cached {float(report['cached_ms']):.2f} ms, uncached {float(report['uncached_ms']):.0f} ms, "
                             f"speedup {speedup:.0f}x, K={report['n_triplets']}")
    assert int(report["n_triplets"]) == 10_000
    assert speedup >= 20


# ---------------------------------------------------------------- 6


@pytest.mark.criterion(6, "predicted f32 cache size for K=371188, d=8 is 24.07 MB within 2%")
def test_c06_cache_size(record_property):
    size = predicted_file_size(371188, 8, "f32")
    mb = size / 2**20
    _detail(record_property, f"{size} bytes = {mb:.4f} MiB, {(size - 62) / 371188:.0f} bytes/motion")
    assert (size - 62) / 371188 == 68
    assert abs(mb - 24.07) / 24.07 < 0.02


# ---------------------------------------------------------------- 7


@pytest.mark.criterion(7, "latent-GMM MM log-prob: model > KDE-50 and within 0.3 nats/dim of truth")
def test_c07_density_vs_kde(latent, record_property):
    ds, model, fit_s = latent
    start = time.perf_counter()
    P, F = ds.split("test")
    u = ds.meta["u"][ds.test_idx]
    truth = ds.meta["truth"]
    x = F.reshape(len(F), -1)
    mm = build_mmgt(P, threshold=choose_threshold(P))
    rng = np.random.default_rng(0)

    def kde_fn(j, members):
        samples = model.predict_indices(P[j], 50, "nn", rng).latents()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return kde_log_prob(fit_kde(samples), members)

    ours, _ = mm_log_prob_per_dim(lambda j, m: model.latent_log_prob(P[j], m), mm, x, 2)
    kde, _ = mm_log_prob_per_dim(kde_fn, mm, x, 2)
    true, _ = mm_log_prob_per_dim(lambda j, m: truth.log_prob(u[j], m), mm, x, 2)
    runtime = fit_s + time.perf_counter() - start
    _detail(record_property, f"model {ours:.3f}, KDE-50 {kde:.3f}, truth {true:.3f} nats/dim; runtime {runtime:.0f}s")
    assert ours > kde
    assert abs(ours - true) <= 0.3
    assert runtime < 600


# ---------------------------------------------------------------- 8


@pytest.mark.criterion(8, "joint model beats identically trained GMM-only on MM log-prob and best-of-50 ADE")
def test_c08_gmm_only_ordering(pendulum, record_property):
    ds, joint, gmm_only = pendulum
    P, F = ds.split("test")
    mm = build_mmgt(P, threshold=choose_threshold(P))
    scores = {}
    for name, model in (("joint", joint), ("gmm-only", gmm_only)):
        x = model.codec_.encode(F)
        lp, _ = mm_log_prob_per_dim(lambda j, m: model.latent_log_prob(P[j], m), mm, x, model.dim_)
        rng = np.random.default_rng(0)
        a = np.mean([ade(model.predict_indices(P[j], 50, "nn", rng).decode(model.codec_, model.future_shape_), F[j])
                     for j in range(len(P))])
        scores[name] = (lp, a)
    (lp_j, ade_j), (lp_g, ade_g) = scores["joint"], scores["gmm-only"]
    _detail(record_property, f"MM log-prob {lp_j:.3f} vs {lp_g:.3f}; ADE {ade_j:.4f} vs {ade_g:.4f}")
    assert lp_j > lp_g
    assert ade_j < ade_g


# ---------------------------------------------------------------- 9


@pytest.mark.criterion(9, "ADE: NN <= most-likely <= random; most-likely APD < NN APD (3 seeds)")
def test_c09_sampling_ablation(pendulum, record_property):
    ds, model, _ = pendulum
    P, F = ds.split("test")
    conds = np.arange(len(P))
    res = {s: {"ade": [], "apd": []} for s in ("nn", "most_likely", "random")}
    for seed in range(3):
        rng = np.random.default_rng(seed)
        for s in res:
            for j in conds:
                pred = model.predict_indices(P[j], 50, s, rng).decode(model.codec_, model.future_shape_)
                res[s]["ade"].append(ade(pred, F[j]))
                res[s]["apd"].append(apd(pred))
    m = {s: (np.mean(v["ade"]), np.mean(v["apd"])) for s, v in res.items()}
    _detail(record_property, f"{len(conds)} conditions x 3 seeds; ADE nn {m['nn'][0]:.4f}, ml {m['most_likely'][0]:.4f}, "
                             f"random {m['random'][0]:.4f}; APD nn {m['nn'][1]:.3f}, ml {m['most_likely'][1]:.3f}")
    assert m["nn"][0] <= m["most_likely"][0] <= m["random"][0]
    assert m["most_likely"][1] < m["nn"][1]


# ---------------------------------------------------------------- 10


@pytest.mark.criterion(10, "APD/ADE/FDE/MMADE/MMFDE hand examples exact to 1e-12")
def test_c10_metric_hand_examples(record_property):
    two = np.array([[[[0.0, 0.0, 0.0]]], [[[3.0, 4.0, 0.0]]]])
    gt = np.zeros((2, 1, 3))
    pred = np.array([[[[1.0, 0.0, 0.0]], [[0.0, 2.0, 0.0]]]])
    g2 = np.array([[[1.0, 0.0, 0.0]], [[0.0, 2.0, 4.0]]])
    checks = {
        "APD": (apd(two), 5.0),
        "ADE": (ade(pred, gt), 1.5),
        "FDE": (fde(pred, gt), 2.0),
        "MMADE": (mmade(pred, [gt, g2]), 1.75),
        "MMFDE": (mmfde(pred, [gt, g2]), 3.0),
    }
    worst = max(abs(a - b) for a, b in checks.values())
    _detail(record_property, f"max abs err {worst:.1e}")
    assert worst <= 1e-12


# ---------------------------------------------------------------- 11


@pytest.mark.criterion(11, "Scott factor 100^(-1/6); Gaussian KDE mean log-prob within 0.1 of analytic at n=1e4")
def test_c11_kde_oracle(record_property):
    h = scott_factor(100, 2)
    rng = np.random.default_rng(0)
    model = fit_kde(rng.normal(size=(10_000, 2)))
    fresh = rng.normal(size=(2000, 2))
    est = float(kde_log_prob(model, fresh).mean())
    analytic = -np.log(2 * np.pi) - 1.0
    _detail(record_property, f"h={h:.5f}; KDE {est:.4f} vs analytic {analytic:.4f}")
    assert h == pytest.approx(100 ** (-1 / 6), abs=1e-12)
    assert abs(h - 0.46416) < 1e-5
    assert abs(est - analytic) < 0.1


# ---------------------------------------------------------------- 12


@pytest.mark.criterion(12, "density estimation performs zero flow evaluations")
def test_c12_no_flow_calls(latent, record_property, monkeypatch):
    ds, model, _ = latent
    calls = {"n": 0}
    for name in ("flow_forward", "flow_inverse", "integrate"):
        if hasattr(cnf, name):
            real = getattr(cnf, name)

            def spy(*a, _real=real, **k):
                calls["n"] += 1
                return _real(*a, **k)

            monkeypatch.setattr(cnf, name, spy)
    before = (model.flow_.n_evals, model.flow_.field.n_evals)
    P, _ = ds.split("test")
    rng = np.random.default_rng(0)
    for j in range(50):
        model.estimate_density(P[j])
        model.predict_indices(P[j], 10, "nn", rng)
        model.predict_indices(P[j], 10, "most_likely", rng)
    field_evals = model.flow_.field.n_evals - before[1]
    flow_evals = model.flow_.n_evals - before[0]
    _detail(record_property, f"50 conditions: field evals {field_evals}, flow evals {flow_evals}, ODE calls {calls['n']}")
    assert field_evals == 0 and flow_evals == 0 and calls["n"] == 0
