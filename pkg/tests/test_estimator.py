import numpy as np
import pytest
from sklearn.base import clone

from cacheflow import CacheFlow
from cacheflow.datasets import BenchmarkSpec, generate
from cacheflow.errors import DimensionError
from cacheflow.evaluation import COLUMNS, evaluate

SMALL = dict(latent_dim=2, n_modes=4, hidden_width=32, rnn_hidden=16, batch_size=64, lr=3e-3, cache_steps=8, codec="identity")


def _latent(n_train=600, n_test=40, **kw):
    spec = BenchmarkSpec(generator="latent_gmm", n_train=n_train, n_test=n_test, noise=0.3, n_modes=3, **kw)
    return generate(spec)


@pytest.fixture(scope="module")
def latent_ds():
    return _latent()


@pytest.fixture(scope="module")
def fitted(latent_ds):
    P, F = latent_ds.split("train")
    return CacheFlow(steps=300, **SMALL).fit(P, F)


def test_fit_is_bit_deterministic(latent_ds):
    P, F = latent_ds.split("train")
    a = CacheFlow(steps=40, **SMALL).fit(P, F)
    b = CacheFlow(steps=40, **SMALL).fit(P, F)
    assert a.fingerprint_ == b.fingerprint_
    assert a.head_.params.params.tobytes() == b.head_.params.params.tobytes()
    c = CacheFlow(steps=40, random_state=1, **SMALL).fit(P, F)
    assert c.fingerprint_ != a.fingerprint_


def test_sklearn_params_and_clone(fitted):
    params = fitted.get_params()
    assert params["n_modes"] == 4 and params["latent_dim"] == 2
    fresh = clone(fitted)
    assert not hasattr(fresh, "flow_")
    assert fresh.get_params() == params


def test_cache_equivalence_after_fit(fitted, latent_ds):
    P, _ = latent_ds.split("test")
    for past in P[:5]:
        cached = fitted.estimate_density(past).log_prob
        direct = fitted.latent_log_prob(past, fitted.cache_.x)
        assert np.max(np.abs(cached - direct) / np.abs(direct)) < 1e-6


def test_save_load_round_trip(fitted, latent_ds, tmp_path):
    fitted.save(tmp_path / "m")
    back = CacheFlow.load(tmp_path / "m")
    assert back.fingerprint_ == fitted.fingerprint_
    P, F = latent_ds.split("test")
    np.testing.assert_array_equal(back.estimate_density(P[0]).log_prob, fitted.estimate_density(P[0]).log_prob)
    np.testing.assert_array_equal(back.score_samples(P[:5], F[:5]), fitted.score_samples(P[:5], F[:5]))
    assert back.config_hash() == fitted.config_hash()


def test_predict_strategies(fitted, latent_ds):
    P, _ = latent_ds.split("test")
    rng = np.random.default_rng(0)
    out = fitted.predict(P[:3], n=7, strategy="nn", rng=rng)
    assert out.shape == (3, 7, 1, 1, 2)
    ml = fitted.predict_indices(P[0], 5, "most_likely")
    assert ml.indices[0] == fitted.estimate_density(P[0]).argmax
    full = fitted.predict_indices(P[0], len(fitted.cache_), "random", rng)
    assert sorted(full.indices.tolist()) == list(range(len(fitted.cache_)))
    with pytest.raises(ValueError):
        fitted.predict_indices(P[0], 3, "best")


def test_input_validation(fitted, latent_ds):
    P, F = latent_ds.split("train")
    with pytest.raises(DimensionError):
        fitted.regress(np.zeros((10, 1, 4)))
    with pytest.raises(ValueError):
        CacheFlow(**SMALL).fit(P[:10], F[:9])
    bad = P[:20].copy()
    bad[3, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        CacheFlow(steps=1, **SMALL).fit(bad, F[:20])


def test_trained_head_separates_conditions(fitted):
    # total variation between the regressed base mixtures for two distant conditions
    a = fitted.regress(np.repeat([[[[-0.9, -0.9, 0.81]]]], 10, axis=1)[0])
    b = fitted.regress(np.repeat([[[[0.9, -0.9, -0.81]]]], 10, axis=1)[0])
    from cacheflow.basedensity import gmm_log_prob

    g = np.linspace(-8, 8, 321)
    grid = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    pa, pb = np.exp(gmm_log_prob(a, grid)), np.exp(gmm_log_prob(b, grid))
    tv = 0.5 * np.abs(pa - pb).sum() * (g[1] - g[0]) ** 2
    assert tv > 0.1


def _kl_to_truth(model, ds, n_cond=20, n_samples=200):
    truth, u = ds.meta["truth"], ds.meta["u"]
    P, _ = ds.split("test")
    u_test = u[ds.test_idx]
    rng = np.random.default_rng(7)
    vals = []
    for j in range(n_cond):
        x = truth.sample(np.repeat(u_test[j : j + 1], n_samples, 0), rng)
        vals.append(np.mean(truth.log_prob(u_test[j], x) - model.latent_log_prob(P[j], x)))
    return float(np.mean(vals))


def test_kl_to_truth_decreases_with_training(latent_ds):
    P, F = latent_ds.split("train")
    kls = [_kl_to_truth(CacheFlow(steps=s, **SMALL).fit(P, F, with_cache=False), latent_ds) for s in (20, 400)]
    assert kls[1] < kls[0]
    assert kls[1] >= -0.05  # KL is nonnegative up to Monte-Carlo error


def test_evaluate_reports_all_methods(fitted, latent_ds):
    P, F = latent_ds.split("train")
    gmm = CacheFlow(steps=50, use_flow=False, **SMALL).fit(P, F)
    Pt, Ft = latent_ds.split("test")
    res = evaluate({"cacheflow": fitted, "gmm-only": gmm}, Pt, Ft, ["cacheflow", "gmm-only", "kde", "random", "most-likely"], n=10, n_conditions=8)
    assert [r.method for r in res] == ["cacheflow", "gmm-only", "kde", "random", "most-likely"]
    for r in res:
        assert list(r.row()) == list(COLUMNS)
        assert r.ADE >= 0 and r.APD >= 0
    assert np.isnan(res[3].MMLogProb)
    assert np.isfinite(res[0].MMLogProb) and np.isfinite(res[2].MMLogProb)


def test_gmm_only_has_no_field(latent_ds):
    P, F = latent_ds.split("train")
    m = CacheFlow(steps=5, use_flow=False, **SMALL).fit(P, F)
    assert m.flow_.field is None and m.flow_.n_evals == 0
