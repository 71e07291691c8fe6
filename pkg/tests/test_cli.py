import csv
import json
import time

import pytest

from cacheflow.cli import main
from cacheflow.config import ConfigError, config_hash, defaults, parse_config

TINY = """
[data]
path = {out}/data.cfdata
n_train = 60
n_test = 10

[model]
n_modes = 3
hidden_width = 16
rnn_hidden = 8

[train]
steps = {steps}

[cache]
steps = 4

[predict]
n = {n}
strategy = {strategy}

[eval]
n_samples = 5
n_conditions = 4

[bench]
n_triplets = 120
repeats = 3
warmup = 1
steps = 4
"""


def _config(tmp_path, steps=20, n=5, strategy="nn", extra=""):
    path = tmp_path / "run.cfg"
    path.write_text(TINY.format(out=tmp_path, steps=steps, n=n, strategy=strategy) + extra)
    return str(path)


def _run(cfg, out, *cmds):
    for cmd in cmds:
        args = cmd.split()
        code = main([args[0], "--config", cfg, "--out", str(out), *args[1:]])
        if code:
            return code
    return 0


def test_pipeline_end_to_end(tmp_path):
    cfg = _config(tmp_path)
    assert _run(cfg, tmp_path, "gen-data", "train", "cache", "predict", "eval --methods cacheflow,random", "bench") == 0
    for name in ("data.cfdata", "split.txt", "loss.csv", "model/model.cfparam", "model/cache.cfcache",
                 "predictions.csv", "predictions.cfdata", "metrics.csv", "bench.csv"):
        assert (tmp_path / name).exists(), name
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["method"] for r in rows] == ["cacheflow", "random"]
    hashes = {json.loads((tmp_path / f"{c}.json").read_text())["config_hash"] for c in ("train", "cache", "predict", "eval", "bench")}
    assert len(hashes) == 1


def test_train_twice_identical_checkpoints(tmp_path):
    cfg = _config(tmp_path)
    assert _run(cfg, tmp_path, "gen-data") == 0
    blobs = []
    for out in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / out), "--seed", "0"]) == 0
        blobs.append((tmp_path / out / "model" / "model.cfparam").read_bytes())
    assert blobs[0] == blobs[1]
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()


def test_missing_dataset_path_exits_2(tmp_path, capsys):
    path = tmp_path / "c.cfg"
    path.write_text("[train]\nsteps = 1\n")
    assert main(["train", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "data.path" in capsys.readouterr().err


def test_dataset_file_missing_exits_2(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "data.path" in capsys.readouterr().err


def test_eval_without_methods_is_usage_error(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert _run(cfg, tmp_path, "gen-data") == 0
    assert main(["eval", "--config", cfg, "--out", str(tmp_path), "--methods", ""]) == 2
    assert "no methods" in capsys.readouterr().err
    assert main(["eval", "--config", cfg, "--out", str(tmp_path), "--methods", "magic"]) == 2


def test_missing_artifact_exits_3(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert _run(cfg, tmp_path, "gen-data") == 0
    assert main(["predict", "--config", cfg, "--out", str(tmp_path)]) == 3
    assert "train" in capsys.readouterr().err


def test_predict_random_n_equals_k_enumerates_cache(tmp_path):
    cfg = _config(tmp_path, n=60, strategy="random")
    assert _run(cfg, tmp_path, "gen-data", "train", "cache", "predict") == 0
    with open(tmp_path / "predictions.csv") as f:
        rows = list(csv.DictReader(f))
    first = sorted(int(r["cache_index"]) for r in rows if r["condition_id"] == "0")
    assert first == list(range(60))


def test_bench_schema_stable(tmp_path):
    cfg = _config(tmp_path)
    assert _run(cfg, tmp_path, "gen-data", "train") == 0
    keys = []
    for flag in ("bench", "bench --density-only"):
        assert _run(cfg, tmp_path, flag) == 0
        with open(tmp_path / "bench.csv") as f:
            keys.append([r["metric"] for r in csv.DictReader(f)])
    assert keys[0] == keys[1]
    assert {"cached_ms", "uncached_ms", "speedup", "cache_build_s"} <= set(keys[0])


def test_bad_config_reports_line(tmp_path, capsys):
    path = tmp_path / "c.cfg"
    path.write_text("[model]\nn_modes = 3\nwidth = 9\n")
    assert main(["train", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert ":3:" in capsys.readouterr().err


def test_config_parsing():
    cfg = parse_config("[model]\nn_modes = 7\n[eval]\nmethods = kde, random\n")
    assert cfg["model"]["n_modes"] == 7
    assert cfg["model"]["latent_dim"] == 8 and cfg["train"]["lr"] == 5e-4 and cfg["train"]["batch_size"] == 64
    assert cfg["eval"]["methods"] == ("kde", "random")
    with pytest.raises(ConfigError, match=":2:.*bad value"):
        parse_config("[model]\nn_modes = many\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[nope]\na = 1\n")
    assert config_hash(defaults()) == config_hash(defaults())
    assert config_hash(cfg) != config_hash(defaults())


def test_cf_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CF_THREADS", "1")
    cfg = _config(tmp_path)
    assert _run(cfg, tmp_path, "gen-data") == 0


def test_smoke_training_budget(tmp_path):
    # 500-step smoke training measured once at about 6 s on a single laptop core; asserted with 3x slack
    cfg = tmp_path / "smoke.cfg"
    cfg.write_text(
        f"[data]\npath = {tmp_path}/data.cfdata\nn_train = 500\nn_test = 50\n"
        "[model]\nn_modes = 8\nhidden_width = 64\nrnn_hidden = 32\n[train]\nsteps = 500\nlr = 2e-3\n"
    )
    assert _run(str(cfg), tmp_path, "gen-data") == 0
    start = time.perf_counter()
    assert _run(str(cfg), tmp_path, "train") == 0
    assert time.perf_counter() - start < 3 * 6.0
