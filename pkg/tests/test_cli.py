import csv
import json

import numpy as np
import pytest

from fena import cli, dataset as D, presets, sfne
from fena.errors import ConfigError, NumericError


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, models = root / "data", root / "models"
    data.mkdir()
    models.mkdir()
    assert run("gen-data", "--preset", "desk-case2", "--count", 8, "--ensemble", 2, "--out", data) == 0
    assert run("train", "--preset", "desk-case2", "--ensemble", 2, "--epochs", 2, "--data", data,
               "--out", models) == 0
    return data, models


def test_gen_data_layout_and_config(workdir):
    data, _ = workdir
    assert sorted(p.name for p in data.iterdir()) == ["config.json", "m0", "m1"]
    cfg = json.loads((data / "config.json").read_text())
    assert cfg["preset"]["sources"] == 8 and cfg["members"] == 2 and cfg["seed"] == 0
    tr, te = D.load(data / "m0" / "train"), D.load(data / "m0" / "test")
    assert len(tr) + len(te) == 8 * 4
    assert not set(tr.source) & set(te.source)


def test_gen_data_is_deterministic(tmp_path, workdir):
    data, _ = workdir
    assert run("gen-data", "--preset", "desk-case2", "--count", 8, "--ensemble", 1, "--out", tmp_path) == 0
    a, b = D.load(data / "m0" / "train"), D.load(tmp_path / "m0" / "train")
    for name in D.ARRAYS:
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_members_draw_different_sources(workdir):
    data, _ = workdir
    a, b = D.load(data / "m0" / "train"), D.load(data / "m1" / "train")
    assert not np.array_equal(a.params, b.params)


def test_train_outputs(workdir):
    _, models = workdir
    for j in range(2):
        res, meta = sfne.load_checkpoint(models / f"model_{j}.ckpt")
        assert res.epochs_done == 2 and meta["config"]["seed"] == j
        assert np.isfinite(float(meta["extra"]["final_train_loss"]))
        rows = list(csv.reader(open(models / f"curves_{j}.csv")))
        assert rows[0] == ["epoch", "train_loss", "test_loss", "lr"] and len(rows) == 3


def test_resume_matches_uninterrupted(tmp_path, workdir):
    data, _ = workdir
    full, part = tmp_path / "full", tmp_path / "part"
    full.mkdir()
    part.mkdir()
    args = ("--preset", "desk-case2", "--ensemble", 1, "--epochs", 3, "--data", data)
    assert run("train", *args, "--out", full) == 0
    assert run("train", *args, "--out", part, "--epoch-limit", 2) == 0
    assert run("train", *args, "--out", part, "--resume", part / "model_0.ckpt") == 0
    a, _ = sfne.load_checkpoint(full / "model_0.ckpt")
    b, _ = sfne.load_checkpoint(part / "model_0.ckpt")
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=n)
    assert a.curves.train_loss == b.curves.train_loss


def test_eval_report(workdir, tmp_path):
    data, models = workdir
    assert run("eval", "--preset", "desk-case2", "--data", data, "--models", models, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "eval.json").read_text())
    assert rep["k"] == 2 and rep["test_er"] > 0 and 1 <= rep["t_c"] <= 99
    assert rep["reference"] == cli.REFERENCE_ROWS["2"]
    rows = list(csv.reader(open(tmp_path / "profile.csv")))
    assert rows[0] == ["step", "test_er"] and len(rows) == 101
    float(rows[1][1])


def test_simulate_outputs(workdir, tmp_path):
    data, models = workdir
    assert run("simulate", "--preset", "desk-case2", "--data", data, "--models", models, "--horizon", 130,
               "--t-c", 60, "--out", tmp_path) == 0
    meta = json.loads((tmp_path / "long_run.csv.json").read_text())
    assert meta["segments"] == [[0, 60], [60, 60], [120, 10]] and meta["k"] == 2
    assert len(meta["segment_errors"]) == 3 and meta["error"] > 0
    lines = (tmp_path / "long_run.csv").read_text().splitlines()
    assert len(lines) == 1 + 130 * 51
    assert [float(v) for v in lines[-1].split(",")][:3] == [130, 0.13, 1.0]
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["t_c"] == 60 and 0 <= cfg["t_s"] <= 400


def test_simulate_needs_windowed_preset(workdir, tmp_path):
    _, models = workdir
    assert run("simulate", "--preset", "desk-case1", "--models", models, "--out", tmp_path) == cli.EXIT_CONFIG


def test_bench_csv(workdir, tmp_path):
    _, models = workdir
    assert run("bench", "--preset", "desk-case2", "--models", models, "--samples", 2, "--out", tmp_path) == 0
    rows = list(csv.reader(open(tmp_path / "bench.csv")))
    assert rows[0] == ["case", "oracle_ms", "sfne_ms", "speedup"]
    case, o, s, x = rows[1]
    assert case == "2" and float(x) == pytest.approx(float(o) / float(s), rel=1e-4)


def test_exit_codes(tmp_path, monkeypatch):
    assert run("gen-data", "--preset", "nope", "--out", tmp_path) == cli.EXIT_CONFIG
    assert run("gen-data", "--preset", "desk-case1", "--out", tmp_path / "absent") == cli.EXIT_IO
    assert run("train", "--preset", "desk-case1", "--data", tmp_path, "--out", tmp_path) == cli.EXIT_IO
    assert run("gen-data", "--preset", "desk-case1", "--count", 1, "--out", tmp_path) == cli.EXIT_CONFIG
    assert run("frobnicate") == cli.EXIT_CONFIG

    def boom(*a, **k):
        raise NumericError("non-finite training loss at epoch 0, batch 0")

    monkeypatch.setattr(sfne, "train", boom)
    (tmp_path / "m0").mkdir()
    tiny = D.generate(1, 2, n_steps=100)
    D.save(D.zero_ic_view(tiny), tmp_path / "m0" / "train")
    D.save(D.zero_ic_view(tiny), tmp_path / "m0" / "test")
    assert run("train", "--preset", "desk-case1", "--data", tmp_path, "--out", tmp_path) == cli.EXIT_NUMERIC


def test_failed_generation_leaves_no_files(tmp_path, monkeypatch):
    real = presets.member_data

    def flaky(p, seed, member, jobs=1):
        if member == 1:
            raise OSError("disk full")
        return real(p, seed, member, jobs)

    monkeypatch.setattr(presets, "member_data", flaky)
    assert run("gen-data", "--preset", "desk-case2", "--count", 4, "--ensemble", 2, "--out", tmp_path) == 4
    assert list(tmp_path.iterdir()) == []


def test_env_default_directory(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.DATA_ENV, str(tmp_path))
    (tmp_path / "data").mkdir()
    assert run("gen-data", "--preset", "desk-case1", "--count", 4) == 0
    assert (tmp_path / "data" / "m0" / "train").exists()


# -- presets --------------------------------------------------------------------------

def test_preset_sizes():
    assert presets.get("paper-case1").records == 60_000
    assert presets.get("paper-ondemand").records == 60_000 * 51
    assert presets.get("desk-case1").records == 2_000
    assert presets.get("desk-case4").records == 500
    p = presets.get("desk-case1")
    assert p.arch.cells == 25 and p.train.epochs == 200 and p.arch.output_width == 51
    assert presets.get("desk-case2").ensemble == 3 and presets.get("desk-case2").horizon == 1000
    assert presets.get("desk-case4").arch.static_encoder == "cnn"


def test_preset_overrides_and_errors():
    p = presets.get("desk-case2").with_overrides(epochs=5, lr=3e-4, ensemble=1, sources=10)
    assert (p.train.epochs, p.train.lr, p.ensemble, p.sources) == (5, 3e-4, 1, 10)
    assert presets.get("desk-case2").train.epochs != 5
    with pytest.raises(ConfigError):
        presets.get("case9")
    with pytest.raises(ConfigError):
        p.with_overrides(ensemble=0)
    json.dumps(p.to_json())


def test_member_seeds_distinct():
    seeds = {presets.member_seed(s, m) for s in range(3) for m in range(3)}
    assert len(seeds) == 9


def test_member_data_splits_by_source():
    p = presets.get("desk-case5").with_overrides(sources=6)
    tr, te = presets.member_data(p, 0, 0)
    assert len(tr) + len(te) == 12 and not set(tr.source) & set(te.source)
    assert tr.in_static.shape[1:] == (4, 101) and tr.out.shape[1:] == (100, 202)


def test_ondemand_member_data():
    p = presets.get("desk-ondemand").with_overrides(sources=4)
    tr, te = presets.member_data(p, 0, 0)
    assert len(tr) + len(te) == 4 * 51 and tr.in_static.shape[1:] == (3, 51) and tr.out.shape[2] == 2
