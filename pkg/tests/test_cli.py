import json
import subprocess
import sys

import numpy as np
import pytest

from decamel.cli import main
from decamel.dataset import load_dataset
from decamel.pipeline import load_model

FAST = ["--clusters", "10", "--iterations", "100", "--lr-decay-step", "50", "--batch-size", "32"]


@pytest.fixture
def data(tmp_path):
    p = tmp_path / "d.csv"
    assert main(["generate", "--seed", "3", "--out", str(p)]) == 0
    return p


def test_generate_rows(data):
    assert len(data.read_text().splitlines()) == 20 * 2 * 4 + 1


def test_generate_deterministic(tmp_path, data):
    p = tmp_path / "again.csv"
    main(["generate", "--seed", "3", "--out", str(p)])
    assert p.read_bytes() == data.read_bytes()


def test_distortion_sweep_means(tmp_path):
    means = []
    for s in ("0", "0.8"):
        p = tmp_path / f"d{s}.csv"
        main(["generate", "--seed", "1", "--distortion", s, "--identities", "200", "--out", str(p)])
        ds = load_dataset(p)
        means.append([ds.X[ds.views == v].mean(0) for v in (1, 2)])
    # only view 2 is distorted; identity noise leaves a small common gap
    gap0 = np.linalg.norm(means[0][0] - means[0][1])
    gap8 = np.linalg.norm(means[1][0] - means[1][1])
    np.testing.assert_array_equal(means[0][0], means[1][0])
    assert gap8 > 3 * gap0


def test_train_eval_export(tmp_path, data):
    model = tmp_path / "m.json"
    assert main(["train", "--seed", "1", "--data", str(data), "--out", str(model), "--split-fraction", "0.5"] + FAST) == 0
    trace = model.with_suffix(".trace.csv").read_text().splitlines()
    assert trace[0] == "step,loss" and len(trace) == 101
    reports = []
    for name in ("a.json", "b.json"):
        out = tmp_path / name
        assert main(["eval", "--seed", "1", "--data", str(data), "--model", str(model),
                     "--split-fraction", "0.5", "--out", str(out)]) == 0
        reports.append(out.read_bytes())
    assert reports[0] == reports[1]
    rep = json.loads(reports[0])
    assert 0 <= rep["rank1"] <= 1 and 0 <= rep["mAP"] <= 1 and rep["s_value"] > 0
    assert len(rep["cmc"]) == 20
    proj = tmp_path / "p.csv"
    assert main(["export-projection", "--seed", "1", "--data", str(data), "--model", str(model), "--out", str(proj)]) == 0
    assert len(proj.read_text().splitlines()) == 161


def test_zero_iterations_model_is_camel(tmp_path, data):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["train", "--seed", "1", "--data", str(data), "--out", str(a), "--clusters", "10", "--iterations", "0"])
    main(["train", "--seed", "1", "--data", str(data), "--out", str(b), "--clusters", "10", "--iterations", "0",
          "--learning-rate", "0.5"])
    assert load_model(a).metric.same_as(load_model(b).metric)


def test_f1_defaults_fast(tmp_path):
    import time
    from pathlib import Path

    f1 = Path(__file__).parent / "fixtures" / "f1.csv"
    t0 = time.perf_counter()
    assert main(["train", "--seed", "0", "--data", str(f1), "--out", str(tmp_path / "m.json")]) == 0
    assert time.perf_counter() - t0 < 10


def test_asymmetric_s_above_symmetric(tmp_path, data):
    s = {}
    for name, extra in (("asym", []), ("sym", ["--symmetric"])):
        model, out = tmp_path / f"{name}.json", tmp_path / f"{name}.rep"
        main(["train", "--seed", "0", "--data", str(data), "--out", str(model), "--clusters", "20", "--iterations", "0"] + extra)
        main(["eval", "--seed", "0", "--data", str(data), "--model", str(model), "--out", str(out)])
        s[name] = json.loads(out.read_text())["s_value"]
    assert s["asym"] > s["sym"]


def test_missing_seed(tmp_path, data):
    assert main(["generate", "--out", str(tmp_path / "x.csv")]) == 2


def test_conflict_writes_nothing(tmp_path, data):
    out = tmp_path / "m.json"
    code = main(["train", "--seed", "1", "--data", str(data), "--out", str(out), "--symmetric", "--view-clusters", "2"])
    assert code == 2 and not out.exists()


def test_divergence_exit_code(tmp_path, data):
    code = main(["train", "--seed", "1", "--data", str(data), "--out", str(tmp_path / "m.json"),
                 "--init", "random", "--learning-rate", "5"] + FAST)
    assert code == 3


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[global]\nseed = 5\n\n[generate]\nidentities = 3\nviews = 3\n")
    out = tmp_path / "d.csv"
    assert main(["generate", "--config", str(cfg), "--views", "2", "--out", str(out)]) == 0
    ds = load_dataset(out)
    assert np.unique(ds.identities).size == 3 and ds.num_views == 2


def test_bad_data_file(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("view,identity,f1\n1,0,oops\n")
    assert main(["train", "--seed", "1", "--data", str(bad), "--out", str(tmp_path / "m.json")]) == 2


def test_unseen_views_eval(tmp_path):
    data, model, rep = tmp_path / "d.csv", tmp_path / "m.json", tmp_path / "r.json"
    main(["generate", "--seed", "2", "--views", "4", "--view-groups", "2", "--identities", "8", "--out", str(data)])
    assert main(["train", "--seed", "2", "--data", str(data), "--out", str(model), "--view-clusters", "2",
                 "--exclude-views", "4"] + FAST) == 0
    assert main(["eval", "--seed", "2", "--data", str(data), "--model", str(model), "--unseen-views", "4",
                 "--out", str(rep)]) == 0
    assert json.loads(rep.read_text())["protocol"]["probe_views"] == [4]
    assert main(["eval", "--seed", "2", "--data", str(data), "--model", str(model), "--unseen-views", "1"]) == 2


def test_module_entry_point(tmp_path):
    out = tmp_path / "d.csv"
    res = subprocess.run([sys.executable, "-m", "decamel", "generate", "--seed", "1", "--out", str(out)])
    assert res.returncode == 0 and out.exists()
