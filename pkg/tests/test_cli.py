import csv
import json

import numpy as np
import pytest

from mgprnn.cli import main
from mgprnn.data import read_cohort, save_cohort
from mgprnn.training import Model, TrainConfig, init_model

from test_training import separable_cohort

TOY_SYNTHETIC = {"M": 2, "B": 1, "P": 1, "num_encounters": 150, "mean_los": 6, "los_sd": 2, "max_los": 12,
                 "intensities": [1.0, 1.0], "missing_prob": [0.0, 0.0], "task_cov": [[1.0, 0.5], [0.5, 1.0]],
                 "noise_vars": [0.1, 0.1], "length_scale": 4.0, "link_coef": [1.0, 0.0],
                 "link_mode": "threshold", "link_window": 3, "seed": 5}
TOY_TRAIN = {"hidden_size": 4, "num_layers": 1, "max_epochs": 2, "minibatch_size": 20, "mc_samples_train": 2,
             "mc_samples_test": 3, "krylov_k": 6, "learning_rate": 0.01, "log_wall_time": False, "seed": 1}


def write_config(d, **kw):
    cfg = {"cohort": "cohort.jsonl", "out_dir": ".", "synthetic": TOY_SYNTHETIC, "train": TOY_TRAIN}
    cfg.update(kw)
    path = d / "run.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def run_all(d, capsys=None):
    cfg = write_config(d)
    for cmd in ("simulate", "train", "evaluate"):
        assert main([cmd, "--config", cfg]) == 0, cmd
    return d


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    return run_all(tmp_path_factory.mktemp("run_a"))


def test_simulate_writes_cohort_and_summary(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["simulate", "--config", cfg]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    lines = (tmp_path / "cohort.jsonl").read_text().splitlines()
    assert len(lines) == 150 == summary["n"]
    labels = [json.loads(x)["label"] for x in lines]
    assert summary["n_positive"] == sum(labels)
    assert summary["prevalence"] == sum(labels) / 150
    obs = [sum(1 for o in json.loads(x)["obs"] if o[1] == m) for m in (0, 1) for x in lines]
    assert summary["obs_per_variable"] == [sum(obs[:150]), sum(obs[150:])]
    assert (tmp_path / "manifest.json").exists()
    resolved = json.loads((tmp_path / "resolved_config.json").read_text())
    assert resolved["train"]["learning_rate"] == 0.01 and resolved["synthetic"]["seed"] == 5


def test_pipeline_outputs(toy_run):
    log = [json.loads(x) for x in (toy_run / "train_log.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in log] == [1, 2]
    rows = list(csv.DictReader(open(toy_run / "sweep.csv")))
    assert [int(r["horizon_hours"]) for r in rows] == list(range(13))
    excl = [int(rows[0]["n_encounters"]) - int(r["n_encounters"]) for r in rows]
    assert excl == sorted(excl)
    for r in rows:
        for col in ("auroc", "aupr", "precision_at_085"):
            assert r[col] == "" or 0.0 <= float(r[col]) <= 1.0


def test_pipeline_is_byte_reproducible(toy_run, tmp_path):
    other = run_all(tmp_path)
    for name in ("cohort.jsonl", "manifest.json", "checkpoint.json", "train_log.jsonl", "sweep.csv"):
        assert (toy_run / name).read_bytes() == (other / name).read_bytes(), name


def test_seed_flag_changes_cohort(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["simulate", "--config", cfg, "--seed", "9", "--out", str(tmp_path / "s9")]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "s5")]) == 0
    assert (tmp_path / "s9" / "cohort.jsonl").read_bytes() != (tmp_path / "s5" / "cohort.jsonl").read_bytes()


def test_score_writes_one_row_per_test_encounter(toy_run):
    cfg = str(toy_run / "run.json")
    assert main(["score", "--config", cfg]) == 0
    rows = list(csv.DictReader(open(toy_run / "scores.csv")))
    sweep = list(csv.DictReader(open(toy_run / "sweep.csv")))
    assert len(rows) == int(sweep[0]["n_encounters"])
    assert all(0.0 < float(r["score"]) < 1.0 for r in rows)


def test_zero_learning_rate_checkpoint_equals_init(tmp_path):
    cfg = write_config(tmp_path, train={**TOY_TRAIN, "learning_rate": 0.0, "max_epochs": 1})
    assert main(["simulate", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    model, meta = Model.load(tmp_path / "checkpoint.json")
    init = init_model(TrainConfig.from_dict(meta["train_config"]), 2, 1, 1)
    assert set(model.tensors) == set(init.tensors)
    for k, v in init.tensors.items():
        np.testing.assert_array_equal(model.tensors[k], v)


def test_separable_cohort_trains_to_high_auroc(tmp_path):
    save_cohort(tmp_path / "cohort.jsonl", separable_cohort(80, 21))
    train = {**TOY_TRAIN, "hidden_size": 8, "max_epochs": 3, "learning_rate": 0.02, "minibatch_size": 16}
    cfg = write_config(tmp_path, train=train)
    assert main(["train", "--config", cfg]) == 0
    log = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert log[-1]["valid_auroc"] >= 0.95


def test_variant_flag(tmp_path):
    cfg = write_config(tmp_path, train={**TOY_TRAIN, "max_epochs": 1})
    assert main(["simulate", "--config", cfg]) == 0
    assert main(["train", "--config", cfg, "--variant", "raw-rnn"]) == 0
    model, _ = Model.load(tmp_path / "checkpoint.json")
    assert model.variant == "raw-rnn"
    assert main(["evaluate", "--config", cfg, "--horizons", "0,6"]) == 0
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 3


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rat": 0.1}}))
    assert main(["train", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"trian": {}}))
    assert main(["train", "--config", str(bad)]) == 2
    assert "unknown" in capsys.readouterr().err
    cfg = write_config(tmp_path)
    assert main(["train", "--config", cfg]) == 3      # no cohort yet
    assert main(["evaluate", "--config", cfg]) == 3   # no checkpoint
    (tmp_path / "cohort.jsonl").write_text("{broken\n")
    assert main(["train", "--config", cfg]) == 3
    weak = write_config(tmp_path, synthetic={**TOY_SYNTHETIC, "link_coef": [0.0, 0.0]})
    assert main(["simulate", "--config", weak]) == 2


def test_bench_guard_and_accuracy(tmp_path, capsys):
    cfg = write_config(tmp_path, bench={"sizes": [50, 400], "ks": [8, 50], "dense_cap": 100})
    assert main(["bench", "--config", cfg, "--threads", "1"]) == 0
    out = capsys.readouterr().out
    assert "dense square root skipped" in out
    report = json.loads((tmp_path / "bench.json").read_text())
    full = [r for r in report if r["MX"] == 50 and r["k"] == 50][0]
    assert full["max_abs_deviation"] <= 1e-6
    assert all(r["max_abs_deviation"] is None for r in report if r["MX"] == 400)


def test_cohort_round_trip_through_cli_files(toy_run):
    recs = read_cohort(toy_run / "cohort.jsonl")
    assert len(recs) == 150 and len({r.id for r in recs}) == 150
